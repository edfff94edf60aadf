use super::kernels::{self, ConvGeometry, DeformGeometry};
use super::{shape_err, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-element classification target for [`Graph::focal_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FocalLabel {
    Positive,
    Negative,
    Ignore,
}

enum Op {
    Leaf,
    Constant,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    Sample {
        feature: Var,
        point: Var,
    },
    Deform {
        feature: Var,
        offsets: Var,
        weight: Var,
        bias: Var,
        geom: DeformGeometry,
        offset_grad: bool,
    },
    /// Elementwise function with derivative values captured at forward time.
    Map {
        input: Var,
        derivative: Vec<f64>,
    },
    L2 {
        preds: Vec<Var>,
        /// `2 * mask * (pred - target) / denom` per term.
        slopes: Vec<Vec<f64>>,
    },
    Focal {
        logits: Vec<Var>,
        slopes: Vec<Vec<f64>>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the reverse of insertion order is a valid backward schedule.
pub struct Graph {
    nodes: Vec<Node>,
    track_kinks: bool,
    kink_signature: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track_kinks: false,
            kink_signature: 0,
        }
    }

    /// A graph that fingerprints every non-smooth decision (ReLU signs,
    /// bilinear cells, clamping) so finite differences can detect when a
    /// perturbation crosses a kink.
    pub fn with_kink_tracking() -> Self {
        Graph {
            track_kinks: true,
            ..Self::new()
        }
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn note_kink(&mut self, value: u64) {
        self.kink_signature = kernels::mix(self.kink_signature, value);
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies the current value of `v` as a constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (xi, wi, bi) = (self.value(input), self.value(weight), self.value(bias));
        let geom = kernels::conv_geometry(xi, wi, bi, stride, padding)?;
        let out = kernels::conv2d_forward(xi, wi, bi, stride, padding)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        if self.track_kinks {
            let sig = self.value(input).data().iter().enumerate().fold(
                0x9e37_79b9_7f4a_7c15u64,
                |s, (i, &v)| {
                    if v > 0.0 {
                        kernels::mix(s, i as u64 + 1)
                    } else {
                        s
                    }
                },
            );
            self.note_kink(sig);
        }
        let needs = self.needs(input);
        self.push(out, Op::Relu(input), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let needs = self.needs(input);
        self.push(out, Op::Scale(input, factor), needs)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let needs = self.needs(input);
        self.push(out, Op::Sum(input), needs)
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        let out = kernels::upsample_nearest(self.value(input), factor)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::Upsample { input, factor }, needs))
    }

    /// Samples `feature` (`C x H x W`) at `point` (shape `[2]`, `(x, y)` in
    /// cells), producing a `[C]` vector.
    pub fn bilinear_sample(&mut self, feature: Var, point: Var) -> Result<Var, TensorError> {
        let p = self.value(point);
        if p.shape() != [2] {
            return Err(shape_err(
                "bilinear_sample",
                format!("point must have shape [2], got {:?}", p.shape()),
            ));
        }
        let (x, y) = (p.data()[0], p.data()[1]);
        let f = self.value(feature);
        let values = kernels::bilinear_sample(f, x, y)?;
        if self.track_kinks {
            let (h, w) = (f.shape()[1], f.shape()[2]);
            self.note_kink(kernels::bilinear_tap(x, y, h, w).signature);
        }
        let needs = self.needs(feature) || self.needs(point);
        Ok(self.push(
            Tensor::from_vec(values),
            Op::Sample { feature, point },
            needs,
        ))
    }

    /// K-point deformable convolution: `weight` is `C_out x C_in x K`,
    /// `offsets` is `2K x H x W` in cells. With `offset_grad = false` the
    /// offsets are treated as constants by this operation.
    pub fn deformable_pose_conv(
        &mut self,
        feature: Var,
        offsets: Var,
        weight: Var,
        bias: Var,
        offset_grad: bool,
    ) -> Result<Var, TensorError> {
        let (f, o, w, b) = (
            self.value(feature),
            self.value(offsets),
            self.value(weight),
            self.value(bias),
        );
        let geom = kernels::deform_geometry(f, o, w, b)?;
        let out = kernels::deformable_pose_conv_forward(f, o, w, b)?;
        if self.track_kinks {
            let sig = kernels::deform_signature(o, geom);
            self.note_kink(sig);
        }
        let needs = self.needs(feature)
            || self.needs(weight)
            || self.needs(bias)
            || (offset_grad && self.needs(offsets));
        Ok(self.push(
            out,
            Op::Deform {
                feature,
                offsets,
                weight,
                bias,
                geom,
                offset_grad,
            },
            needs,
        ))
    }

    /// Elementwise `f` whose derivative is supplied by `df`.
    pub fn map(&mut self, input: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let x = self.value(input);
        let out = x.map(&f);
        let derivative = x.data().iter().map(|&v| df(v)).collect();
        let needs = self.needs(input);
        self.push(out, Op::Map { input, derivative }, needs)
    }

    /// Masked mean squared error pooled over several `(pred, target, mask)`
    /// terms: `sum(mask * (pred - target)^2) / max(1, sum(mask))`.
    pub fn l2_loss(
        &mut self,
        terms: &[(Var, &Tensor, Option<&Tensor>)],
    ) -> Result<Var, TensorError> {
        let mut denom = 0.0;
        for (pred, target, mask) in terms {
            let p = self.value(*pred);
            if p.shape() != target.shape() {
                return Err(shape_err(
                    "l2_loss",
                    format!("pred {:?} vs target {:?}", p.shape(), target.shape()),
                ));
            }
            match mask {
                Some(m) if m.shape() != p.shape() => {
                    return Err(shape_err(
                        "l2_loss",
                        format!("mask {:?} vs pred {:?}", m.shape(), p.shape()),
                    ))
                }
                Some(m) => denom += m.sum(),
                None => denom += p.numel() as f64,
            }
        }
        let denom = denom.max(1.0);
        let mut total = 0.0;
        let mut slopes = Vec::with_capacity(terms.len());
        for (pred, target, mask) in terms {
            let p = self.value(*pred).data();
            let t = target.data();
            let mut slope = vec![0.0; p.len()];
            for j in 0..p.len() {
                let m = mask.map_or(1.0, |m| m.data()[j]);
                let d = p[j] - t[j];
                total += m * d * d;
                slope[j] = 2.0 * m * d / denom;
            }
            slopes.push(slope);
        }
        let preds: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = preds.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::L2 { preds, slopes },
            needs,
        ))
    }

    /// Sigmoid focal loss over logit tensors, normalised by
    /// `max(1, #positives)`. Ignored elements contribute nothing.
    pub fn focal_loss(
        &mut self,
        terms: &[(Var, &[FocalLabel])],
        alpha: f64,
        gamma: f64,
    ) -> Result<Var, TensorError> {
        let mut positives = 0usize;
        for (logits, labels) in terms {
            let n = self.value(*logits).numel();
            if n != labels.len() {
                return Err(shape_err(
                    "focal_loss",
                    format!("{n} logits but {} labels", labels.len()),
                ));
            }
            positives += labels
                .iter()
                .filter(|l| **l == FocalLabel::Positive)
                .count();
        }
        let norm = positives.max(1) as f64;
        let mut total = 0.0;
        let mut slopes = Vec::with_capacity(terms.len());
        for (logits, labels) in terms {
            let z = self.value(*logits).data();
            let mut slope = vec![0.0; z.len()];
            for j in 0..z.len() {
                let (loss, grad) = match labels[j] {
                    FocalLabel::Positive => focal_positive(z[j], alpha, gamma),
                    // Mirror image of the positive case with z -> -z.
                    FocalLabel::Negative => {
                        let (l, g) = focal_positive(-z[j], 1.0 - alpha, gamma);
                        (l, -g)
                    }
                    FocalLabel::Ignore => (0.0, 0.0),
                };
                total += loss;
                slope[j] = grad / norm;
            }
            slopes.push(slope);
        }
        let logits: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = logits.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::Focal { logits, slopes },
            needs,
        ))
    }

    /// `sum_i w_i * s_i` over rank-0 inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(shape_err(
                    "weighted_sum",
                    format!("term has shape {:?}", t.shape()),
                ));
            }
            total += w * t.item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            needs,
        ))
    }

    /// Reverse-mode accumulation from a rank-0 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.value(loss).shape();
        if !shape.is_empty() {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.needs(v) {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            contrib(slot);
        };
        let add_into = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *geom,
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(gi) = gi {
                    acc(*input, &|d| add_into(d, &gi));
                }
                if let Some(gw) = gw {
                    acc(*weight, &|d| add_into(d, &gw));
                }
                acc(*bias, &|d| add_into(d, &gb));
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                acc(*input, &|d| {
                    for j in 0..d.len() {
                        if x[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::Scale(input, factor) => acc(*input, &|d| {
                for (dj, gj) in d.iter_mut().zip(g) {
                    *dj += factor * gj;
                }
            }),
            Op::Sum(input) => acc(*input, &|d| {
                for dj in d.iter_mut() {
                    *dj += g[0];
                }
            }),
            Op::Upsample { input, factor } => {
                let gi = kernels::upsample_nearest_backward(self.value(*input).shape(), *factor, g);
                acc(*input, &|d| add_into(d, &gi));
            }
            Op::Sample { feature, point } => {
                let f = self.value(*feature);
                let p = self.value(*point).data();
                let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
                let tap = kernels::bilinear_tap(p[0], p[1], h, w);
                acc(*feature, &|d| {
                    for ci in 0..c {
                        for t in 0..4 {
                            d[ci * h * w + tap.idx[t]] += g[ci] * tap.weight[t];
                        }
                    }
                });
                let fd = f.data();
                let (mut gx, mut gy) = (0.0, 0.0);
                for ci in 0..c {
                    for t in 0..4 {
                        let v = fd[ci * h * w + tap.idx[t]];
                        gx += g[ci] * tap.d_dx[t] * v;
                        gy += g[ci] * tap.d_dy[t] * v;
                    }
                }
                acc(*point, &|d| {
                    d[0] += gx;
                    d[1] += gy;
                });
            }
            Op::Deform {
                feature,
                offsets,
                weight,
                bias,
                geom,
                offset_grad,
            } => {
                let grads_out = kernels::deformable_pose_conv_backward(
                    self.value(*feature),
                    self.value(*offsets),
                    self.value(*weight),
                    *geom,
                    g,
                    [
                        self.needs(*feature),
                        *offset_grad && self.needs(*offsets),
                        self.needs(*weight),
                    ],
                );
                if let Some(gf) = grads_out.feature {
                    acc(*feature, &|d| add_into(d, &gf));
                }
                if let Some(go) = grads_out.offsets {
                    acc(*offsets, &|d| add_into(d, &go));
                }
                if let Some(gw) = grads_out.weight {
                    acc(*weight, &|d| add_into(d, &gw));
                }
                acc(*bias, &|d| add_into(d, &grads_out.bias));
            }
            Op::Map { input, derivative } => acc(*input, &|d| {
                for j in 0..d.len() {
                    d[j] += derivative[j] * g[j];
                }
            }),
            Op::L2 { preds, slopes }
            | Op::Focal {
                logits: preds,
                slopes,
            } => {
                for (pred, slope) in preds.iter().zip(slopes) {
                    acc(*pred, &|d| {
                        for (dj, sj) in d.iter_mut().zip(slope) {
                            *dj += g[0] * sj;
                        }
                    });
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, &|d| d[0] += w * g[0]);
                }
            }
        }
    }
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss `-alpha (1-p)^gamma log p` and its derivative with respect to the
/// logit, `alpha (1-p)^gamma (gamma p log p - (1 - p))`.
fn focal_positive(z: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = sigmoid(-z);
    let log_p = log_sigmoid(z);
    let mod_factor = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -alpha * mod_factor * log_p;
    let grad = alpha * mod_factor * (gamma * p * log_p - q);
    (loss, grad)
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
