//! The detection network: a toy convolutional pyramid with shared heads.
//!
//! Per level, a bypass predicts `2K` coarse offsets (in cells). The
//! regression and classification branches each run two 3x3 convolutions,
//! then a K-point deformable convolution that samples at the coarse joint
//! locations, then a 1x1 output layer. An optional heatmap branch predicts
//! per-joint maps for intermediate supervision.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::decode_cell;
use crate::error::{Error, Result};
use crate::nms::{greedy_nms, Detection, NmsKind, Similarity};
use crate::oks::OksParams;
use crate::tensor::{sigmoid, Graph, Tensor, TensorError, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Initial classification bias, `-ln((1 - 0.01) / 0.01)`.
pub const PRIOR_LOGIT: f64 = -4.59511985013459;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub num_joints: usize,
    pub in_channels: usize,
    /// Feature width of the backbone, pyramid and branch convolutions.
    pub channels: usize,
    /// Output width of the deformable layers.
    pub embed_channels: usize,
    pub strides: Vec<usize>,
    pub score_threshold: f64,
    pub topk_per_level: usize,
    pub nms: NmsKind,
    /// `None` uses the default threshold of `nms`.
    pub nms_threshold: Option<f64>,
    pub max_keep: usize,
    /// Builds the heatmap branch output during training.
    pub intermediate_supervision: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_joints: 5,
            in_channels: 3,
            channels: 16,
            embed_channels: 16,
            strides: vec![4, 8, 16],
            score_threshold: 0.05,
            topk_per_level: 50,
            nms: NmsKind::Oks,
            nms_threshold: None,
            max_keep: crate::nms::DEFAULT_MAX_KEEP,
            intermediate_supervision: true,
        }
    }
}

impl HeadConfig {
    pub fn level_count(&self) -> usize {
        self.strides.len()
    }

    pub fn nms_threshold(&self) -> f64 {
        self.nms_threshold
            .unwrap_or_else(|| self.nms.default_threshold())
    }

    /// Number of stride-2 backbone stages.
    pub fn stage_count(&self) -> usize {
        self.strides
            .last()
            .map_or(0, |s| s.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_joints == 0 || self.in_channels == 0 {
            return bad("num_joints and in_channels must be positive");
        }
        if self.channels == 0 || self.embed_channels == 0 {
            return bad("channels and embed_channels must be positive");
        }
        if self.strides.is_empty() {
            return bad("at least one pyramid level is required");
        }
        if self.strides[0] < 2 || !self.strides[0].is_power_of_two() {
            return bad("first stride must be a power of two >= 2");
        }
        if self.strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad("each stride must double the previous one");
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return bad("score_threshold must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.nms_threshold()) {
            return bad("nms_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Which displacement terms a decode adds to the cell center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Coarse,
    Refined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub heatmaps: bool,
    /// Lets gradients reach the bypass through the deformable layers.
    pub offset_grad: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            heatmaps: false,
            offset_grad: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: HeadConfig,
    pub params: Vec<Param>,
}

enum Init {
    Hidden,
    Zero,
    Const(f64),
}

fn param_specs(cfg: &HeadConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (c, e, k) = (cfg.channels, cfg.embed_channels, cfg.num_joints);
    let mut specs = Vec::new();
    let mut conv = |name: &str, shape: Vec<usize>, w: Init, b: Init| {
        let out = shape[0];
        specs.push((format!("{name}.weight"), shape, w));
        specs.push((format!("{name}.bias"), vec![out], b));
    };
    for s in 0..cfg.stage_count() {
        let cin = if s == 0 { cfg.in_channels } else { c };
        conv(
            &format!("backbone.stage{s}"),
            vec![c, cin, 3, 3],
            Init::Hidden,
            Init::Zero,
        );
    }
    for l in 0..cfg.level_count() {
        conv(
            &format!("fpn.lateral{l}"),
            vec![c, c, 1, 1],
            Init::Hidden,
            Init::Zero,
        );
    }
    conv("bypass.conv", vec![c, c, 3, 3], Init::Hidden, Init::Zero);
    conv("bypass.out", vec![2 * k, c, 1, 1], Init::Zero, Init::Zero);
    for branch in ["reg", "cls"] {
        conv(
            &format!("{branch}.conv0"),
            vec![c, c, 3, 3],
            Init::Hidden,
            Init::Zero,
        );
        conv(
            &format!("{branch}.conv1"),
            vec![c, c, 3, 3],
            Init::Hidden,
            Init::Zero,
        );
        conv(
            &format!("{branch}.dcn"),
            vec![e, c, k],
            Init::Hidden,
            Init::Zero,
        );
    }
    conv("reg.out", vec![2 * k, e, 1, 1], Init::Zero, Init::Zero);
    conv(
        "cls.out",
        vec![1, e, 1, 1],
        Init::Hidden,
        Init::Const(PRIOR_LOGIT),
    );
    conv("heat.conv", vec![c, c, 3, 3], Init::Hidden, Init::Zero);
    conv("heat.out", vec![k, c, 1, 1], Init::Hidden, Init::Zero);
    specs
}

/// Hidden weights are uniform in `+-sqrt(6 / fan_in)`; the bypass and
/// refinement outputs start at zero and the score bias at [`PRIOR_LOGIT`].
pub fn build_model(cfg: &HeadConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = param_specs(cfg)
        .into_iter()
        .map(|(name, shape, init)| {
            let value = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::Const(v) => Tensor::full(&shape, v),
                Init::Hidden => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
            };
            Param { name, value }
        })
        .collect();
    Ok(Model {
        config: cfg.clone(),
        params,
    })
}

/// Graph handles of one level's outputs.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub coarse: Var,
    pub refine: Var,
    pub logits: Var,
    pub heatmaps: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelPrediction {
    pub stride: usize,
    /// `2K x H x W`, in cells.
    pub coarse: Tensor,
    /// `2K x H x W`, in cells.
    pub refine: Tensor,
    /// `1 x H x W`.
    pub logits: Tensor,
    /// `K x H x W` when requested.
    pub heatmaps: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensePrediction {
    pub levels: Vec<LevelPrediction>,
}

struct Ctx<'a> {
    model: &'a Model,
    vars: &'a [Var],
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Var {
        let i = self
            .model
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, stride: usize) -> Result<Var, TensorError> {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        let pad = g.value(w).shape()[2] / 2;
        g.conv2d(x, w, b, stride, pad)
    }

    fn conv_relu(
        &self,
        g: &mut Graph,
        x: Var,
        name: &str,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let y = self.conv(g, x, name, stride)?;
        Ok(g.relu(y))
    }
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    /// Records the forward pass on `graph`. `params` holds one handle per
    /// entry of `self.params`, in order; the parameter values are read from
    /// the graph, not from `self`.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        params: &[Var],
        image: Var,
        opts: ForwardOptions,
    ) -> Result<Vec<LevelVars>> {
        let cfg = &self.config;
        if params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let shape = graph.value(image).shape().to_vec();
        let top = *cfg.strides.last().unwrap_or(&1);
        match shape[..] {
            [c, h, w] if c == cfg.in_channels && h % top == 0 && w % top == 0 && h > 0 && w > 0 => {
            }
            _ => {
                return Err(Error::Config(format!(
                    "image shape {shape:?} must be {} x H x W with H, W divisible by {top}",
                    cfg.in_channels
                )))
            }
        }
        let ctx = Ctx {
            model: self,
            vars: params,
        };

        let mut stages = Vec::with_capacity(cfg.stage_count());
        let mut x = image;
        for s in 0..cfg.stage_count() {
            x = ctx.conv_relu(graph, x, &format!("backbone.stage{s}"), 2)?;
            stages.push(x);
        }
        let first = cfg.stage_count() - cfg.level_count();
        let mut pyramid = vec![None; cfg.level_count()];
        let mut above: Option<Var> = None;
        for l in (0..cfg.level_count()).rev() {
            let lat = ctx.conv(graph, stages[first + l], &format!("fpn.lateral{l}"), 1)?;
            let p = match above {
                Some(up) => {
                    let up = graph.upsample_nearest(up, 2)?;
                    graph.add(lat, up)?
                }
                None => lat,
            };
            pyramid[l] = Some(p);
            above = Some(p);
        }

        let mut levels = Vec::with_capacity(cfg.level_count());
        for p in pyramid.into_iter().flatten() {
            let b = ctx.conv_relu(graph, p, "bypass.conv", 1)?;
            let coarse = ctx.conv(graph, b, "bypass.out", 1)?;
            let mut branch = |name: &str| -> Result<Var, TensorError> {
                let h = ctx.conv_relu(graph, p, &format!("{name}.conv0"), 1)?;
                let h = ctx.conv_relu(graph, h, &format!("{name}.conv1"), 1)?;
                let e = graph.deformable_pose_conv(
                    h,
                    coarse,
                    ctx.var(&format!("{name}.dcn.weight")),
                    ctx.var(&format!("{name}.dcn.bias")),
                    opts.offset_grad,
                )?;
                let e = graph.relu(e);
                ctx.conv(graph, e, &format!("{name}.out"), 1)
            };
            let refine = branch("reg")?;
            let logits = branch("cls")?;
            let heatmaps = if opts.heatmaps {
                let h = ctx.conv_relu(graph, p, "heat.conv", 1)?;
                Some(ctx.conv(graph, h, "heat.out", 1)?)
            } else {
                None
            };
            levels.push(LevelVars {
                coarse,
                refine,
                logits,
                heatmaps,
            });
        }
        Ok(levels)
    }

    /// Inference forward pass.
    pub fn forward(&self, image: &Tensor, opts: ForwardOptions) -> Result<DensePrediction> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect();
        let img = g.constant(image.clone());
        let levels = self.forward_graph(&mut g, &vars, img, opts)?;
        Ok(collect_prediction(&g, &levels, &self.config.strides))
    }
}

pub fn collect_prediction(g: &Graph, levels: &[LevelVars], strides: &[usize]) -> DensePrediction {
    DensePrediction {
        levels: levels
            .iter()
            .zip(strides)
            .map(|(l, &stride)| LevelPrediction {
                stride,
                coarse: g.value(l.coarse).clone(),
                refine: g.value(l.refine).clone(),
                logits: g.value(l.logits).clone(),
                heatmaps: l.heatmaps.map(|h| g.value(h).clone()),
            })
            .collect(),
    }
}

/// Every cell of every level as a scored detection, level by level in
/// row-major order.
pub fn dense_candidates(pred: &DensePrediction, mode: DecodeMode) -> Vec<Detection> {
    let mut out = Vec::new();
    for (l, lp) in pred.levels.iter().enumerate() {
        let (h, w) = (lp.logits.shape()[1], lp.logits.shape()[2]);
        let refine = match mode {
            DecodeMode::Coarse => None,
            DecodeMode::Refined => Some(&lp.refine),
        };
        for r in 0..h {
            for c in 0..w {
                let score = sigmoid(lp.logits.at3(0, r, c));
                let pose = decode_cell(&lp.coarse, refine, r, c, lp.stride).with_score(score);
                out.push(Detection::new(pose, score, l));
            }
        }
    }
    out
}

/// Thresholds scores, keeps the top `topk_per_level` cells of each level,
/// decodes `center + stride * (coarse + refine)` and suppresses duplicates.
pub fn decode(pred: &DensePrediction, cfg: &HeadConfig, params: &OksParams) -> Vec<Detection> {
    decode_with(pred, cfg, params, DecodeMode::Refined)
}

pub fn decode_with(
    pred: &DensePrediction,
    cfg: &HeadConfig,
    params: &OksParams,
    mode: DecodeMode,
) -> Vec<Detection> {
    let mut pool = Vec::new();
    for l in 0..pred.levels.len() {
        let single = DensePrediction {
            levels: vec![pred.levels[l].clone()],
        };
        let mut dets: Vec<Detection> = dense_candidates(&single, mode)
            .into_iter()
            .filter(|d| d.score > cfg.score_threshold)
            .map(|mut d| {
                d.level = l;
                d
            })
            .collect();
        // Stable: ties keep row-major order.
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(cfg.topk_per_level);
        pool.extend(dets);
    }
    greedy_nms(
        &pool,
        Similarity::new(cfg.nms, params),
        cfg.nms_threshold(),
        cfg.max_keep,
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    config: HeadConfig,
    params: Vec<CheckpointParam>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|p| CheckpointParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let ck: Checkpoint = serde_path_to_error::deserialize(de).map_err(|e| {
        Error::parse(
            format!("{}: {}", path.display(), e.path()),
            e.inner().to_string(),
        )
    })?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            format!("{}: version", path.display()),
            format!("unsupported checkpoint version {}", ck.version),
        ));
    }
    ck.config.validate()?;
    let expected = param_specs(&ck.config);
    if expected.len() != ck.params.len() {
        return Err(Error::parse(
            format!("{}: params", path.display()),
            format!(
                "expected {} parameters, found {}",
                expected.len(),
                ck.params.len()
            ),
        ));
    }
    let mut params = Vec::with_capacity(expected.len());
    for (i, ((name, shape, _), p)) in expected.into_iter().zip(ck.params).enumerate() {
        if p.name != name || p.shape != shape {
            return Err(Error::parse(
                format!("{}: params[{i}]", path.display()),
                format!("expected {name} {shape:?}, found {} {:?}", p.name, p.shape),
            ));
        }
        let value = Tensor::new(shape, p.data).map_err(|e| {
            Error::parse(
                format!("{}: params[{i}].data", path.display()),
                e.to_string(),
            )
        })?;
        params.push(Param { name, value });
    }
    Ok(Model {
        config: ck.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{assign_coarse_targets, CentroidMode, LevelConfig};
    use crate::domain::{Keypoint, Pose};

    fn small() -> HeadConfig {
        HeadConfig {
            channels: 8,
            embed_channels: 6,
            ..HeadConfig::default()
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(&small(), 3).unwrap();
        assert_eq!(a, build_model(&small(), 3).unwrap());
        assert_ne!(a, build_model(&small(), 4).unwrap());
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = HeadConfig {
            channels: 32,
            embed_channels: 32,
            ..HeadConfig::default()
        };
        let m = build_model(&cfg, 0).unwrap();
        let (c, e, k, cin) = (32, 32, 5, 3);
        let conv = |o: usize, i: usize, kk: usize| o * i * kk * kk + o;
        let backbone = conv(c, cin, 3) + 3 * conv(c, c, 3);
        let laterals = 3 * conv(c, c, 1);
        let bypass = conv(c, c, 3) + conv(2 * k, c, 1);
        let dcn = e * c * k + e;
        let reg = 2 * conv(c, c, 3) + dcn + conv(2 * k, e, 1);
        let cls = 2 * conv(c, c, 3) + dcn + conv(1, e, 1);
        let heat = conv(c, c, 3) + conv(k, c, 1);
        assert_eq!(
            m.param_count(),
            backbone + laterals + bypass + reg + cls + heat
        );
    }

    #[test]
    fn output_shapes() {
        let cfg = small();
        let m = build_model(&cfg, 1).unwrap();
        let img = Tensor::from_fn(&[3, 64, 64], |i| (i % 7) as f64 / 7.0);
        let pred = m
            .forward(
                &img,
                ForwardOptions {
                    heatmaps: true,
                    offset_grad: true,
                },
            )
            .unwrap();
        let grids: Vec<_> = pred
            .levels
            .iter()
            .map(|l| l.coarse.shape().to_vec())
            .collect();
        assert_eq!(
            grids,
            vec![vec![10, 16, 16], vec![10, 8, 8], vec![10, 4, 4]]
        );
        for l in &pred.levels {
            let (h, w) = (l.coarse.shape()[1], l.coarse.shape()[2]);
            assert_eq!(l.refine.shape(), [10, h, w]);
            assert_eq!(l.logits.shape(), [1, h, w]);
            assert_eq!(l.heatmaps.as_ref().unwrap().shape(), [5, h, w]);
        }
        assert!(m
            .forward(&Tensor::zeros(&[3, 60, 64]), ForwardOptions::default())
            .is_err());
        assert!(m
            .forward(&Tensor::zeros(&[1, 64, 64]), ForwardOptions::default())
            .is_err());
    }

    #[test]
    fn zero_input_gives_zero_offsets_and_prior_logits() {
        let m = build_model(&small(), 5).unwrap();
        let pred = m
            .forward(&Tensor::zeros(&[3, 32, 32]), ForwardOptions::default())
            .unwrap();
        for l in &pred.levels {
            assert!(l.coarse.data().iter().all(|&v| v == 0.0));
            assert!(l.refine.data().iter().all(|&v| v == 0.0));
            assert!(l.logits.data().iter().all(|&v| v == PRIOR_LOGIT));
            assert!(l.heatmaps.is_none());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = build_model(&small(), 9).unwrap();
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i * 31) % 11) as f64 / 11.0);
        let a = m.forward(&img, ForwardOptions::default()).unwrap();
        let b = m.forward(&img, ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heads_are_shared_across_levels() {
        let cfg = small();
        let m = build_model(&cfg, 2).unwrap();
        let names: Vec<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
        for head in [
            "bypass.out.weight",
            "reg.dcn.weight",
            "cls.out.bias",
            "heat.out.weight",
        ] {
            assert_eq!(names.iter().filter(|n| **n == head).count(), 1);
        }
        assert!(!names.iter().any(|n| n.contains("level")));
        // A perturbation of a shared head weight changes every level.
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i * 13) % 5) as f64 / 5.0);
        let before = m.forward(&img, ForwardOptions::default()).unwrap();
        let mut m2 = m.clone();
        let idx = m2
            .params
            .iter()
            .position(|p| p.name == "cls.out.bias")
            .unwrap();
        m2.params[idx].value.data_mut()[0] += 1.0;
        let after = m2.forward(&img, ForwardOptions::default()).unwrap();
        for (a, b) in before.levels.iter().zip(&after.levels) {
            assert!(a
                .logits
                .data()
                .iter()
                .zip(b.logits.data())
                .all(|(x, y)| (y - x - 1.0).abs() < 1e-12));
        }
    }

    fn one_cell_prediction(
        stride: usize,
        coarse: &[f64],
        refine: &[f64],
        logit: f64,
    ) -> DensePrediction {
        let k2 = coarse.len();
        let mut lp = LevelPrediction {
            stride,
            coarse: Tensor::zeros(&[k2, 3, 3]),
            refine: Tensor::zeros(&[k2, 3, 3]),
            logits: Tensor::full(&[1, 3, 3], -20.0),
            heatmaps: None,
        };
        // Cell (2, 2) at stride 4 has center (10, 10).
        for ch in 0..k2 {
            lp.coarse.set3(ch, 2, 2, coarse[ch]);
            lp.refine.set3(ch, 2, 2, refine[ch]);
        }
        lp.logits.set3(0, 2, 2, logit);
        DensePrediction { levels: vec![lp] }
    }

    #[test]
    fn decode_composes_coarse_and_refine() {
        let cfg = HeadConfig {
            num_joints: 1,
            strides: vec![4],
            ..HeadConfig::default()
        };
        let params = OksParams::new(vec![0.079], 1.0).unwrap();
        let pred = one_cell_prediction(4, &[1.0, 1.0], &[0.5, -0.5], 3.0);
        let dets = decode(&pred, &cfg, &params);
        assert_eq!(dets.len(), 1);
        let kp = dets[0].pose.keypoints[0];
        assert_eq!((kp.x, kp.y), (16.0, 12.0));
        assert!((dets[0].score - sigmoid(3.0)).abs() < 1e-15);

        let coarse = decode_with(&pred, &cfg, &params, DecodeMode::Coarse);
        assert_eq!(
            (coarse[0].pose.keypoints[0].x, coarse[0].pose.keypoints[0].y),
            (14.0, 14.0)
        );
        let zero = one_cell_prediction(4, &[1.0, 1.0], &[0.0, 0.0], 3.0);
        assert_eq!(
            decode(&zero, &cfg, &params)[0].pose,
            decode_with(&zero, &cfg, &params, DecodeMode::Coarse)[0].pose
        );
    }

    #[test]
    fn duplicate_candidates_are_suppressed() {
        let cfg = HeadConfig {
            num_joints: 2,
            strides: vec![4],
            ..HeadConfig::default()
        };
        let params = OksParams::new(vec![0.079; 2], 1.0).unwrap();
        let mut pred = one_cell_prediction(4, &[1.0, 1.0, -2.0, 3.0], &[0.0; 4], 2.0);
        let lp = &mut pred.levels[0];
        // Cell (2, 1) points at the same joints as cell (2, 2).
        for (ch, v) in [2.0, 1.0, -1.0, 3.0].into_iter().enumerate() {
            lp.coarse.set3(ch, 2, 1, v);
        }
        lp.logits.set3(0, 2, 1, 1.0);
        for kind in [NmsKind::Oks, NmsKind::Iou] {
            let cfg = HeadConfig {
                nms: kind,
                ..cfg.clone()
            };
            let dets = decode(&pred, &cfg, &params);
            assert_eq!(dets.len(), 1);
            assert!((dets[0].score - sigmoid(2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn topk_and_threshold() {
        let cfg = HeadConfig {
            num_joints: 1,
            strides: vec![4],
            topk_per_level: 2,
            nms_threshold: Some(1.0),
            ..HeadConfig::default()
        };
        let params = OksParams::new(vec![0.079], 1.0).unwrap();
        let mut pred = one_cell_prediction(4, &[0.0, 0.0], &[0.0, 0.0], 0.0);
        let lp = &mut pred.levels[0];
        lp.logits = Tensor::from_fn(&[1, 3, 3], |i| i as f64 - 4.0);
        let dets = decode(&pred, &cfg, &params);
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![sigmoid(4.0), sigmoid(3.0)]);
    }

    #[test]
    fn encode_then_decode_reproduces_ground_truth() {
        let levels = LevelConfig::default();
        let cfg = HeadConfig::default();
        let params = OksParams::new(vec![0.079; 3], 1.0).unwrap();
        let mut gt = Pose::from_points(&[(20.3, 11.7), (41.9, 30.2), (27.5, 50.25)]);
        gt.keypoints[1] = Keypoint::new(0.0, 0.0, 0);
        let grids = levels.grids(64, 64);
        let a = assign_coarse_targets(
            std::slice::from_ref(&gt),
            &levels,
            &grids,
            CentroidMode::Keypoints,
        )
        .unwrap();
        let t = &a.targets[0];
        let mut pred = DensePrediction {
            levels: grids
                .iter()
                .zip(&levels.strides)
                .map(|(&(h, w), &stride)| LevelPrediction {
                    stride,
                    coarse: Tensor::zeros(&[6, h, w]),
                    refine: Tensor::zeros(&[6, h, w]),
                    logits: Tensor::full(&[1, h, w], -30.0),
                    heatmaps: None,
                })
                .collect(),
        };
        let lp = &mut pred.levels[t.level];
        for (ch, &v) in t.target_offsets.iter().enumerate() {
            lp.coarse.set3(ch, t.cell.0, t.cell.1, v);
        }
        lp.logits.set3(0, t.cell.0, t.cell.1, 30.0);
        let cfg = HeadConfig {
            num_joints: 3,
            ..cfg
        };
        let dets = decode(&pred, &cfg, &params);
        assert_eq!(dets.len(), 1);
        for (d, g) in dets[0].pose.keypoints.iter().zip(&gt.keypoints) {
            if g.counts() {
                assert!((d.x - g.x).abs() <= 1e-9 && (d.y - g.y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_model(&small(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"version\":1", "\"version\":9", 1)).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
