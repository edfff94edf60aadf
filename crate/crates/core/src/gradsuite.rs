//! Randomised finite-difference checks of every differentiable operation and
//! of the full head loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::domain::{Keypoint, Pose};
use crate::error::Result;
use crate::model::{build_model, ForwardOptions, HeadConfig};
use crate::supervision::{build_targets, total_loss, FocalParams, LossTerms, LossWeights};
use crate::tensor::{
    gradcheck, FocalLabel, GradcheckOptions, GradcheckReport, Graph, Tensor, TensorError, Var,
};
use crate::training::{head_loss, TrainConfig};

/// Operations covered by [`run_suite`], in report order.
pub const SUITE_OPS: [&str; 8] = [
    "conv2d",
    "relu",
    "bilinear_sample",
    "deformable_pose_conv",
    "l2_loss",
    "focal_loss",
    "total_loss",
    "head",
];

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Random configurations per operation.
    pub configs: usize,
    pub seed: u64,
    pub check: GradcheckOptions,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            configs: 50,
            seed: 0,
            check: GradcheckOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpSummary {
    pub op: String,
    pub configs: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub ops: Vec<OpSummary>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed == o.configs)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Squared distance to a fixed random target: turns any output into a
/// scalar with a generic upstream gradient.
fn probe(g: &mut Graph, out: Var, target: &Tensor) -> std::result::Result<Var, TensorError> {
    g.l2_loss(&[(out, target, None)])
}

fn check_config(op: &str, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions {
        seed,
        ..opts.clone()
    };
    let report = match op {
        "conv2d" => {
            let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2);
            let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
            let x = uniform(&mut rng, &[ci, h, w], -1.0, 1.0);
            let wt = uniform(&mut rng, &[co, ci, k, k], -1.0, 1.0);
            let b = uniform(&mut rng, &[co], -1.0, 1.0);
            let (oh, ow) = (
                (h + 2 * pad - k) / stride + 1,
                (w + 2 * pad - k) / stride + 1,
            );
            let target = uniform(&mut rng, &[co, oh, ow], -1.0, 1.0);
            gradcheck(
                &[("input", x), ("weight", wt), ("bias", b)],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                    probe(g, y, &target)
                },
                &opts,
            )?
        }
        "relu" => {
            let n = rng.random_range(1..=24);
            let x = uniform(&mut rng, &[n], -1.0, 1.0);
            let target = uniform(&mut rng, &[n], -1.0, 1.0);
            gradcheck(
                &[("input", x)],
                |g, v| {
                    let y = g.relu(v[0]);
                    probe(g, y, &target)
                },
                &opts,
            )?
        }
        "bilinear_sample" => {
            let (c, h, w) = (
                rng.random_range(1..=3),
                rng.random_range(1..=5),
                rng.random_range(1..=5),
            );
            let f = uniform(&mut rng, &[c, h, w], -1.0, 1.0);
            let p = Tensor::from_vec(vec![
                rng.random_range(-1.5..w as f64 + 0.5),
                rng.random_range(-1.5..h as f64 + 0.5),
            ]);
            let target = uniform(&mut rng, &[c], -1.0, 1.0);
            gradcheck(
                &[("feature", f), ("point", p)],
                |g, v| {
                    let y = g.bilinear_sample(v[0], v[1])?;
                    probe(g, y, &target)
                },
                &opts,
            )?
        }
        "deformable_pose_conv" => {
            let (ci, co, k) = (
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=4),
            );
            let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
            let f = uniform(&mut rng, &[ci, h, w], -1.0, 1.0);
            let off = uniform(&mut rng, &[2 * k, h, w], -2.0, 2.0);
            let wt = uniform(&mut rng, &[co, ci, k], -1.0, 1.0);
            let b = uniform(&mut rng, &[co], -1.0, 1.0);
            let target = uniform(&mut rng, &[co, h, w], -1.0, 1.0);
            if rng.random_bool(0.75) {
                gradcheck(
                    &[
                        ("feature", f),
                        ("offsets", off),
                        ("weight", wt),
                        ("bias", b),
                    ],
                    |g, v| {
                        let y = g.deformable_pose_conv(v[0], v[1], v[2], v[3], true)?;
                        probe(g, y, &target)
                    },
                    &opts,
                )?
            } else {
                // Offsets held fixed: the layer must still be exact in the rest.
                gradcheck(
                    &[("feature", f), ("weight", wt), ("bias", b)],
                    |g, v| {
                        let o = g.constant(off.clone());
                        let y = g.deformable_pose_conv(v[0], o, v[1], v[2], false)?;
                        probe(g, y, &target)
                    },
                    &opts,
                )?
            }
        }
        "l2_loss" => {
            let terms = rng.random_range(1..=3);
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            let mut masks = Vec::new();
            for _ in 0..terms {
                let n = rng.random_range(1..=12);
                inputs.push(uniform(&mut rng, &[n], -2.0, 2.0));
                targets.push(uniform(&mut rng, &[n], -2.0, 2.0));
                masks.push(rng.random_bool(0.5).then(|| {
                    Tensor::from_fn(&[n], |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 })
                }));
            }
            let named: Vec<(String, Tensor)> = inputs
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("pred{i}"), t))
                .collect();
            let named: Vec<(&str, Tensor)> =
                named.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
            gradcheck(
                &named,
                |g, v| {
                    let terms: Vec<_> = v
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| (p, &targets[i], masks[i].as_ref()))
                        .collect();
                    g.l2_loss(&terms)
                },
                &opts,
            )?
        }
        "focal_loss" => {
            let terms = rng.random_range(1..=3);
            let alpha = rng.random_range(0.05..0.95);
            let gamma = [0.0, 1.0, 1.5, 2.0][rng.random_range(0..4)];
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for i in 0..terms {
                let n = rng.random_range(1..=12);
                inputs.push((format!("logits{i}"), uniform(&mut rng, &[n], -4.0, 4.0)));
                labels.push(
                    (0..n)
                        .map(|_| match rng.random_range(0..3) {
                            0 => FocalLabel::Positive,
                            1 => FocalLabel::Negative,
                            _ => FocalLabel::Ignore,
                        })
                        .collect::<Vec<_>>(),
                );
            }
            let named: Vec<(&str, Tensor)> = inputs
                .iter()
                .map(|(n, t)| (n.as_str(), t.clone()))
                .collect();
            gradcheck(
                &named,
                |g, v| {
                    let terms: Vec<_> = v
                        .iter()
                        .zip(&labels)
                        .map(|(&z, l)| (z, l.as_slice()))
                        .collect();
                    g.focal_loss(&terms, alpha, gamma)
                },
                &opts,
            )?
        }
        "total_loss" => {
            let n = rng.random_range(1..=8);
            let weights = LossWeights {
                coarse: rng.random_range(0.0..2.0),
                refine: rng.random_range(0.0..2.0),
                focal: rng.random_range(0.0..2.0),
                heatmap: rng.random_range(0.0..2.0),
            };
            let focal = FocalParams {
                alpha: rng.random_range(0.1..0.9),
                gamma: 2.0,
            };
            let tc = uniform(&mut rng, &[n], -1.0, 1.0);
            let tr = uniform(&mut rng, &[n], -1.0, 1.0);
            let th = uniform(&mut rng, &[n], 0.0, 1.0);
            let mask = Tensor::from_fn(&[n], |i| (i % 2) as f64);
            let labels: Vec<FocalLabel> = (0..n)
                .map(|i| {
                    if i % 3 == 0 {
                        FocalLabel::Positive
                    } else {
                        FocalLabel::Negative
                    }
                })
                .collect();
            let inputs = [
                ("coarse", uniform(&mut rng, &[n], -1.0, 1.0)),
                ("refine", uniform(&mut rng, &[n], -1.0, 1.0)),
                ("logits", uniform(&mut rng, &[n], -3.0, 3.0)),
                ("heatmap", uniform(&mut rng, &[n], -1.0, 1.0)),
            ];
            gradcheck(
                &inputs,
                |g, v| {
                    let terms = LossTerms {
                        coarse: vec![(v[0], &tc, None)],
                        refine: vec![(v[1], &tr, Some(&mask))],
                        scores: vec![(v[2], &labels)],
                        heatmaps: vec![(v[3], &th, None)],
                    };
                    Ok(total_loss(g, &terms, weights, focal)?.0)
                },
                &opts,
            )?
        }
        "head" => head_config(&mut rng, &opts)?,
        other => unreachable!("unknown suite op {other}"),
    };
    Ok(report)
}

/// End-to-end check of the full training loss with respect to every model
/// parameter and the input image. Targets are built once from the
/// unperturbed forward pass and then held fixed.
fn head_config(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = HeadConfig {
        num_joints: 2,
        in_channels: 2,
        channels: 3,
        embed_channels: 3,
        strides: vec![4, 8],
        intermediate_supervision: rng.random_bool(0.5),
        ..HeadConfig::default()
    };
    let mut model = build_model(&cfg, rng.random())?;
    for p in &mut model.params {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let (h, w) = (16, 16);
    let image = uniform(rng, &[2, h, w], 0.0, 1.0);
    let gt: Vec<Pose> = (0..rng.random_range(1..=2))
        .map(|_| {
            let (cx, cy) = (rng.random_range(3.0..13.0), rng.random_range(3.0..13.0));
            Pose::new(
                (0..2)
                    .map(|_| {
                        Keypoint::new(
                            cx + rng.random_range(-3.0..3.0),
                            cy + rng.random_range(-3.0..3.0),
                            2,
                        )
                    })
                    .collect(),
            )
        })
        .collect();
    let tcfg = TrainConfig {
        offset_grad: true,
        base_scale: 4.0,
        ..TrainConfig::default()
    };
    let targets_cfg = tcfg.target_config(&model)?;
    let fopts = ForwardOptions {
        heatmaps: cfg.intermediate_supervision,
        offset_grad: true,
    };
    let targets = {
        let mut g = Graph::new();
        let params: Vec<Var> = model
            .params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect();
        let x = g.constant(image.clone());
        let levels = model.forward_graph(&mut g, &params, x, fopts)?;
        let coarse: Vec<&Tensor> = levels.iter().map(|l| g.value(l.coarse)).collect();
        build_targets(&gt, &coarse, &targets_cfg)?
    };
    let mut inputs: Vec<(&str, Tensor)> = model
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.value.clone()))
        .collect();
    inputs.push(("image", image));
    let n = model.params.len();
    let failure = std::sync::Mutex::new(None);
    let report = gradcheck(
        &inputs,
        |g, v| {
            let levels = match model.forward_graph(g, &v[..n], v[n], fopts) {
                Ok(l) => l,
                Err(e) => {
                    *failure.lock().unwrap() = Some(e);
                    return Err(TensorError::Shape {
                        op: "head",
                        detail: "forward failed".into(),
                    });
                }
            };
            match head_loss(g, &levels, &targets, &tcfg) {
                Ok((loss, _)) => Ok(loss),
                Err(e) => {
                    *failure.lock().unwrap() = Some(e);
                    Err(TensorError::Shape {
                        op: "head",
                        detail: "loss failed".into(),
                    })
                }
            }
        },
        opts,
    );
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(report?)
}

/// Runs `opts.configs` random configurations of every operation in
/// [`SUITE_OPS`]. Configurations run in parallel; results are merged in
/// order.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut ops = Vec::with_capacity(SUITE_OPS.len());
    for (o, op) in SUITE_OPS.iter().enumerate() {
        let reports = (0..opts.configs)
            .into_par_iter()
            .map(|i| {
                check_config(
                    op,
                    opts.seed.wrapping_mul(1_000_003) ^ ((o as u64) << 32 | i as u64),
                    &opts.check,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        ops.push(OpSummary {
            op: op.to_string(),
            configs: reports.len(),
            passed: reports.iter().filter(|r| r.passed).count(),
            max_rel_err: reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max),
            checked: reports
                .iter()
                .flat_map(|r| &r.inputs)
                .map(|i| i.checked)
                .sum(),
            skipped_kinks: reports
                .iter()
                .flat_map(|r| &r.inputs)
                .map(|i| i.skipped_kinks)
                .sum(),
        });
    }
    Ok(SuiteReport { ops })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_suite(&SuiteOptions {
            configs: 3,
            ..SuiteOptions::default()
        })
        .unwrap();
        assert_eq!(report.ops.len(), SUITE_OPS.len());
        assert!(report.passed(), "{report:#?}");
        assert!(report.ops.iter().all(|o| o.checked > 0), "{report:#?}");
    }
}
