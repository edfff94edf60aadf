//! Synthetic stick-figure scenes, the Adam optimizer and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{CentroidMode, LevelConfig};
use crate::domain::{keypoint_bbox, Keypoint, Pose, Scene, SkeletonSpec};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, LevelVars, Model};
use crate::nms::box_iou;
use crate::oks::OksParams;
use crate::supervision::{
    build_targets, total_loss, FocalParams, HeatmapSigma, LossReport, LossTerms, LossWeights,
    SceneTargets, TargetConfig,
};
use crate::tensor::{Graph, Tensor, Var};

/// Resamples allowed per scene before an overlap target is declared
/// unsatisfiable.
pub const MAX_RESAMPLES: usize = 1000;
/// Accepted deviation of a scene's crowd index from the overlap target.
pub const OVERLAP_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_joints: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Inclusive range of persons per scene.
    pub persons: (usize, usize),
    /// Side of the template square in pixels, `[lo, hi)`.
    pub scale: (f64, f64),
    /// Rotations are drawn from `[-rotation, rotation]` radians.
    pub rotation: f64,
    /// Desired mean pairwise box IoU per scene; 0 disables the constraint.
    pub overlap_target: f64,
    pub count: usize,
    pub seed: u64,
    /// Standard deviation of the joint blobs in pixels.
    pub blob_sigma: f64,
    /// Peak intensity of the limb lines; 0 draws no limbs.
    pub limb_intensity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_joints: 5,
            height: 64,
            width: 64,
            channels: 3,
            persons: (1, 3),
            scale: (24.0, 40.0),
            rotation: 0.35,
            overlap_target: 0.0,
            count: 256,
            seed: 0,
            blob_sigma: 1.5,
            limb_intensity: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_joints == 0 || self.channels == 0 {
            return bad("num_joints and channels must be positive".into());
        }
        if self.persons.0 == 0 || self.persons.0 > self.persons.1 {
            return bad(format!("invalid persons range {:?}", self.persons));
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1) {
            return bad(format!("invalid scale range {:?}", self.scale));
        }
        if self.scale.1 >= self.height.min(self.width) as f64 {
            return bad("scale range exceeds the image size".into());
        }
        if !(self.rotation >= 0.0) {
            return bad("rotation must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.overlap_target) {
            return bad("overlap_target must lie in [0, 1)".into());
        }
        if !(self.blob_sigma > 0.0) || !(self.limb_intensity >= 0.0) {
            return bad("blob_sigma must be positive and limb_intensity non-negative".into());
        }
        Ok(())
    }
}

/// Mean pairwise IoU of the visible-keypoint boxes; 0 with fewer than two
/// poses.
pub fn crowd_index(poses: &[Pose]) -> f64 {
    let boxes: Vec<_> = poses.iter().filter_map(|p| keypoint_bbox(p).ok()).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            sum += box_iou(&boxes[i], &boxes[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Channel intensities identifying joint `i`.
pub fn joint_color(i: usize, channels: usize) -> Vec<f64> {
    let codes = (1usize << channels.min(16)) - 1;
    let code = i % codes + 1;
    let level = if (i / codes).is_multiple_of(2) {
        1.0
    } else {
        0.5
    };
    (0..channels)
        .map(|c| if code >> c & 1 == 1 { level } else { 0.0 })
        .collect()
}

fn person_points(
    template: &[(f64, f64)],
    scale: f64,
    theta: f64,
    center: (f64, f64),
) -> Vec<(f64, f64)> {
    let (s, c) = theta.sin_cos();
    template
        .iter()
        .map(|&(tx, ty)| {
            let (u, v) = ((tx - 0.5) * scale, (ty - 0.5) * scale);
            (center.0 + c * u - s * v, center.1 + s * u + c * v)
        })
        .collect()
}

/// Admissible range of the template center along one axis so that every
/// point stays inside `[0, len)` with a small margin.
fn center_range(offsets: impl Iterator<Item = f64> + Clone, len: usize) -> (f64, f64) {
    let margin = 0.5;
    let lo = offsets.clone().fold(f64::INFINITY, f64::min);
    let hi = offsets.fold(f64::NEG_INFINITY, f64::max);
    (margin - lo, len as f64 - margin - hi)
}

fn sample_persons(cfg: &SynthConfig, template: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let n = rng.random_range(cfg.persons.0..=cfg.persons.1);
    let mut poses: Vec<Pose> = Vec::with_capacity(n);
    let mut anchor = None;
    for _ in 0..n {
        let scale = if cfg.scale.0 < cfg.scale.1 {
            rng.random_range(cfg.scale.0..cfg.scale.1)
        } else {
            cfg.scale.0
        };
        let theta = if cfg.rotation > 0.0 {
            rng.random_range(-cfg.rotation..=cfg.rotation)
        } else {
            0.0
        };
        let rel = person_points(template, scale, theta, (0.0, 0.0));
        let (x_lo, x_hi) = center_range(rel.iter().map(|p| p.0), cfg.width);
        let (y_lo, y_hi) = center_range(rel.iter().map(|p| p.1), cfg.height);
        let mut pick = |lo: f64, hi: f64, near: Option<f64>| -> f64 {
            let (lo2, hi2) = match near {
                // Crowded scenes place later persons around the first one.
                Some(a) => ((a - 0.8 * scale).max(lo), (a + 0.8 * scale).min(hi)),
                None => (lo, hi),
            };
            if lo2 < hi2 {
                rng.random_range(lo2..hi2)
            } else {
                0.5 * (lo + hi)
            }
        };
        let center = match anchor {
            Some((ax, ay)) if cfg.overlap_target > 0.0 => {
                (pick(x_lo, x_hi, Some(ax)), pick(y_lo, y_hi, Some(ay)))
            }
            _ => (pick(x_lo, x_hi, None), pick(y_lo, y_hi, None)),
        };
        anchor.get_or_insert(center);
        let pts = person_points(template, scale, theta, center);
        poses.push(Pose::new(
            pts.into_iter()
                .map(|(x, y)| Keypoint::new(x, y, 2))
                .collect(),
        ));
    }
    poses
}

/// Gaussian blobs in joint colours plus faint limb lines, rounded to f32
/// precision so the scene survives the f32 dataset format unchanged.
pub fn render(cfg: &SynthConfig, skeleton: &SkeletonSpec, poses: &[Pose]) -> Tensor {
    let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
    let mut img = Tensor::zeros(&[ch, h, w]);
    let splat = |img: &mut Tensor, r: usize, c: usize, color: &[f64], v: f64| {
        for (k, &col) in color.iter().enumerate() {
            let val = col * v;
            if val > img.at3(k, r, c) {
                img.set3(k, r, c, val);
            }
        }
    };
    let window = |lo: f64, hi: f64, len: usize| {
        let a = lo.floor().max(0.0) as usize;
        let b = (hi.ceil().max(0.0) as usize).min(len);
        a..b
    };

    if cfg.limb_intensity > 0.0 {
        let white = vec![1.0; ch];
        let lw = 0.8;
        for pose in poses {
            for &(a, b) in &skeleton.edges {
                let (pa, pb) = (pose.keypoints[a], pose.keypoints[b]);
                let (dx, dy) = (pb.x - pa.x, pb.y - pa.y);
                let len2 = (dx * dx + dy * dy).max(1e-12);
                let pad = 3.0 * lw;
                for r in window(pa.y.min(pb.y) - pad, pa.y.max(pb.y) + pad, h) {
                    for c in window(pa.x.min(pb.x) - pad, pa.x.max(pb.x) + pad, w) {
                        let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                        let t = (((px - pa.x) * dx + (py - pa.y) * dy) / len2).clamp(0.0, 1.0);
                        let (ex, ey) = (px - pa.x - t * dx, py - pa.y - t * dy);
                        let v = cfg.limb_intensity * (-(ex * ex + ey * ey) / (2.0 * lw * lw)).exp();
                        splat(&mut img, r, c, &white, v);
                    }
                }
            }
        }
    }

    let sb = cfg.blob_sigma;
    for pose in poses {
        for (i, kp) in pose.keypoints.iter().enumerate() {
            if !kp.counts() {
                continue;
            }
            let color = joint_color(i, ch);
            let pad = 3.5 * sb;
            for r in window(kp.y - pad, kp.y + pad, h) {
                for c in window(kp.x - pad, kp.x + pad, w) {
                    let (ex, ey) = (c as f64 + 0.5 - kp.x, r as f64 + 0.5 - kp.y);
                    let v = (-(ex * ex + ey * ey) / (2.0 * sb * sb)).exp();
                    splat(&mut img, r, c, &color, v);
                }
            }
        }
    }
    for v in img.data_mut() {
        *v = *v as f32 as f64;
    }
    img
}

/// Generates `cfg.count` scenes. Scene `i` draws from its own stream of the
/// seeded generator, so scenes can be produced in parallel.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let skeleton = SkeletonSpec::with_joints(cfg.num_joints)?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            for _ in 0..MAX_RESAMPLES {
                let poses = sample_persons(cfg, &skeleton.template, &mut rng);
                let ci = crowd_index(&poses);
                if cfg.overlap_target == 0.0 || (ci - cfg.overlap_target).abs() <= OVERLAP_TOLERANCE
                {
                    return Ok(Scene {
                        image: render(cfg, &skeleton, &poses),
                        gt_poses: poses,
                        crowd_index: ci,
                    });
                }
            }
            Err(Error::UnsatisfiableOverlap {
                scene: i,
                attempts: MAX_RESAMPLES,
            })
        })
        .collect()
}

/// Mirrors a scene about its vertical center line; joint labels are kept.
pub fn flip_horizontal(scene: &Scene) -> Scene {
    let (c, h, w) = (scene.image.shape()[0], scene.height(), scene.width());
    let mut image = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        for r in 0..h {
            for x in 0..w {
                image.set3(k, r, x, scene.image.at3(k, r, w - 1 - x));
            }
        }
    }
    let gt_poses = scene
        .gt_poses
        .iter()
        .map(|p| {
            Pose::new(
                p.keypoints
                    .iter()
                    .map(|k| Keypoint::new(w as f64 - k.x, k.y, k.v))
                    .collect(),
            )
        })
        .collect();
    Scene {
        image,
        gt_poses,
        crowd_index: scene.crowd_index,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(weights: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every weight tensor.
pub fn adam_step(
    weights: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != state.m.len() {
        return Err(Error::Config(format!(
            "{} weights, {} gradients, {} optimizer slots",
            weights.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (w, g)) in weights.iter().zip(grads).enumerate() {
        if w.shape() != g.shape() || w.shape() != state.m[i].shape() {
            return Err(Error::Config(format!(
                "shape mismatch at slot {i}: weight {:?}, gradient {:?}",
                w.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, w) in weights.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = hp.beta1 * *mj + (1.0 - hp.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = hp.beta2 * *vj + (1.0 - hp.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, wj) in w.data_mut().iter_mut().enumerate() {
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *wj -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub loss_weights: LossWeights,
    pub focal: FocalParams,
    /// Gradients reach the bypass through the deformable layers.
    pub offset_grad: bool,
    pub centroid: CentroidMode,
    /// Box side (pixels) routed to the first pyramid level.
    pub base_scale: f64,
    pub heatmap_sigma: HeatmapSigma,
    pub shuffle: bool,
    /// Randomly mirrors training scenes.
    pub flip: bool,
    /// OKS constants for labelling; `None` uses the default skeleton of the
    /// model's joint count. Set from the run-level `oks` section.
    #[serde(skip)]
    pub oks: Option<OksParams>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            adam: AdamParams::default(),
            loss_weights: LossWeights::default(),
            focal: FocalParams::default(),
            offset_grad: true,
            centroid: CentroidMode::Keypoints,
            base_scale: 32.0,
            heatmap_sigma: HeatmapSigma::default(),
            shuffle: true,
            flip: false,
            oks: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.adam.lr >= 0.0) || !(self.adam.eps > 0.0) {
            return Err(Error::Config("lr must be >= 0 and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.base_scale > 0.0) || !(self.heatmap_sigma.value > 0.0) {
            return Err(Error::Config(
                "base_scale and heatmap sigma must be positive".into(),
            ));
        }
        if let Some(p) = &self.oks {
            p.validate()?;
        }
        Ok(())
    }

    pub fn oks_params(&self, num_joints: usize) -> Result<OksParams> {
        match &self.oks {
            Some(p) if p.sigmas.len() != num_joints => Err(Error::Config(format!(
                "{} OKS sigmas for {num_joints} joints",
                p.sigmas.len()
            ))),
            Some(p) => Ok(p.clone()),
            None => Ok(OksParams::from_skeleton(&SkeletonSpec::with_joints(
                num_joints,
            )?)),
        }
    }

    pub fn target_config(&self, model: &Model) -> Result<TargetConfig> {
        Ok(TargetConfig {
            levels: LevelConfig {
                strides: model.config.strides.clone(),
                base_scale: self.base_scale,
            },
            centroid: self.centroid,
            oks: self.oks_params(model.config.num_joints)?,
            heatmap_sigma: model
                .config
                .intermediate_supervision
                .then_some(self.heatmap_sigma),
        })
    }
}

/// Weighted head loss of a forward pass against precomputed targets.
pub fn head_loss(
    g: &mut Graph,
    levels: &[LevelVars],
    targets: &SceneTargets,
    tcfg: &TrainConfig,
) -> Result<(Var, LossReport)> {
    let mut terms = LossTerms::default();
    for (lv, t) in levels.iter().zip(&targets.levels) {
        terms
            .coarse
            .push((lv.coarse, &t.coarse, Some(&t.coarse_mask)));
        terms
            .refine
            .push((lv.refine, &t.refine, Some(&t.refine_mask)));
        terms.scores.push((lv.logits, &t.labels));
        if let (Some(hv), Some(ht)) = (lv.heatmaps, &t.heatmap) {
            terms.heatmaps.push((hv, ht, None));
        }
    }
    Ok(total_loss(g, &terms, tcfg.loss_weights, tcfg.focal)?)
}

/// Loss of one scene and, when `with_grads`, its gradient for every model
/// parameter.
pub fn scene_loss(
    model: &Model,
    scene: &Scene,
    tcfg: &TrainConfig,
    targets_cfg: &TargetConfig,
    with_grads: bool,
) -> Result<(LossReport, Option<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let params: Vec<Var> = model
        .params
        .iter()
        .map(|p| {
            if with_grads {
                g.leaf(p.value.clone())
            } else {
                g.constant(p.value.clone())
            }
        })
        .collect();
    let image = g.constant(scene.image.clone());
    let opts = ForwardOptions {
        heatmaps: model.config.intermediate_supervision,
        offset_grad: tcfg.offset_grad,
    };
    let levels = model.forward_graph(&mut g, &params, image, opts)?;
    let coarse: Vec<&Tensor> = levels.iter().map(|l| g.value(l.coarse)).collect();
    let targets = build_targets(&scene.gt_poses, &coarse, targets_cfg)?;
    let (loss, report) = head_loss(&mut g, &levels, &targets, tcfg)?;
    if !with_grads {
        return Ok((report, None));
    }
    let mut grads = g.backward(loss)?;
    let out = params
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();
    Ok((report, Some(out)))
}

/// Mean loss over `data` without updating the model.
pub fn evaluate_loss(model: &Model, data: &[Scene], tcfg: &TrainConfig) -> Result<LossReport> {
    let targets_cfg = tcfg.target_config(model)?;
    let reports = data
        .par_iter()
        .map(|s| scene_loss(model, s, tcfg, &targets_cfg, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::mean(&reports))
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    /// Row 0 is the loss of the untrained model over the whole dataset;
    /// row `e` is the mean batch loss during epoch `e`.
    pub history: Vec<LossReport>,
    pub steps: usize,
}

/// Mini-batch Adam over `data`. Scenes of a batch may be processed in
/// parallel; their gradients are summed in batch order.
pub fn train(model: Model, data: &[Scene], tcfg: &TrainConfig) -> Result<TrainOutput> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let mut model = model;
    let targets_cfg = tcfg.target_config(&model)?;
    let mut history = vec![evaluate_loss(&model, data, tcfg)?];
    let mut weights: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let mut state = AdamState::new(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;

    for epoch in 1..=tcfg.epochs {
        if tcfg.shuffle {
            order.shuffle(&mut rng);
        }
        let flips: Vec<bool> = order
            .iter()
            .map(|_| tcfg.flip && rng.random_bool(0.5))
            .collect();
        let mut reports = Vec::new();
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let start = b * tcfg.batch_size;
            let results = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    if flips[start + j] {
                        let flipped = flip_horizontal(&data[i]);
                        scene_loss(&model, &flipped, tcfg, &targets_cfg, true)
                    } else {
                        scene_loss(&model, &data[i], tcfg, &targets_cfg, true)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let n = results.len() as f64;
            let mut batch_grads: Vec<Tensor> =
                weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
            let mut batch_reports = Vec::with_capacity(results.len());
            for (report, grads) in results {
                batch_reports.push(report);
                for (acc, g) in batch_grads.iter_mut().zip(grads.into_iter().flatten()) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v / n;
                    }
                }
            }
            let report = LossReport::mean(&batch_reports);
            if !report.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: report.total,
                });
            }
            adam_step(&mut weights, &batch_grads, &mut state, &tcfg.adam)?;
            for (p, w) in model.params.iter_mut().zip(&weights) {
                p.value.clone_from(w);
            }
            reports.push(report);
            steps += 1;
        }
        history.push(LossReport::mean(&reports));
    }
    Ok(TrainOutput {
        model,
        history,
        steps,
    })
}

pub const HISTORY_CSV_HEADER: &str = "epoch,coarse_l2,refine_l2,focal,heatmap_l2,total";

pub fn history_csv(history: &[LossReport]) -> String {
    let mut s = String::from(HISTORY_CSV_HEADER);
    s.push('\n');
    for (e, r) in history.iter().enumerate() {
        let _ = writeln!(
            s,
            "{e},{},{},{},{},{}",
            r.coarse_l2, r.refine_l2, r.focal, r.heatmap_l2, r.total
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, HeadConfig};

    fn tiny_synth(count: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            height: 32,
            width: 32,
            scale: (16.0, 24.0),
            count,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = tiny_synth(6, 5);
        let a = synth_dataset(&cfg).unwrap();
        assert_eq!(a, synth_dataset(&cfg).unwrap());
        assert_ne!(a, synth_dataset(&tiny_synth(6, 6)).unwrap());
    }

    #[test]
    fn synth_scenes_are_valid() {
        let cfg = SynthConfig {
            count: 20,
            ..SynthConfig::default()
        };
        let skeleton = SkeletonSpec::with_joints(5).unwrap();
        for s in synth_dataset(&cfg).unwrap() {
            assert!((1..=3).contains(&s.gt_poses.len()));
            assert_eq!(s.image.shape(), [3, 64, 64]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((0.0..=1.0).contains(&s.crowd_index));
            for p in &s.gt_poses {
                crate::domain::validate_pose(p, &skeleton, (64.0, 64.0)).unwrap();
            }
        }
    }

    #[test]
    fn single_person_has_zero_crowd_index() {
        let cfg = SynthConfig {
            persons: (1, 1),
            count: 3,
            ..SynthConfig::default()
        };
        for s in synth_dataset(&cfg).unwrap() {
            assert_eq!(s.crowd_index, 0.0);
        }
    }

    #[test]
    fn overlap_target_is_met() {
        let cfg = SynthConfig {
            persons: (3, 3),
            overlap_target: 0.3,
            count: 16,
            seed: 42,
            ..SynthConfig::default()
        };
        for s in synth_dataset(&cfg).unwrap() {
            assert!((0.25..=0.35).contains(&s.crowd_index), "{}", s.crowd_index);
            assert!((crowd_index(&s.gt_poses) - s.crowd_index).abs() < 1e-15);
        }
        let impossible = SynthConfig {
            persons: (1, 1),
            overlap_target: 0.3,
            count: 2,
            ..SynthConfig::default()
        };
        assert!(matches!(
            synth_dataset(&impossible),
            Err(Error::UnsatisfiableOverlap { scene: 0, .. })
        ));
    }

    #[test]
    fn joint_colors_are_distinct() {
        let colors: Vec<_> = (0..14).map(|i| joint_color(i, 3)).collect();
        for i in 0..14 {
            for j in 0..i {
                assert_ne!(colors[i], colors[j]);
            }
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let s = &synth_dataset(&tiny_synth(1, 2)).unwrap()[0];
        let f = flip_horizontal(s);
        assert_ne!(&f, s);
        let back = flip_horizontal(&f);
        assert_eq!(back.image, s.image);
        for (p, q) in back.gt_poses.iter().zip(&s.gt_poses) {
            for (a, b) in p.keypoints.iter().zip(&q.keypoints) {
                assert!((a.x - b.x).abs() < 1e-12 && a.y == b.y);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_weights() {
        let mut w = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut st = AdamState::new(&w);
        adam_step(
            &mut w,
            &[Tensor::zeros(&[2])],
            &mut st,
            &AdamParams::default(),
        )
        .unwrap();
        assert_eq!(w[0].data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
        assert!(adam_step(
            &mut w,
            &[Tensor::zeros(&[3])],
            &mut st,
            &AdamParams::default()
        )
        .is_err());
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let hp = AdamParams::default();
        let mut w = vec![Tensor::from_vec(vec![0.0])];
        let mut st = AdamState::new(&w);
        let g = [Tensor::from_vec(vec![0.3])];
        let mut prev = 0.0;
        for _ in 0..500 {
            adam_step(&mut w, &g, &mut st, &hp).unwrap();
            let step = prev - w[0].data()[0];
            assert!((step - hp.lr).abs() < 1e-6 * hp.lr * 10.0);
            prev = w[0].data()[0];
        }
    }

    #[test]
    fn adam_three_hand_steps() {
        let hp = AdamParams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut w = vec![Tensor::from_vec(vec![1.0])];
        let mut st = AdamState::new(&w);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in [0.5, -1.0, 2.0].into_iter().enumerate() {
            adam_step(&mut w, &[Tensor::from_vec(vec![g])], &mut st, &hp).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = (t + 1) as i32;
            x -=
                0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((w[0].data()[0] - x).abs() <= 1e-12);
        }
    }

    fn tiny_head() -> HeadConfig {
        HeadConfig {
            channels: 6,
            embed_channels: 6,
            ..HeadConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_weights_and_runs_are_reproducible() {
        let data = synth_dataset(&tiny_synth(3, 1)).unwrap();
        let model = build_model(&tiny_head(), 0).unwrap();
        let mut tcfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        tcfg.adam.lr = 0.0;
        let out = train(model.clone(), &data, &tcfg).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.steps, 4);
        assert_eq!(out.history.len(), 3);

        tcfg.adam.lr = 1e-3;
        tcfg.flip = true;
        let a = train(model.clone(), &data, &tcfg).unwrap();
        let b = train(model, &data, &tcfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert!(a.history.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn history_csv_layout() {
        let r = LossReport {
            coarse_l2: 1.5,
            refine_l2: 0.0,
            focal: 0.25,
            heatmap_l2: 2.0,
            total: 3.75,
            weights: LossWeights::default(),
        };
        assert_eq!(
            history_csv(&[r]),
            "epoch,coarse_l2,refine_l2,focal,heatmap_l2,total\n0,1.5,0,0.25,2,3.75\n"
        );
    }
}
