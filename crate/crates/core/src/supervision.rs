//! Loss terms, Gaussian heatmap targets and per-scene target construction.

use serde::{Deserialize, Serialize};

use crate::assignment::{
    assign_coarse_targets, cell_center, decode_cell, label_candidates, CentroidMode, Collision,
    LabelKind, LevelConfig,
};
use crate::domain::Pose;
use crate::error::{Error, Result};
use crate::oks::OksParams;
use crate::tensor::{FocalLabel, Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaUnit {
    /// Standard deviation in feature-grid cells of each level.
    Cells,
    /// Standard deviation in image pixels, identical at every level.
    Pixels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSigma {
    pub value: f64,
    pub unit: SigmaUnit,
}

impl Default for HeatmapSigma {
    fn default() -> Self {
        HeatmapSigma {
            value: 2.0,
            unit: SigmaUnit::Cells,
        }
    }
}

/// Per-level `K x H_l x W_l` Gaussian joint maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapTarget {
    pub maps: Vec<Tensor>,
}

/// Joint channel `i` at cell `(r, c)` holds the maximum over instances of
/// `exp(-d^2 / (2 sigma^2))`, `d` being the distance from the cell center to
/// joint `i`, measured in the unit of `sigma`.
pub fn gaussian_target_maps(
    gt: &[Pose],
    grids: &[(usize, usize)],
    strides: &[usize],
    sigma: HeatmapSigma,
) -> Result<HeatmapTarget> {
    if !(sigma.value > 0.0) {
        return Err(Error::Config("heatmap sigma must be positive".into()));
    }
    if grids.len() != strides.len() {
        return Err(Error::Config("grids and strides differ in length".into()));
    }
    let k = gt.first().map_or(0, Pose::num_joints);
    let maps = grids
        .iter()
        .zip(strides)
        .map(|(&(h, w), &stride)| {
            let unit = match sigma.unit {
                SigmaUnit::Cells => stride as f64,
                SigmaUnit::Pixels => 1.0,
            };
            let denom = 2.0 * sigma.value * sigma.value;
            let mut map = Tensor::zeros(&[k, h, w]);
            for pose in gt {
                for (i, kp) in pose.keypoints.iter().enumerate() {
                    if !kp.counts() {
                        continue;
                    }
                    for r in 0..h {
                        for c in 0..w {
                            let (cx, cy) = cell_center(r, c, stride);
                            let (dx, dy) = ((cx - kp.x) / unit, (cy - kp.y) / unit);
                            let v = (-(dx * dx + dy * dy) / denom).exp();
                            if v > map.at3(i, r, c) {
                                map.set3(i, r, c, v);
                            }
                        }
                    }
                }
            }
            map
        })
        .collect();
    Ok(HeatmapTarget { maps })
}

/// `sum(mask * (pred - target)^2) / max(1, sum(mask))`.
pub fn l2_loss(
    graph: &mut Graph,
    pred: Var,
    target: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Var, TensorError> {
    graph.l2_loss(&[(pred, target, mask)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

pub fn focal_label(kind: LabelKind) -> FocalLabel {
    match kind {
        LabelKind::Positive(_) => FocalLabel::Positive,
        LabelKind::Negative => FocalLabel::Negative,
        LabelKind::Ignore => FocalLabel::Ignore,
    }
}

/// Sigmoid focal loss over per-candidate logits, normalised by the number of
/// positives (at least one).
pub fn focal_loss(
    graph: &mut Graph,
    logits: Var,
    labels: &[FocalLabel],
    params: FocalParams,
) -> Result<Var, TensorError> {
    graph.focal_loss(&[(logits, labels)], params.alpha, params.gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub coarse: f64,
    pub refine: f64,
    pub focal: f64,
    pub heatmap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            coarse: 1.0,
            refine: 1.0,
            focal: 1.0,
            heatmap: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.coarse, self.refine, self.focal, self.heatmap]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub coarse_l2: f64,
    pub refine_l2: f64,
    pub focal: f64,
    pub heatmap_l2: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 4] {
        [self.coarse_l2, self.refine_l2, self.focal, self.heatmap_l2]
    }

    /// Element-wise mean of several reports sharing the same weights.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport {
            weights: reports.first().map(|r| r.weights).unwrap_or_default(),
            ..LossReport::default()
        };
        for r in reports {
            out.coarse_l2 += r.coarse_l2 / n;
            out.refine_l2 += r.refine_l2 / n;
            out.focal += r.focal / n;
            out.heatmap_l2 += r.heatmap_l2 / n;
            out.total += r.total / n;
        }
        out
    }
}

/// Inputs of the four loss terms, each pooled over pyramid levels.
#[derive(Default)]
pub struct LossTerms<'a> {
    pub coarse: Vec<(Var, &'a Tensor, Option<&'a Tensor>)>,
    /// Refinement predictions against the residual `GT - coarse`.
    pub refine: Vec<(Var, &'a Tensor, Option<&'a Tensor>)>,
    pub scores: Vec<(Var, &'a [FocalLabel])>,
    /// Empty when intermediate supervision is off.
    pub heatmaps: Vec<(Var, &'a Tensor, Option<&'a Tensor>)>,
}

/// Records the weighted sum of the four terms on `graph`.
pub fn total_loss(
    graph: &mut Graph,
    terms: &LossTerms<'_>,
    weights: LossWeights,
    focal: FocalParams,
) -> Result<(Var, LossReport), TensorError> {
    let coarse = graph.l2_loss(&terms.coarse)?;
    let refine = graph.l2_loss(&terms.refine)?;
    let fl = graph.focal_loss(&terms.scores, focal.alpha, focal.gamma)?;
    let heat = graph.l2_loss(&terms.heatmaps)?;
    let total = graph.weighted_sum(&[
        (coarse, weights.coarse),
        (refine, weights.refine),
        (fl, weights.focal),
        (heat, weights.heatmap),
    ])?;
    let report = LossReport {
        coarse_l2: graph.value(coarse).item(),
        refine_l2: graph.value(refine).item(),
        focal: graph.value(fl).item(),
        heatmap_l2: graph.value(heat).item(),
        total: graph.value(total).item(),
        weights,
    };
    Ok((total, report))
}

/// Settings for turning ground truth into dense per-level targets.
#[derive(Clone, Debug)]
pub struct TargetConfig {
    pub levels: LevelConfig,
    pub centroid: CentroidMode,
    pub oks: OksParams,
    /// `None` disables the heatmap targets.
    pub heatmap_sigma: Option<HeatmapSigma>,
}

/// Dense targets of one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    /// `2K x H x W`; nonzero only at assigned cells.
    pub coarse: Tensor,
    pub coarse_mask: Tensor,
    /// Residual `GT - coarse` at regression-active cells.
    pub refine: Tensor,
    pub refine_mask: Tensor,
    /// Row-major per-cell classification labels.
    pub labels: Vec<FocalLabel>,
    pub heatmap: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct SceneTargets {
    pub levels: Vec<LevelTargets>,
    pub collisions: Vec<Collision>,
    pub positives: usize,
    pub regression_active: usize,
}

/// Builds every target of a scene from the current coarse predictions
/// (`2K x H_l x W_l` per level, treated as constants).
pub fn build_targets(
    gt: &[Pose],
    coarse_pred: &[&Tensor],
    cfg: &TargetConfig,
) -> Result<SceneTargets> {
    let strides = &cfg.levels.strides;
    if coarse_pred.len() != strides.len() {
        return Err(Error::Config(format!(
            "{} coarse maps for {} levels",
            coarse_pred.len(),
            strides.len()
        )));
    }
    let grids: Vec<(usize, usize)> = coarse_pred
        .iter()
        .map(|t| (t.shape()[1], t.shape()[2]))
        .collect();
    let k2 = coarse_pred[0].shape()[0];
    let assignment = assign_coarse_targets(gt, &cfg.levels, &grids, cfg.centroid)?;
    let heat = match cfg.heatmap_sigma {
        Some(sigma) => Some(gaussian_target_maps(gt, &grids, strides, sigma)?.maps),
        None => None,
    };

    let mut levels = Vec::with_capacity(grids.len());
    let (mut positives, mut regression_active) = (0, 0);
    for (l, &(h, w)) in grids.iter().enumerate() {
        let stride = strides[l];
        let pred = coarse_pred[l];
        let mut coarse = Tensor::zeros(&[k2, h, w]);
        let mut coarse_mask = Tensor::zeros(&[k2, h, w]);
        for t in assignment.targets.iter().filter(|t| t.level == l) {
            let (r, c) = t.cell;
            for (i, &m) in t.joint_mask.iter().enumerate() {
                if m {
                    for a in 0..2 {
                        coarse.set3(2 * i + a, r, c, t.target_offsets[2 * i + a]);
                        coarse_mask.set3(2 * i + a, r, c, 1.0);
                    }
                }
            }
        }

        let candidates: Vec<Pose> = (0..h * w)
            .map(|idx| decode_cell(pred, None, idx / w, idx % w, stride))
            .collect();
        let cand_labels = label_candidates(&candidates, gt, &cfg.oks)?;
        let mut refine = Tensor::zeros(&[k2, h, w]);
        let mut refine_mask = Tensor::zeros(&[k2, h, w]);
        let mut labels = Vec::with_capacity(h * w);
        for (idx, label) in cand_labels.iter().enumerate() {
            labels.push(focal_label(label.kind));
            if let Some(j) = label.gt_index() {
                positives += 1;
                if !label.regression_active {
                    continue;
                }
                regression_active += 1;
                let (r, c) = (idx / w, idx % w);
                let (px, py) = cell_center(r, c, stride);
                let s = stride as f64;
                for (i, kp) in gt[j].keypoints.iter().enumerate() {
                    if !kp.counts() {
                        continue;
                    }
                    let gx = (kp.x - px) / s - pred.at3(2 * i, r, c);
                    let gy = (kp.y - py) / s - pred.at3(2 * i + 1, r, c);
                    refine.set3(2 * i, r, c, gx);
                    refine.set3(2 * i + 1, r, c, gy);
                    refine_mask.set3(2 * i, r, c, 1.0);
                    refine_mask.set3(2 * i + 1, r, c, 1.0);
                }
            }
        }
        levels.push(LevelTargets {
            coarse,
            coarse_mask,
            refine,
            refine_mask,
            labels,
            heatmap: heat.as_ref().map(|m| m[l].clone()),
        });
    }
    Ok(SceneTargets {
        levels,
        collisions: assignment.collisions,
        positives,
        regression_active,
    })
}
