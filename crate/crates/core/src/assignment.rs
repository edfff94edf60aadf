//! Training-target assignment.
//!
//! Each ground-truth pose is routed to one pyramid level by size and to the
//! cell nearest its centroid there; that cell learns the coarse offsets.
//! Every candidate is then labelled by the best OKS of its decoded coarse
//! pose against the ground truth.

use serde::{Deserialize, Serialize};

use crate::domain::{keypoint_bbox, Keypoint, Pose};
use crate::error::{Error, Result};
use crate::oks::{oks, OksParams};
use crate::tensor::Tensor;

/// Candidates whose best OKS exceeds this are positives.
pub const POSITIVE_OKS: f64 = 0.6;
/// Candidates whose best OKS is below this are negatives.
pub const NEGATIVE_OKS: f64 = 0.5;
/// Candidates whose best OKS exceeds this train the refinement head.
pub const REGRESSION_OKS: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    /// Per-level downsampling factors, strictly increasing.
    pub strides: Vec<usize>,
    /// Object side (pixels) that maps to the first level.
    pub base_scale: f64,
}

impl Default for LevelConfig {
    fn default() -> Self {
        LevelConfig {
            strides: vec![4, 8, 16],
            base_scale: 32.0,
        }
    }
}

impl LevelConfig {
    pub fn level_count(&self) -> usize {
        self.strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(Error::Config(
                "strides must be non-empty and positive".into(),
            ));
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("strides must be strictly increasing".into()));
        }
        if !(self.base_scale > 0.0) {
            return Err(Error::Config("base_scale must be positive".into()));
        }
        Ok(())
    }

    /// Feature grid `(H_l, W_l)` of each level for an `H x W` image.
    pub fn grids(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|&s| (height / s, width / s))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidMode {
    /// Mean of the visible keypoints.
    Keypoints,
    /// Center of the visible-keypoint box.
    Bbox,
}

pub fn pose_centroid(pose: &Pose, mode: CentroidMode) -> Result<(f64, f64)> {
    match mode {
        CentroidMode::Keypoints => {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for k in pose.visible() {
                sx += k.x;
                sy += k.y;
                n += 1;
            }
            if n == 0 {
                return Err(Error::InvalidPose("no visible keypoints".into()));
            }
            Ok((sx / n as f64, sy / n as f64))
        }
        CentroidMode::Bbox => Ok(keypoint_bbox(pose)?.center()),
    }
}

/// `clamp(floor(log2(max(1, sqrt(box area)) / base_scale)), 0, L - 1)`.
pub fn assign_fpn_level(pose: &Pose, cfg: &LevelConfig) -> Result<usize> {
    let side = keypoint_bbox(pose)?.area().sqrt().max(1.0);
    let raw = (side / cfg.base_scale).log2().floor();
    let top = cfg.level_count().saturating_sub(1) as f64;
    Ok(raw.clamp(0.0, top) as usize)
}

/// Pixel center of cell `(row, col)` at `stride`.
pub fn cell_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    (
        (col as f64 + 0.5) * stride as f64,
        (row as f64 + 0.5) * stride as f64,
    )
}

/// Index of the cell center nearest to `coord` along one axis; ties go to
/// the smaller index.
fn nearest_cell(coord: f64, stride: usize, len: usize) -> usize {
    let v = coord / stride as f64 - 0.5;
    let idx = (v - 0.5).ceil();
    idx.clamp(0.0, (len.max(1) - 1) as f64) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseTarget {
    pub level: usize,
    /// `(row, col)` on the level grid.
    pub cell: (usize, usize),
    pub gt_index: usize,
    /// `2K` values `(dx_0, dy_0, dx_1, ...)` in cells of this level.
    pub target_offsets: Vec<f64>,
    /// Per-joint loss mask: joints absent in the ground truth are excluded.
    pub joint_mask: Vec<bool>,
}

/// A ground-truth pose displaced by a later one landing on the same cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Collision {
    pub level: usize,
    pub cell: (usize, usize),
    pub dropped_gt: usize,
    pub kept_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CoarseAssignment {
    pub targets: Vec<CoarseTarget>,
    pub collisions: Vec<Collision>,
}

/// Routes each ground-truth pose with a visible keypoint to one cell.
pub fn assign_coarse_targets(
    gt: &[Pose],
    cfg: &LevelConfig,
    grids: &[(usize, usize)],
    mode: CentroidMode,
) -> Result<CoarseAssignment> {
    if grids.len() != cfg.level_count() {
        return Err(Error::Config(format!(
            "{} grids for {} levels",
            grids.len(),
            cfg.level_count()
        )));
    }
    let mut out = CoarseAssignment::default();
    for (gt_index, pose) in gt.iter().enumerate() {
        if pose.num_visible() == 0 {
            continue;
        }
        let level = assign_fpn_level(pose, cfg)?;
        let stride = cfg.strides[level];
        let (h, w) = grids[level];
        let (cx, cy) = pose_centroid(pose, mode)?;
        let cell = (nearest_cell(cy, stride, h), nearest_cell(cx, stride, w));
        let (px, py) = cell_center(cell.0, cell.1, stride);
        let s = stride as f64;
        let mut target_offsets = Vec::with_capacity(2 * pose.num_joints());
        let mut joint_mask = Vec::with_capacity(pose.num_joints());
        for k in &pose.keypoints {
            if k.counts() {
                target_offsets.push((k.x - px) / s);
                target_offsets.push((k.y - py) / s);
            } else {
                target_offsets.extend([0.0, 0.0]);
            }
            joint_mask.push(k.counts());
        }
        if let Some(pos) = out
            .targets
            .iter()
            .position(|t| t.level == level && t.cell == cell)
        {
            let dropped = out.targets.remove(pos);
            out.collisions.push(Collision {
                level,
                cell,
                dropped_gt: dropped.gt_index,
                kept_gt: gt_index,
            });
        }
        out.targets.push(CoarseTarget {
            level,
            cell,
            gt_index,
            target_offsets,
            joint_mask,
        });
    }
    Ok(out)
}

/// Recovers pixel keypoints from a target's offsets and its cell center.
pub fn decode_target(target: &CoarseTarget, stride: usize) -> Pose {
    let (px, py) = cell_center(target.cell.0, target.cell.1, stride);
    let s = stride as f64;
    Pose::new(
        target
            .target_offsets
            .chunks_exact(2)
            .zip(&target.joint_mask)
            .map(|(d, &m)| Keypoint::new(px + s * d[0], py + s * d[1], if m { 2 } else { 0 }))
            .collect(),
    )
}

/// Pose predicted at cell `(row, col)`: `center + stride * (coarse + refine)`
/// per joint, where `coarse` and `refine` are `2K x H x W` offset maps in
/// cells. Every decoded joint is marked visible.
pub fn decode_cell(
    coarse: &Tensor,
    refine: Option<&Tensor>,
    row: usize,
    col: usize,
    stride: usize,
) -> Pose {
    let k = coarse.shape()[0] / 2;
    let (px, py) = cell_center(row, col, stride);
    let s = stride as f64;
    let at = |c: usize| coarse.at3(c, row, col) + refine.map_or(0.0, |r| r.at3(c, row, col));
    Pose::new(
        (0..k)
            .map(|i| Keypoint::new(px + s * at(2 * i), py + s * at(2 * i + 1), 2))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateLabel {
    pub kind: LabelKind,
    /// The candidate trains the refinement toward `gt[kind]`; implies positive.
    pub regression_active: bool,
    pub best_oks: f64,
}

impl CandidateLabel {
    pub fn gt_index(&self) -> Option<usize> {
        match self.kind {
            LabelKind::Positive(j) => Some(j),
            _ => None,
        }
    }
}

/// Labels each candidate by its best OKS against the ground truth: positive
/// above 0.6, negative below 0.5, ignored in between; regression above 0.7.
pub fn label_candidates(
    candidates: &[Pose],
    gt: &[Pose],
    params: &OksParams,
) -> Result<Vec<CandidateLabel>> {
    candidates
        .iter()
        .map(|cand| {
            let mut best = 0.0;
            let mut arg = None;
            for (j, g) in gt.iter().enumerate() {
                if g.num_visible() == 0 {
                    continue;
                }
                let v = oks(cand, g, params)?;
                if arg.is_none() || v > best {
                    best = v;
                    arg = Some(j);
                }
            }
            let kind = match arg {
                Some(j) if best > POSITIVE_OKS => LabelKind::Positive(j),
                _ if best < NEGATIVE_OKS => LabelKind::Negative,
                None => LabelKind::Negative,
                _ => LabelKind::Ignore,
            };
            Ok(CandidateLabel {
                kind,
                regression_active: matches!(kind, LabelKind::Positive(_)) && best > REGRESSION_OKS,
                best_oks: best,
            })
        })
        .collect()
}
