//! Greedy non-maximum suppression over pose detections.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::domain::{keypoint_bbox, BBox, Pose};
use crate::oks::{oks, OksParams};

pub const DEFAULT_OKS_THRESHOLD: f64 = 0.3;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MAX_KEEP: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub pose: Pose,
    pub score: f64,
    /// Pyramid level the candidate came from.
    pub level: usize,
}

impl Detection {
    pub fn new(pose: Pose, score: f64, level: usize) -> Self {
        Detection { pose, score, level }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsKind {
    Oks,
    Iou,
}

impl NmsKind {
    pub fn default_threshold(self) -> f64 {
        match self {
            NmsKind::Oks => DEFAULT_OKS_THRESHOLD,
            NmsKind::Iou => DEFAULT_IOU_THRESHOLD,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NmsKind::Oks => "oks",
            NmsKind::Iou => "iou",
        }
    }
}

/// Pairwise overlap measure used for suppression.
#[derive(Clone, Copy, Debug)]
pub enum Similarity<'a> {
    /// OKS with the higher-scored detection as reference (ties: the first).
    Oks(&'a OksParams),
    /// IoU of the visible-keypoint boxes.
    Iou,
}

impl<'a> Similarity<'a> {
    pub fn new(kind: NmsKind, params: &'a OksParams) -> Self {
        match kind {
            NmsKind::Oks => Similarity::Oks(params),
            NmsKind::Iou => Similarity::Iou,
        }
    }

    /// Similarity of two detections. Poses without visible keypoints are
    /// dissimilar to everything.
    pub fn between(&self, a: &Detection, b: &Detection) -> f64 {
        match self {
            Similarity::Oks(params) => {
                let (reference, other) = if b.score > a.score { (b, a) } else { (a, b) };
                oks(&other.pose, &reference.pose, params).unwrap_or(0.0)
            }
            Similarity::Iou => match (keypoint_bbox(&a.pose), keypoint_bbox(&b.pose)) {
                (Ok(x), Ok(y)) => box_iou(&x, &y),
                _ => 0.0,
            },
        }
    }
}

/// Intersection over union; zero when the union is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn by_score_desc(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable: equal scores keep input order.
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Input indices of the detections kept by greedy suppression, in the order
/// they were kept.
pub fn greedy_nms_indices(
    dets: &[Detection],
    similarity: Similarity<'_>,
    threshold: f64,
    max_keep: usize,
) -> Vec<usize> {
    let order = by_score_desc(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if keep.len() >= max_keep {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && similarity.between(&dets[i], &dets[j]) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Keeps the highest-scored detection, drops every remaining detection more
/// similar to it than `threshold`, and repeats.
pub fn greedy_nms(
    dets: &[Detection],
    similarity: Similarity<'_>,
    threshold: f64,
    max_keep: usize,
) -> Vec<Detection> {
    greedy_nms_indices(dets, similarity, threshold, max_keep)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Quadratic re-derivation of [`greedy_nms_indices`] for cross-checking:
/// repeatedly selects the best remaining detection by linear scan and
/// filters the pool, without sorting.
pub fn nms_naive_oracle(
    dets: &[Detection],
    similarity: Similarity<'_>,
    threshold: f64,
    max_keep: usize,
) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !pool.is_empty() && kept.len() < max_keep {
        let mut best = 0;
        for p in 1..pool.len() {
            if dets[pool[p]].score > dets[pool[best]].score {
                best = p;
            }
        }
        let winner = pool.remove(best);
        kept.push(winner);
        pool.retain(|&j| similarity.between(&dets[winner], &dets[j]) <= threshold);
    }
    kept
}
