//! Shared vocabulary: skeletons, keypoints, poses, boxes and scenes.
//!
//! Visibility follows the COCO three-state convention: `0` absent,
//! `1` labeled but occluded, `2` visible. Every metric treats `v > 0` as a
//! keypoint that counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-joint falloff used when no skeleton-specific constants exist.
pub const DEFAULT_UNIFORM_SIGMA: f64 = 0.079;

/// COCO `kpt_oks_sigmas`. The OKS kernel in [`crate::oks`] consumes the
/// effective falloff, which for COCO is twice these values.
pub const COCO_KPT_OKS_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

const COCO_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

const COCO_TEMPLATE: [(f64, f64); 17] = [
    (0.50, 0.10),
    (0.53, 0.07),
    (0.47, 0.07),
    (0.57, 0.09),
    (0.43, 0.09),
    (0.65, 0.25),
    (0.35, 0.25),
    (0.75, 0.42),
    (0.25, 0.42),
    (0.80, 0.58),
    (0.20, 0.58),
    (0.60, 0.58),
    (0.40, 0.58),
    (0.62, 0.78),
    (0.38, 0.78),
    (0.63, 0.97),
    (0.37, 0.97),
];

const COCO_EDGES: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

const CROWDPOSE_NAMES: [&str; 14] = [
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "head",
    "neck",
];

const CROWDPOSE_TEMPLATE: [(f64, f64); 14] = [
    (0.65, 0.25),
    (0.35, 0.25),
    (0.75, 0.42),
    (0.25, 0.42),
    (0.80, 0.58),
    (0.20, 0.58),
    (0.60, 0.58),
    (0.40, 0.58),
    (0.62, 0.78),
    (0.38, 0.78),
    (0.63, 0.97),
    (0.37, 0.97),
    (0.50, 0.05),
    (0.50, 0.18),
];

const CROWDPOSE_EDGES: [(usize, usize); 13] = [
    (12, 13),
    (13, 0),
    (13, 1),
    (0, 2),
    (2, 4),
    (1, 3),
    (3, 5),
    (0, 6),
    (1, 7),
    (6, 8),
    (8, 10),
    (7, 9),
    (9, 11),
];

const STAR_NAMES: [&str; 5] = ["head", "left_hand", "right_hand", "left_foot", "right_foot"];
const STAR_TEMPLATE: [(f64, f64); 5] = [
    (0.50, 0.05),
    (0.08, 0.42),
    (0.92, 0.42),
    (0.28, 0.95),
    (0.72, 0.95),
];
const STAR_EDGES: [(usize, usize); 4] = [(0, 1), (0, 2), (0, 3), (0, 4)];

/// Joint layout of a skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    /// Effective per-joint OKS falloff constants.
    pub sigmas: Vec<f64>,
    /// Canonical joint layout in the unit square, used by the scene generator.
    pub template: Vec<(f64, f64)>,
    /// Limb connections (0-based joint indices).
    #[serde(default)]
    pub edges: Vec<(usize, usize)>,
}

impl SkeletonSpec {
    pub fn new(
        joint_names: Vec<String>,
        sigmas: Vec<f64>,
        template: Vec<(f64, f64)>,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let spec = SkeletonSpec {
            joint_names,
            sigmas,
            template,
            edges,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 17-joint COCO person skeleton.
    pub fn coco17() -> Self {
        SkeletonSpec {
            joint_names: COCO_NAMES.iter().map(|s| s.to_string()).collect(),
            sigmas: COCO_KPT_OKS_SIGMAS.iter().map(|s| 2.0 * s).collect(),
            template: COCO_TEMPLATE.to_vec(),
            edges: COCO_EDGES.to_vec(),
        }
    }

    /// The 14-joint CrowdPose skeleton.
    pub fn crowdpose14() -> Self {
        SkeletonSpec {
            joint_names: CROWDPOSE_NAMES.iter().map(|s| s.to_string()).collect(),
            sigmas: vec![DEFAULT_UNIFORM_SIGMA; 14],
            template: CROWDPOSE_TEMPLATE.to_vec(),
            edges: CROWDPOSE_EDGES.to_vec(),
        }
    }

    /// A skeleton with `k` joints: COCO for 17, CrowdPose for 14, a five-point
    /// star figure for 5, and joints on an ellipse otherwise.
    pub fn with_joints(k: usize) -> Result<Self> {
        match k {
            0 => Err(Error::Config("skeleton needs at least one joint".into())),
            17 => Ok(Self::coco17()),
            14 => Ok(Self::crowdpose14()),
            5 => Ok(SkeletonSpec {
                joint_names: STAR_NAMES.iter().map(|s| s.to_string()).collect(),
                sigmas: vec![DEFAULT_UNIFORM_SIGMA; 5],
                template: STAR_TEMPLATE.to_vec(),
                edges: STAR_EDGES.to_vec(),
            }),
            1 => Ok(SkeletonSpec {
                joint_names: vec!["joint_0".into()],
                sigmas: vec![DEFAULT_UNIFORM_SIGMA],
                template: vec![(0.5, 0.5)],
                edges: Vec::new(),
            }),
            k => {
                let template = (0..k)
                    .map(|i| {
                        let theta = std::f64::consts::TAU * i as f64 / k as f64
                            - std::f64::consts::FRAC_PI_2;
                        (0.5 + 0.3 * theta.cos(), 0.5 + 0.45 * theta.sin())
                    })
                    .collect();
                Ok(SkeletonSpec {
                    joint_names: (0..k).map(|i| format!("joint_{i}")).collect(),
                    sigmas: vec![DEFAULT_UNIFORM_SIGMA; k],
                    template,
                    edges: (1..k).map(|i| (i - 1, i)).collect(),
                })
            }
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.joint_names.len();
        if k == 0 {
            return Err(Error::Config("skeleton needs at least one joint".into()));
        }
        if self.sigmas.len() != k || self.template.len() != k {
            return Err(Error::Config(format!(
                "skeleton has {k} joints but {} sigmas and {} template points",
                self.sigmas.len(),
                self.template.len()
            )));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Config(format!("sigma {s} is not positive")));
        }
        if self
            .template
            .iter()
            .any(|&(x, y)| !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y))
        {
            return Err(Error::Config(
                "template coordinates must lie in the unit square".into(),
            ));
        }
        if let Some(&(a, b)) = self.edges.iter().find(|&&(a, b)| a >= k || b >= k) {
            return Err(Error::Config(format!("edge ({a}, {b}) out of range")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// 0 = absent, 1 = labeled but occluded, 2 = visible.
    pub v: u8,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64, v: u8) -> Self {
        Keypoint { x, y, v }
    }

    pub const fn visible(x: f64, y: f64) -> Self {
        Keypoint { x, y, v: 2 }
    }

    /// Whether the keypoint participates in metrics.
    pub fn counts(&self) -> bool {
        self.v > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Pose {
    pub fn new(keypoints: Vec<Keypoint>) -> Self {
        Pose {
            keypoints,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// Builds a fully visible pose from `(x, y)` pairs.
    pub fn from_points(points: &[(f64, f64)]) -> Self {
        Pose::new(
            points
                .iter()
                .map(|&(x, y)| Keypoint::visible(x, y))
                .collect(),
        )
    }

    pub fn num_joints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn visible(&self) -> impl Iterator<Item = &Keypoint> + '_ {
        self.keypoints.iter().filter(|k| k.counts())
    }

    pub fn num_visible(&self) -> usize {
        self.visible().count()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Pose {
        Pose {
            keypoints: self
                .keypoints
                .iter()
                .map(|k| Keypoint::new(k.x + dx, k.y + dy, k.v))
                .collect(),
            score: self.score,
        }
    }
}

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max >= x_min && y_max >= y_min) {
            return Err(Error::InvalidPose(format!(
                "box ({x_min}, {y_min}, {x_max}, {y_max}) has negative extent"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }
}

/// A synthetic or decoded image together with its ground-truth poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `C x H x W` intensities in `[0, 1]`.
    pub image: Tensor,
    pub gt_poses: Vec<Pose>,
    /// Mean pairwise keypoint-box IoU of the ground truth.
    pub crowd_index: f64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Checks a ground-truth pose against the skeleton and image bounds `(W, H)`.
pub fn validate_pose(pose: &Pose, spec: &SkeletonSpec, bounds: (f64, f64)) -> Result<Pose> {
    let k = spec.num_joints();
    if pose.num_joints() != k {
        return Err(Error::InvalidPose(format!(
            "keypoint count mismatch: {} != {k}",
            pose.num_joints()
        )));
    }
    if let Some(score) = pose.score {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidPose(format!("score {score} outside [0, 1]")));
        }
    }
    let (w, h) = bounds;
    for (i, kp) in pose.keypoints.iter().enumerate() {
        if kp.v > 2 {
            return Err(Error::InvalidPose(format!(
                "keypoint {i} has visibility {}",
                kp.v
            )));
        }
        if kp.counts() && !(kp.x >= 0.0 && kp.x < w && kp.y >= 0.0 && kp.y < h) {
            return Err(Error::InvalidPose(format!(
                "keypoint {i} at ({}, {}) outside {w}x{h}",
                kp.x, kp.y
            )));
        }
    }
    if pose.num_visible() == 0 {
        return Err(Error::InvalidPose("no visible keypoints".into()));
    }
    Ok(pose.clone())
}

/// Tight box around the keypoints with `v > 0`.
pub fn keypoint_bbox(pose: &Pose) -> Result<BBox> {
    let mut it = pose.visible();
    let first = it
        .next()
        .ok_or_else(|| Error::InvalidPose("no visible keypoints".into()))?;
    let init = BBox {
        x_min: first.x,
        y_min: first.y,
        x_max: first.x,
        y_max: first.y,
    };
    Ok(it.fold(init, |b, k| BBox {
        x_min: b.x_min.min(k.x),
        y_min: b.y_min.min(k.y),
        x_max: b.x_max.max(k.x),
        y_max: b.y_max.max(k.y),
    }))
}
