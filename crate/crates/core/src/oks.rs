//! Object Keypoint Similarity.
//!
//! `OKS = mean_{i : ref.v_i > 0} exp(-d_i^2 / (2 s^2 k_i^2))` where `d_i` is
//! the pixel distance between the i-th joints, `k_i` the per-joint falloff
//! and `s` the square root of the reference's visible-keypoint box area,
//! floored at `scale_floor`.

use serde::{Deserialize, Serialize};

use crate::domain::{keypoint_bbox, Pose, SkeletonSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OksParams {
    pub sigmas: Vec<f64>,
    /// Minimal object scale in pixels.
    #[serde(default = "default_scale_floor")]
    pub scale_floor: f64,
}

fn default_scale_floor() -> f64 {
    1.0
}

impl OksParams {
    pub fn new(sigmas: Vec<f64>, scale_floor: f64) -> Result<Self> {
        let params = OksParams {
            sigmas,
            scale_floor,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn from_skeleton(spec: &SkeletonSpec) -> Self {
        OksParams {
            sigmas: spec.sigmas.clone(),
            scale_floor: default_scale_floor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(
                "OKS sigmas must be non-empty and positive".into(),
            ));
        }
        if !(self.scale_floor > 0.0) {
            return Err(Error::Config("OKS scale_floor must be positive".into()));
        }
        Ok(())
    }

    /// Object scale `s` of a reference pose.
    pub fn scale(&self, reference: &Pose) -> Result<f64> {
        Ok(keypoint_bbox(reference)?
            .area()
            .sqrt()
            .max(self.scale_floor))
    }
}

/// Similarity of `pred` to the reference pose `reference`, in `[0, 1]`.
pub fn oks(pred: &Pose, reference: &Pose, params: &OksParams) -> Result<f64> {
    let k = reference.num_joints();
    if pred.num_joints() != k || params.sigmas.len() != k {
        return Err(Error::InvalidPose(format!(
            "joint count mismatch: pred {}, reference {k}, sigmas {}",
            pred.num_joints(),
            params.sigmas.len()
        )));
    }
    let s = params.scale(reference)?;
    let s2 = s * s;
    let (mut total, mut count) = (0.0, 0usize);
    for ((r, p), k_i) in reference
        .keypoints
        .iter()
        .zip(&pred.keypoints)
        .zip(&params.sigmas)
    {
        if !r.counts() {
            continue;
        }
        let (dx, dy) = (p.x - r.x, p.y - r.y);
        total += (-(dx * dx + dy * dy) / (2.0 * s2 * k_i * k_i)).exp();
        count += 1;
    }
    Ok(total / count as f64)
}

/// OKS between two predictions, using the higher-scored one as reference
/// (ties and missing scores: `a`).
pub fn oks_symmetric(a: &Pose, b: &Pose, params: &OksParams) -> Result<f64> {
    let sa = a.score.unwrap_or(f64::NEG_INFINITY);
    let sb = b.score.unwrap_or(f64::NEG_INFINITY);
    if sb > sa {
        oks(a, b, params)
    } else {
        oks(b, a, params)
    }
}
