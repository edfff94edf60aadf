//! Run configuration: one JSON document covering data synthesis, training,
//! the head, OKS constants and evaluation settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{ScorePolicy, DEFAULT_BUCKET_CUTS};
use crate::io::from_json;
use crate::model::HeadConfig;
use crate::oks::OksParams;
use crate::training::{SynthConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Crowd-index cut points `(easy | medium, medium | hard)`.
    pub bucket_cuts: (f64, f64),
    /// Thresholds swept by the NMS bound experiment.
    pub nms_thresholds: Vec<f64>,
    pub score_policy: ScorePolicy,
    /// Held-out scenes used by `refine-gain` and training reports.
    pub heldout_count: usize,
    /// Seed of the held-out set; `None` uses the synthesis seed plus one.
    pub heldout_seed: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bucket_cuts: DEFAULT_BUCKET_CUTS,
            nms_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            score_policy: ScorePolicy::Uniform,
            heldout_count: 64,
            heldout_seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub head: HeadConfig,
    /// `None` uses the default constants for the joint count.
    pub oks: Option<OksParams>,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Applies a command-line seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Training settings with the run-level OKS constants filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            oks: self.oks.clone(),
            ..self.train.clone()
        }
    }

    pub fn oks_params(&self) -> Result<OksParams> {
        self.train_config().oks_params(self.head.num_joints)
    }

    /// Synthesis settings of the held-out set.
    pub fn heldout_synth(&self) -> SynthConfig {
        SynthConfig {
            count: self.eval.heldout_count,
            seed: self
                .eval
                .heldout_seed
                .unwrap_or(self.synth.seed.wrapping_add(1)),
            ..self.synth.clone()
        }
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.head.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.synth.num_joints != self.head.num_joints {
            return bad(format!(
                "synth.num_joints {} differs from head.num_joints {}",
                self.synth.num_joints, self.head.num_joints
            ));
        }
        if self.synth.channels != self.head.in_channels {
            return bad(format!(
                "synth.channels {} differs from head.in_channels {}",
                self.synth.channels, self.head.in_channels
            ));
        }
        let top = self.head.strides.iter().copied().max().unwrap_or(1);
        if !self.synth.height.is_multiple_of(top) || !self.synth.width.is_multiple_of(top) {
            return bad(format!(
                "image size {}x{} is not divisible by the largest stride {top}",
                self.synth.height, self.synth.width
            ));
        }
        if let Some(p) = &self.oks {
            p.validate()?;
        }
        self.oks_params()?;
        let (a, b) = self.eval.bucket_cuts;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return bad(format!(
                "bucket_cuts ({a}, {b}) must satisfy 0 <= a <= b <= 1"
            ));
        }
        if self.eval.nms_thresholds.is_empty()
            || self
                .eval
                .nms_thresholds
                .iter()
                .any(|t| !(*t > 0.0 && *t < 1.0))
        {
            return bad("nms_thresholds must be non-empty and inside (0, 1)".into());
        }
        if self.eval.heldout_count == 0 {
            return bad("heldout_count must be positive".into());
        }
        Ok(())
    }
}

/// Parses and validates a configuration document. Missing fields take their
/// defaults; unknown keys are errors.
pub fn parse_run_config(text: &str, origin: &str) -> Result<RunConfig> {
    let cfg: RunConfig = from_json(text, origin)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text, &path.display().to_string())
}
