//! Run configuration: one JSON document with a section per pipeline stage.
//! Every field has a default, so `{}` is a complete config; unknown keys are
//! rejected at parse time. The fully resolved document (defaults filled in,
//! command-line overrides applied) is echoed into the workdir by every
//! command so a run can be reproduced from its outputs alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use frism_core::error::{Error, Result};
use frism_core::frism::FrismConfig;
use frism_core::model::ArchSpec;
use frism_core::trainer::{Optimizer, TrainConfig};
use frism_core::triple::{Epochs, TripleSeeds};
use serde::{Deserialize, Serialize};

/// Task seed of the taskV evaluation stream.
pub const EVAL_SEED_TASK_V: u64 = 1001;
/// Task seed of the taskR evaluation stream.
pub const EVAL_SEED_TASK_R: u64 = 1002;
/// Task seed of the unlabeled taskV calibration stream used for gate
/// training and the calibration-KL metric.
pub const CALIBRATION_TASK_SEED: u64 = 5;
/// Sample count of the fixed calibration batch behind the KL metric.
pub const CALIBRATION_SAMPLES: usize = 512;

/// Checkpoint generation: architecture, seeds, and training lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Defaults to the published 16→32→32→4 tanh net with a frozen adapter.
    pub arch: ArchSpec,
    /// Defaults to base 11, vlm 22, lrm 33.
    pub seeds: TripleSeeds,
    /// Defaults to base 150, finetune 3000.
    pub epochs: Epochs,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: ArchSpec::default(),
            seeds: TripleSeeds::default(),
            epochs: Epochs::default(),
        }
    }
}

/// Gate training schedule (the loss weight alpha lives in the frism
/// section; it is copied into the trainer config at dispatch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// "adam" (default) or "sgd".
    pub optimizer: Optimizer,
    /// Step size; default 0.01.
    pub lr: f64,
    /// Training steps; default 500.
    pub steps: usize,
    /// Calibration batch size; default 64.
    pub batch: usize,
    /// Calibration stream seed; step t draws batch seed + t. Default 7.
    pub seed: u64,
    /// Report cadence in steps; default 50.
    pub log_every: usize,
    /// Stop when the total loss plateaus; default false.
    pub early_stop: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            optimizer: t.optimizer,
            lr: t.learning_rate,
            steps: t.steps,
            batch: t.batch_size,
            seed: t.seed,
            log_every: t.log_every,
            early_stop: t.early_stop,
        }
    }
}

impl TrainSection {
    /// The trainer config with the loss weight filled in from the frism
    /// section.
    pub fn to_train_config(&self, alpha: f64) -> TrainConfig {
        TrainConfig {
            alpha,
            learning_rate: self.lr,
            steps: self.steps,
            batch_size: self.batch,
            optimizer: self.optimizer,
            seed: self.seed,
            log_every: self.log_every,
            early_stop: self.early_stop,
        }
    }
}

/// Merge dispatch and per-method parameters. Fields irrelevant to the
/// chosen method are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSection {
    /// One of ta | layerwise | ties | dare | ip | frism | frism-scalar.
    /// Default "ta".
    pub method: String,
    /// Coefficient on the visual task vector (ta, layerwise, dare).
    /// Default 1.0.
    pub lambda_vlm: f64,
    /// Coefficient on the reasoning task vector (ta, layerwise, ties
    /// result, dare). Default 0.2.
    pub lambda_lrm: f64,
    /// Kept-magnitude fraction for ties trimming, in (0, 1]. Default 0.5.
    pub density: f64,
    /// Dropout probability for dare, in [0, 1). Default 0.5.
    pub drop_rate: f64,
    /// Seed of the dare dropout mask stream. Default 13.
    pub dare_seed: u64,
    /// Per-layer coefficient above which ip flags the layer in the metrics.
    /// Default 2.0.
    pub lambda_warn: f64,
    /// Per-layer coefficients for layerwise merging, keyed by layer prefix.
    /// Empty maps (the default) mean "constant lambda_vlm / lambda_lrm on
    /// every merged layer".
    pub layer_lambda_vlm: BTreeMap<String, f64>,
    pub layer_lambda_lrm: BTreeMap<String, f64>,
    /// Injection ranks for the sweep command. Default [0, 1, 2, 3].
    pub ranks: Vec<usize>,
    /// Coefficient grid for the sweep command. Default 0.0..=3.0 step 0.3.
    pub lambdas: Vec<f64>,
}

impl Default for MergeSection {
    fn default() -> Self {
        MergeSection {
            method: "ta".into(),
            lambda_vlm: 1.0,
            lambda_lrm: 0.2,
            density: 0.5,
            drop_rate: 0.5,
            dare_seed: 13,
            lambda_warn: frism_core::merge::IP_LAMBDA_WARN,
            layer_lambda_vlm: BTreeMap::new(),
            layer_lambda_lrm: BTreeMap::new(),
            ranks: vec![0, 1, 2, 3],
            lambdas: (0..=10).map(|i| i as f64 * 0.3).collect(),
        }
    }
}

pub const MERGE_METHODS: [&str; 7] =
    ["ta", "layerwise", "ties", "dare", "ip", "frism", "frism-scalar"];

/// Evaluation settings shared by merge, eval, and sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Accuracy streams to score; subset of ["taskV", "taskR"]. Default
    /// both. The calibration KL is always reported.
    pub tasks: Vec<String>,
    /// Samples per evaluation stream; default 2048.
    pub n_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tasks: vec!["taskV".into(), "taskR".into()],
            n_samples: 2048,
        }
    }
}

/// Output locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Root of the fixed output layout
    /// workdir/{checkpoints,decomp,gates,metrics,reports}. Default
    /// "frism-run".
    pub workdir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            workdir: PathBuf::from("frism-run"),
        }
    }
}

/// The whole run configuration; see the section types for field-by-field
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub frism: FrismConfig,
    pub train: TrainSection,
    pub merge: MergeSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Parse from a JSON file; a missing `path` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("read config {}: {e}", path.display()))))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.arch.validate()?;
        self.frism.validate()?;
        self.train.to_train_config(self.frism.alpha).validate()?;
        let m = &self.merge;
        if !MERGE_METHODS.contains(&m.method.as_str()) {
            return Err(Error::Config(format!(
                "merge.method {:?}; expected one of {}",
                m.method,
                MERGE_METHODS.join("|")
            )));
        }
        if !m.lambda_vlm.is_finite() || !m.lambda_lrm.is_finite() {
            return Err(Error::Config("merge coefficients must be finite".into()));
        }
        if !(m.density > 0.0 && m.density <= 1.0) {
            return Err(Error::Config(format!(
                "merge.density {} outside (0, 1]",
                m.density
            )));
        }
        if !(0.0..1.0).contains(&m.drop_rate) {
            return Err(Error::Config(format!(
                "merge.drop_rate {} outside [0, 1)",
                m.drop_rate
            )));
        }
        if self.eval.n_samples == 0 {
            return Err(Error::Config("eval.n_samples must be positive".into()));
        }
        for t in &self.eval.tasks {
            if t != "taskV" && t != "taskR" {
                return Err(Error::Config(format!(
                    "eval.tasks entry {t:?}; expected taskV or taskR"
                )));
            }
        }
        Ok(())
    }

    /// The resolved document written next to every command's outputs.
    pub fn to_echo_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("encode config: {e}")))?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_offending_name() {
        let err = serde_json::from_str::<RunConfig>(r#"{"mode": 3}"#).unwrap_err();
        assert!(err.to_string().contains("mode"), "{err}");
        let err =
            serde_json::from_str::<RunConfig>(r#"{"merge": {"lambda": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
    }

    #[test]
    fn echo_round_trips_bitwise() {
        let cfg = RunConfig::default();
        let echo = cfg.to_echo_json().unwrap();
        let back: RunConfig = serde_json::from_str(&echo).unwrap();
        assert_eq!(back.to_echo_json().unwrap(), echo);
    }

    #[test]
    fn validation_rejects_bad_method_and_ranges() {
        let mut cfg = RunConfig::default();
        cfg.merge.method = "slerp".into();
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
        let mut cfg = RunConfig::default();
        cfg.merge.density = 0.0;
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
        let mut cfg = RunConfig::default();
        cfg.merge.drop_rate = 1.0;
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
        let mut cfg = RunConfig::default();
        cfg.eval.tasks = vec!["taskQ".into()];
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
    }

    #[test]
    fn train_section_maps_onto_the_trainer_config() {
        let s = TrainSection::default();
        let t = s.to_train_config(0.35);
        assert_eq!(t.alpha, 0.35);
        assert_eq!(t.learning_rate, 0.01);
        assert_eq!(t.steps, 500);
        assert_eq!(t.batch_size, 64);
        assert_eq!(t.seed, 7);
    }
}
