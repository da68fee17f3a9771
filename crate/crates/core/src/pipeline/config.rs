use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CoreError, Result};
use crate::etf::Reduction;
use crate::networks::ArchConfig;
use crate::noise::TransitionNorm;
use crate::synthdata::DatasetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Fixed simplex-ETF classifier trained with the DR loss.
    EtfHead,
    /// Learnable linear layer trained with cross-entropy.
    MlpHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    EmaTeacher,
    /// Teacher replaced by a copy of the student after every step.
    LatestModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemMode {
    /// One labelled source image per adaptation step adds a DR (or CE)
    /// term on pixel features; the memory loss itself is logged only.
    Replay,
    /// Only the memory loss, which carries no gradient.
    Literal,
}

/// Source of the frozen crop embeddings `S_noisy`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// The source-trained pixel module, frozen at the start of adaptation.
    SourceEncoder,
    /// A seeded random projection of the flattened crop.
    RandomProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    pub encoder_lr: f64,
    /// Pixel decoder, segment decoder and linear head.
    pub decoder_lr: f64,
    /// Fraction of iterations with linear learning-rate warmup.
    pub warmup_fraction: f64,
    /// Exponent of the decay after warmup; 0 keeps the rate constant.
    pub decay_power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { momentum: 0.9, encoder_lr: 0.002, decoder_lr: 0.02, warmup_fraction: 0.1, decay_power: 0.0 }
    }
}

/// Every knob of a source-training plus adaptation experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Directory holding `dataset.json`. When absent, the dataset is
    /// generated in memory from `synth`.
    pub dataset_dir: Option<PathBuf>,
    pub synth: DatasetConfig,
    pub arch: ArchConfig,
    pub optimizer: OptimizerConfig,
    pub source_iters: usize,
    pub adapt_iters: usize,
    pub batch_size: usize,
    /// Iterations between log records (and evaluations).
    pub eval_interval: usize,
    /// Source-train images used for neural-collapse measurements.
    pub nc_images: usize,
    pub tau_h: f64,
    pub tau_l: f64,
    pub alpha: f64,
    /// Multiplier on ETF scores before the softmax.
    pub logit_scale: f64,
    pub reduction: Reduction,
    pub head: HeadKind,
    pub teacher: TeacherKind,
    pub noise_correction: bool,
    pub color_aug: bool,
    pub mem_mode: MemMode,
    pub reference: ReferenceKind,
    pub transition: TransitionNorm,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_dir: None,
            synth: DatasetConfig::default(),
            arch: ArchConfig::default(),
            optimizer: OptimizerConfig::default(),
            source_iters: 2000,
            adapt_iters: 2000,
            batch_size: 2,
            eval_interval: 100,
            nc_images: 8,
            tau_h: 0.8,
            tau_l: 0.2,
            alpha: 0.99,
            logit_scale: 5.0,
            reduction: Reduction::Mean,
            head: HeadKind::EtfHead,
            teacher: TeacherKind::EmaTeacher,
            noise_correction: true,
            color_aug: false,
            mem_mode: MemMode::Replay,
            reference: ReferenceKind::SourceEncoder,
            transition: TransitionNorm::ColumnSoftmax,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.synth.scene.validate()?;
        let bad = |msg: String| Err(CoreError::Config(msg));
        if !(self.tau_h > 0.0 && self.tau_h < 1.0 && self.tau_l > 0.0 && self.tau_l < self.tau_h) {
            return bad(format!("thresholds need 0 < τ_l < τ_h < 1, got τ_l = {}, τ_h = {}", self.tau_l, self.tau_h));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("α = {} outside [0, 1]", self.alpha));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.encoder_lr >= 0.0 && o.decoder_lr >= 0.0 && (0.0..1.0).contains(&o.momentum) && (0.0..=1.0).contains(&o.warmup_fraction) && o.decay_power >= 0.0 && o.decay_power.is_finite()) {
            return bad("optimizer settings out of range".into());
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return bad(format!("logit_scale = {} must be positive", self.logit_scale));
        }
        if self.arch.feature_dim < self.synth.scene.num_classes {
            return bad(format!(
                "feature_dim {} below the {} classes of the dataset",
                self.arch.feature_dim, self.synth.scene.num_classes
            ));
        }
        Ok(())
    }

    /// Reads a possibly partial JSON config. Keys present in `text` replace
    /// the defaults, objects merging recursively; unknown keys are rejected.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let json_err = |e| CoreError::Json { path: origin.to_path_buf(), source: e };
        let patch: Value = serde_json::from_str(text).map_err(json_err)?;
        if !patch.is_object() {
            return Err(CoreError::Config(format!("{}: config must be a JSON object", origin.display())));
        }
        let mut merged = serde_json::to_value(Self::default()).map_err(json_err)?;
        merge(&mut merged, patch);
        let config: Self = serde_json::from_value(merged).map_err(json_err)?;
        config.validate()?;
        Ok(config)
    }

    /// Seed for one named consumer, derived from the master seed.
    pub fn derived_seed(&self, stream: &str) -> u64 {
        stream.bytes().fold(self.seed ^ 0xA076_1D64_78BD_642F, |h, b| {
            let h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3);
            h ^ (h >> 29)
        })
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
