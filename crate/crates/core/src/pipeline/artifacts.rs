//! Directory layout of trained models: a parameter checkpoint, the class
//! memory and the training log.
//!
//! ```text
//! source/  checkpoint/  memory.json  log.jsonl
//! adapt/   student/  teacher/  log.jsonl
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use segda_grad::{ParamGroup, Tensor};

use super::{write_jsonl, Classifier, ExperimentConfig, HeadKind, LogRecord, SourceArtifacts};
use crate::error::{CoreError, Result};
use crate::etf::{ClassMemory, EtfClassifier};
use crate::networks::{Checkpoint, LinearHead, PixelModule, SegmentModule};
use crate::pipeline::AdaptArtifacts;

pub const RUNNING_MEAN: &str = "dec.bn.running_mean";
pub const RUNNING_VAR: &str = "dec.bn.running_var";
pub const ETF_WEIGHTS: &str = "etf.weights";

/// A pixel module with whatever else was stored next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedModel {
    pub pixel: PixelModule,
    pub segment: Option<SegmentModule>,
    pub classifier: Classifier,
}

pub fn model_checkpoint(pixel: &PixelModule, segment: Option<&SegmentModule>, classifier: &Classifier) -> Checkpoint {
    let mut params = pixel.params().clone();
    if let Some(s) = segment {
        params.extend(s.params());
    }
    if let Some(h) = classifier.params() {
        params.extend(h);
    }
    let mut buffers = BTreeMap::new();
    buffers.insert(RUNNING_MEAN.to_string(), Tensor::vector(pixel.running_mean().to_vec()));
    buffers.insert(RUNNING_VAR.to_string(), Tensor::vector(pixel.running_var().to_vec()));
    if let Some(etf) = classifier.etf() {
        buffers.insert(ETF_WEIGHTS.to_string(), etf.weights().clone());
    }
    Checkpoint { architecture: pixel.config().clone(), params, buffers }
}

/// Rebuilds the modules in `ck`. The ETF classifier is regenerated from the
/// master seed of `config` and must match the stored weights.
pub fn model_from_checkpoint(ck: &Checkpoint, config: &ExperimentConfig, num_classes: usize) -> Result<LoadedModel> {
    if ck.architecture != config.arch {
        return Err(CoreError::Config("checkpoint architecture differs from the configured one".into()));
    }
    let buffer = |name: &str| {
        ck.buffers.get(name).map(|t| t.data().to_vec()).ok_or_else(|| CoreError::Missing(format!("checkpoint buffer `{name}`")))
    };
    let pixel_params = ck.params.filtered(|g| matches!(g, ParamGroup::Encoder | ParamGroup::PixelDecoder));
    let pixel = PixelModule::from_parts(ck.architecture.clone(), pixel_params, buffer(RUNNING_MEAN)?, buffer(RUNNING_VAR)?)?;
    let seg_params = ck.params.filtered(|g| g == ParamGroup::SegmentDecoder);
    let segment =
        if seg_params.is_empty() { None } else { Some(SegmentModule::from_parts(ck.architecture.clone(), seg_params)?) };
    let head_params = ck.params.filtered(|g| g == ParamGroup::Head);
    let classifier = match (config.head, head_params.is_empty()) {
        (HeadKind::EtfHead, true) => {
            let etf = EtfClassifier::new(num_classes, config.arch.feature_dim, config.derived_seed("etf"))?;
            let stored = ck.buffers.get(ETF_WEIGHTS).ok_or_else(|| CoreError::Missing(format!("checkpoint buffer `{ETF_WEIGHTS}`")))?;
            if stored.shape() != etf.weights().shape() || stored.max_abs_diff(etf.weights()) > 1e-12 {
                return Err(CoreError::Config("stored ETF weights differ from the seeded ones; check the seed".into()));
            }
            Classifier::Etf(etf)
        }
        (HeadKind::MlpHead, false) => {
            let head = LinearHead::from_params(head_params)?;
            if head.num_classes() != num_classes {
                return Err(CoreError::Config(format!("stored head has {} classes, dataset {num_classes}", head.num_classes())));
            }
            Classifier::Linear(head)
        }
        (HeadKind::EtfHead, false) => return Err(CoreError::Config("checkpoint holds a linear head but config asks for the ETF head".into())),
        (HeadKind::MlpHead, true) => return Err(CoreError::Config("config asks for the MLP head but the checkpoint has none".into())),
    };
    Ok(LoadedModel { pixel, segment, classifier })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CoreError::Json { path: path.to_path_buf(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CoreError::Json { path: path.to_path_buf(), source: e }))
        .collect()
}

pub fn save_source(dir: &Path, source: &SourceArtifacts) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    model_checkpoint(&source.pixel, None, &source.classifier).save(&dir.join("checkpoint"))?;
    write_json(&dir.join("memory.json"), &source.memory)?;
    write_jsonl(&dir.join("log.jsonl"), &source.log)
}

pub fn load_source(dir: &Path, config: &ExperimentConfig) -> Result<SourceArtifacts> {
    let path = dir.join("memory.json");
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let memory: ClassMemory = serde_json::from_str(&text).map_err(|e| CoreError::Json { path: path.clone(), source: e })?;
    memory.check()?;
    if memory.feature_dim() != config.arch.feature_dim {
        return Err(CoreError::Config(format!("memory has dimension {}, config {}", memory.feature_dim(), config.arch.feature_dim)));
    }
    let ck = Checkpoint::load(&dir.join("checkpoint"))?;
    let model = model_from_checkpoint(&ck, config, memory.num_classes())?;
    Ok(SourceArtifacts { pixel: model.pixel, classifier: model.classifier, memory, log: read_jsonl(&dir.join("log.jsonl"))? })
}

pub fn save_adapted(dir: &Path, adapted: &AdaptArtifacts, classifier: &Classifier) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    model_checkpoint(&adapted.student, Some(&adapted.segment), classifier).save(&dir.join("student"))?;
    model_checkpoint(adapted.teacher.module(), None, classifier).save(&dir.join("teacher"))?;
    write_jsonl(&dir.join("log.jsonl"), &adapted.log)
}
