//! Source training, target adaptation, evaluation and ablations.

mod ablation;
mod adapt;
mod artifacts;
mod classifier;
mod config;
mod metrics;
mod optim;
mod source;

pub use ablation::{default_grid, run_ablation, AblationRow, AblationTable, SourceRun, Variant};
pub use adapt::{adapt_target, adapt_target_observed, build_step, AdaptArtifacts, AdaptState, ImageTerms, StepGraph, StepTrace};
pub use artifacts::{load_source, model_checkpoint, model_from_checkpoint, read_jsonl, save_adapted, save_source, LoadedModel};
pub use classifier::Classifier;
pub use config::{ExperimentConfig, HeadKind, MemMode, OptimizerConfig, ReferenceKind, TeacherKind};
pub use metrics::{mean_iou, ConfusionMatrix, EvalReport};
pub use optim::Sgd;
pub use source::{color_augment, train_source, SourceArtifacts};


use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segda_grad::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::etf::nc_metrics;
use crate::networks::PixelModule;
use crate::synthdata::{generate_dataset, load_dataset, Dataset, LabeledScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Source,
    Adapt,
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub iter: usize,
    /// Mean of each loss term over the iterations since the last record.
    pub losses: BTreeMap<String, f64>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "NC1")]
    pub nc1: Option<f64>,
    #[serde(rename = "NC2")]
    pub nc2: Option<f64>,
    #[serde(rename = "NC3")]
    pub nc3: Option<f64>,
    pub skipped_images: u64,
    pub clamp_counter: u64,
}

pub fn write_jsonl(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| CoreError::Json { path: path.to_path_buf(), source: e })?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&out).map_err(|e| CoreError::io(path, e))
}

/// Loads the configured dataset directory or generates it in memory.
pub fn resolve_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset_dir {
        Some(dir) => load_dataset(dir),
        None => generate_dataset(&config.synth),
    }
}

pub fn stack_images(scenes: &[&LabeledScene]) -> Result<Tensor> {
    let first = scenes.first().ok_or_else(|| CoreError::Contract("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(scenes.len() * first.image.len());
    for s in scenes {
        if s.image.shape() != shape.as_slice() {
            return Err(CoreError::UnsupportedDimension("scenes in a batch differ in shape".into()));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut full = vec![scenes.len()];
    full.extend(shape);
    Ok(Tensor::new(full, data)?)
}

/// Epoch-wise shuffled index stream.
#[derive(Clone, Debug)]
pub(crate) struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub(crate) fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(CoreError::Contract("cannot sample from an empty split".into()));
        }
        let mut s = Self { order: (0..len).collect(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub(crate) fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    pub(crate) fn batch(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next()).collect()
    }
}

/// Unit-norm `d × HW` pixel embeddings of item `item` of a
/// `N × d × H × W` feature tensor.
pub fn pixel_embeddings(g: &mut Graph, features: Var, item: usize) -> Result<Var> {
    let [_, d, h, w] = g.shape(features)[..] else {
        return Err(CoreError::UnsupportedDimension(format!("pixel features must be N×d×H×W, got {:?}", g.shape(features))));
    };
    let f = g.batch_item(features, item)?;
    let f = g.reshape(f, &[d, h * w])?;
    Ok(g.l2_normalize(f, 0)?)
}

/// `d × HW` unit-norm inference embeddings of one scene.
pub fn scene_features(pixel: &PixelModule, scene: &LabeledScene) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(stack_images(&[scene])?);
    let f = g.constant(pixel.infer(g.value(x))?);
    let e = pixel_embeddings(&mut g, f, 0)?;
    Ok(g.value(e).clone())
}

pub(crate) fn argmax_columns(scores: &Tensor) -> Vec<usize> {
    let [c, n] = scores.shape()[..] else { unreachable!("scores are C×n") };
    let s = scores.data();
    (0..n)
        .map(|j| {
            let mut best = 0;
            for k in 1..c {
                if s[k * n + j] > s[best * n + j] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// mIoU and confusion over `scenes` with inference-mode batch norm. NC
/// metrics use the first `nc_images` scenes when the classifier is an ETF.
pub fn evaluate(pixel: &PixelModule, classifier: &Classifier, scenes: &[&LabeledScene], nc_images: usize) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(CoreError::Contract("evaluation set is empty".into()));
    }
    let c = classifier.num_classes();
    let mut confusion = ConfusionMatrix::new(c);
    let mut nc_cols: Vec<Tensor> = Vec::new();
    let mut nc_labels = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        if scene.num_classes != c {
            return Err(CoreError::Contract(format!("scene has {} classes, classifier {c}", scene.num_classes)));
        }
        let f = scene_features(pixel, scene)?;
        let pred = argmax_columns(&classifier.logits_value(&f, 1.0)?);
        confusion.accumulate(&pred, &scene.mask)?;
        if classifier.etf().is_some() && i < nc_images {
            nc_cols.push(f);
            nc_labels.extend_from_slice(&scene.mask);
        }
    }
    let nc = match classifier.etf() {
        Some(etf) if !nc_cols.is_empty() => Some(nc_metrics(&hconcat(&nc_cols)?, &nc_labels, etf)?),
        _ => None,
    };
    Ok(EvalReport::from_confusion(confusion, nc))
}

/// Neural-collapse metrics of inference features over `scenes`.
pub fn nc_report(pixel: &PixelModule, classifier: &Classifier, scenes: &[&LabeledScene]) -> Result<Option<crate::etf::NcReport>> {
    let Some(etf) = classifier.etf() else { return Ok(None) };
    let mut cols = Vec::new();
    let mut labels = Vec::new();
    for s in scenes {
        cols.push(scene_features(pixel, s)?);
        labels.extend_from_slice(&s.mask);
    }
    Ok(Some(nc_metrics(&hconcat(&cols)?, &labels, etf)?))
}

pub(crate) fn hconcat(parts: &[Tensor]) -> Result<Tensor> {
    let d = parts[0].shape()[0];
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Tensor::zeros(&[d, total]);
    let mut offset = 0;
    for p in parts {
        let n = p.shape()[1];
        for i in 0..d {
            out.data_mut()[i * total + offset..i * total + offset + n].copy_from_slice(&p.data()[i * n..(i + 1) * n]);
        }
        offset += n;
    }
    Ok(out)
}

pub(crate) fn mean_losses(sums: &BTreeMap<String, f64>, count: usize) -> BTreeMap<String, f64> {
    sums.iter().map(|(k, v)| (k.clone(), if count == 0 { 0.0 } else { v / count as f64 })).collect()
}
