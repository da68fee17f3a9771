use serde::{Deserialize, Serialize};

use super::{
    adapt_target, evaluate, train_source, EvalReport, ExperimentConfig, HeadKind, LogRecord, MemMode, SourceArtifacts,
    TeacherKind,
};
use crate::error::Result;
use crate::synthdata::{Dataset, Split};

/// One switch combination.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub head: HeadKind,
    pub teacher: TeacherKind,
    pub noise_correction: bool,
    pub color_aug: bool,
    pub mem_mode: MemMode,
}

impl Variant {
    pub fn from_config(name: &str, c: &ExperimentConfig) -> Self {
        Self {
            name: name.into(),
            head: c.head,
            teacher: c.teacher,
            noise_correction: c.noise_correction,
            color_aug: c.color_aug,
            mem_mode: c.mem_mode,
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            head: self.head,
            teacher: self.teacher,
            noise_correction: self.noise_correction,
            color_aug: self.color_aug,
            mem_mode: self.mem_mode,
            ..base.clone()
        }
    }
}

/// The full mechanism of `base` and each single-component removal.
pub fn default_grid(base: &ExperimentConfig) -> Vec<Variant> {
    let full = Variant::from_config("full", base);
    vec![
        full.clone(),
        Variant { name: "mlp_head".into(), head: HeadKind::MlpHead, ..full.clone() },
        Variant { name: "no_noise_correction".into(), noise_correction: false, ..full.clone() },
        Variant { name: "latest_model".into(), teacher: TeacherKind::LatestModel, ..full },
    ]
}

/// Source-only reference numbers of one source run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRun {
    pub head: HeadKind,
    pub color_aug: bool,
    pub source_val_miou: f64,
    pub target_val_miou: f64,
    pub log: Vec<LogRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Index into [`AblationTable::sources`].
    pub source: usize,
    pub target_miou: f64,
    /// Adapted over supervised-on-target mIoU.
    pub rel: Option<f64>,
    pub report: EvalReport,
    pub log: Vec<LogRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sources: Vec<SourceRun>,
    pub rows: Vec<AblationRow>,
    pub supervised_target_miou: Option<f64>,
}

/// Runs every variant with the master seed of `base`. Variants that share a
/// head and augmentation setting share one source run.
pub fn run_ablation(base: &ExperimentConfig, grid: &[Variant], dataset: &Dataset, include_supervised: bool) -> Result<AblationTable> {
    let source_train = dataset.split(Split::SourceTrain);
    let source_val = dataset.split(Split::SourceVal);
    let target_train = dataset.split(Split::TargetTrain);
    let target_val = dataset.split(Split::TargetVal);

    let supervised_target_miou = if include_supervised {
        let s = train_source(base, &target_train, &target_val)?;
        Some(evaluate(&s.pixel, &s.classifier, &target_val, 0)?.miou)
    } else {
        None
    };

    let mut sources: Vec<SourceRun> = Vec::new();
    let mut artifacts: Vec<SourceArtifacts> = Vec::new();
    let mut rows = Vec::with_capacity(grid.len());
    for variant in grid {
        let config = variant.apply(base);
        let idx = match sources.iter().position(|s| s.head == variant.head && s.color_aug == variant.color_aug) {
            Some(i) => i,
            None => {
                log::info!("source training for head {:?}, color_aug {}", variant.head, variant.color_aug);
                let art = train_source(&config, &source_train, &source_val)?;
                sources.push(SourceRun {
                    head: variant.head,
                    color_aug: variant.color_aug,
                    source_val_miou: evaluate(&art.pixel, &art.classifier, &source_val, 0)?.miou,
                    target_val_miou: evaluate(&art.pixel, &art.classifier, &target_val, 0)?.miou,
                    log: art.log.clone(),
                });
                artifacts.push(art);
                sources.len() - 1
            }
        };
        log::info!("adapting variant {}", variant.name);
        let adapted = adapt_target(&config, &artifacts[idx], &target_train, &target_val, &source_train)?;
        let report = evaluate(&adapted.student, &artifacts[idx].classifier, &target_val, config.nc_images)?;
        rows.push(AblationRow {
            variant: variant.clone(),
            source: idx,
            target_miou: report.miou,
            rel: supervised_target_miou.map(|s| report.miou / s),
            report,
            log: adapted.log,
        });
    }
    Ok(AblationTable { sources, rows, supervised_target_miou })
}
