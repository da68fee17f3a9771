use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segda_core::etf::EtfClassifier;
use segda_core::networks::Checkpoint;
use segda_core::pipeline::{
    adapt_target, default_grid, evaluate, load_source, model_from_checkpoint, resolve_dataset, run_ablation, save_adapted,
    save_source, train_source, ExperimentConfig,
};
use segda_core::synthdata::{generate_dataset, write_dataset, Split};
use segda_core::CoreError;
use serde_json::json;

const SEED_ENV: &str = "SEGDA_SEED";

#[derive(Parser, Debug)]
#[command(name = "segda", version, about = "Segment-level domain adaptation on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic source/target dataset.
    Synth(Common),
    /// Train the pixel module and classifier on the source domain.
    TrainSource(Common),
    /// Adapt a source model to the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Output directory of `train-source`.
        #[arg(long)]
        source: PathBuf,
    },
    /// Evaluate a stored model on one dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "target-val")]
        split: SplitArg,
    },
    /// Check the simplex-ETF geometry for one size.
    VerifyEtf {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid from one master seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Also train on labeled target data for the relative column.
        #[arg(long)]
        supervised: bool,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Master seed, overriding the config and `SEGDA_SEED`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    SourceTrain,
    SourceVal,
    TargetTrain,
    TargetVal,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::SourceTrain => Split::SourceTrain,
            SplitArg::SourceVal => Split::SourceVal,
            SplitArg::TargetTrain => Split::TargetTrain,
            SplitArg::TargetVal => Split::TargetVal,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn env_seed() -> Outcome<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Loads the config, applies the seed override and writes the snapshot.
fn prepare(common: &Common) -> Outcome<ExperimentConfig> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", common.config.display())))?;
    let mut config = ExperimentConfig::from_json(&text, &common.config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = common.seed.or(env_seed()?) {
        config.seed = seed;
        config.synth.seed = seed;
    }
    fs::create_dir_all(&common.out).map_err(|e| Failure::Runtime(format!("{}: {e}", common.out.display())))?;
    write_json(&common.out.join("effective_config.json"), &config)?;
    Ok(config)
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth(common) => {
            let config = prepare(&common)?;
            let dataset = generate_dataset(&config.synth)?;
            let manifest = write_dataset(&dataset, &common.out)?;
            log::info!("wrote {} scenes, manifest {}", dataset.scenes.len(), manifest.display());
        }
        Command::TrainSource(common) => {
            let config = prepare(&common)?;
            let dataset = resolve_dataset(&config)?;
            let (train, val, target_val) =
                (dataset.split(Split::SourceTrain), dataset.split(Split::SourceVal), dataset.split(Split::TargetVal));
            let source = train_source(&config, &train, &val)?;
            save_source(&common.out, &source)?;
            let report = json!({
                "source_val": evaluate(&source.pixel, &source.classifier, &val, 0)?,
                "target_val": evaluate(&source.pixel, &source.classifier, &target_val, 0)?,
                "nc_train": evaluate(&source.pixel, &source.classifier, &train, config.nc_images)?.nc,
            });
            write_json(&common.out.join("report.json"), &report)?;
        }
        Command::Adapt { common, source } => {
            let config = prepare(&common)?;
            let dataset = resolve_dataset(&config)?;
            let source = load_source(&source, &config)?;
            let target_val = dataset.split(Split::TargetVal);
            let adapted =
                adapt_target(&config, &source, &dataset.split(Split::TargetTrain), &target_val, &dataset.split(Split::SourceTrain))?;
            save_adapted(&common.out, &adapted, &source.classifier)?;
            let report = json!({
                "target_val": evaluate(&adapted.student, &source.classifier, &target_val, config.nc_images)?,
                "skipped_images": adapted.skipped_images,
                "clamp_counter": adapted.clamp_counter,
                "degenerate_crops": adapted.degenerate_crops,
                "memory_skipped": adapted.memory_skipped,
            });
            write_json(&common.out.join("report.json"), &report)?;
        }
        Command::Eval { common, model, split } => {
            let config = prepare(&common)?;
            let dataset = resolve_dataset(&config)?;
            let ck = Checkpoint::load(&model)?;
            let loaded = model_from_checkpoint(&ck, &config, dataset.num_classes())?;
            let report = evaluate(&loaded.pixel, &loaded.classifier, &dataset.split(split.into()), config.nc_images)?;
            write_json(&common.out.join("eval.json"), &report)?;
        }
        Command::VerifyEtf { classes, dim, tolerance, seed, out } => {
            let seed = seed.or(env_seed()?).unwrap_or(0);
            let etf = EtfClassifier::new(classes, dim, seed).map_err(|e| Failure::Usage(e.to_string()))?;
            let report = etf.verify(tolerance);
            let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{text}");
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            if !report.pass {
                return Err(Failure::Runtime("ETF geometry outside tolerance".into()));
            }
        }
        Command::Ablate { common, supervised } => {
            let config = prepare(&common)?;
            let dataset = resolve_dataset(&config)?;
            let table = run_ablation(&config, &default_grid(&config), &dataset, supervised)?;
            write_json(&common.out.join("ablation.json"), &table)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
