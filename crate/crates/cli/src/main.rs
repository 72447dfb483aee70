use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mqcl::datagen::{generate_dataset, Dataset, DatasetSpec, Split, MANIFEST_FILE};
use mqcl::eval::{self, TableMeta, PREDICTIONS_FILE};
use mqcl::trainer::{train_crr, train_wrl, Checkpoint, PipelineConfig, TrainLog};

/// Weather-aware crowd counting: data generation, training, evaluation.
#[derive(Parser)]
#[command(name = "mqcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic weather crowd dataset.
    GenData {
        /// TOML dataset spec, or a pipeline config with a [data] table.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Representation learning from scratch.
    TrainWrl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to the checkpoint path with a .jsonl extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Refinement on top of a representation-learning checkpoint.
    TrainCrr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; defaults to train.data_dir, then the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-weather MAE/RMSE of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump projection vectors with weather labels as CSV.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare evaluation runs and plot training logs.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn log_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("jsonl"))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn check_classes(ckpt: &Checkpoint, data: &Dataset) -> Result<()> {
    if ckpt.class_names != data.class_names() {
        bail!(
            "checkpoint classes {:?} do not match dataset classes {:?}",
            ckpt.class_names,
            data.class_names()
        );
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => {
            let spec = DatasetSpec::load(&spec)?;
            let manifest = generate_dataset(&spec, &out)?;
            log::info!(
                "wrote {} images to {} (train {:?}, test {:?})",
                manifest.entries.len(),
                out.display(),
                manifest.histogram(Split::Train),
                manifest.histogram(Split::Test)
            );
        }
        Command::TrainWrl { config, data, out, log } => {
            let mut config = PipelineConfig::load(&config)?;
            let dataset = load_dataset(&data)?;
            config.train.data_dir = Some(data);
            let mut train_log = TrainLog::to_file(log_path(&out, log))?;
            let ckpt = train_wrl(&config, dataset.split(Split::Train), dataset.class_names(), &mut train_log)?;
            ckpt.save(&out)?;
            log::info!("saved {} checkpoint to {}", ckpt.stage.name(), out.display());
        }
        Command::TrainCrr { config, ckpt, out, data, log } => {
            let config = PipelineConfig::load(&config)?;
            let checkpoint = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let Some(data) = data.or_else(|| config.train.data_dir.clone()).or_else(|| checkpoint.data_dir.clone()) else {
                bail!("no dataset given: pass --data or set train.data_dir");
            };
            let dataset = load_dataset(&data)?;
            check_classes(&checkpoint, &dataset)?;
            let mut train_log = TrainLog::to_file(log_path(&out, log))?;
            let mut refined = train_crr(&config, checkpoint, dataset.split(Split::Train), &mut train_log)?;
            refined.data_dir = Some(data);
            refined.save(&out)?;
            log::info!("saved {} checkpoint to {}", refined.stage.name(), out.display());
        }
        Command::Eval { ckpt, data, split, out } => {
            let checkpoint = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let dataset = load_dataset(&data)?;
            check_classes(&checkpoint, &dataset)?;
            let meta = TableMeta {
                checkpoint_id: Checkpoint::file_id(&ckpt)?,
                dataset_id: Checkpoint::file_id(data.join(MANIFEST_FILE))?,
                seed: checkpoint.config.train.seed,
                split: split.name().into(),
            };
            let (table, counts) = eval::evaluate_checkpoint(&checkpoint, dataset.split(split), split, meta)?;
            table.save(&out)?;
            let path = out.join(PREDICTIONS_FILE);
            std::fs::write(&path, eval::predictions_csv(&counts)).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", table.to_csv());
        }
        Command::Embed { ckpt, data, split, out } => {
            let checkpoint = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let dataset = load_dataset(&data)?;
            check_classes(&checkpoint, &dataset)?;
            let samples = dataset.split(split);
            if samples.is_empty() {
                bail!("{} split is empty", split.name());
            }
            let vectors = eval::embed_samples(&checkpoint.model, samples, checkpoint.config.train.batch_size)?;
            let labels: Vec<usize> = vectors.iter().map(|v| v.weather).collect();
            let rows: Vec<Vec<f64>> = vectors.iter().map(|v| v.vector.clone()).collect();
            match eval::cluster_separation(&rows, &labels) {
                Ok(s) => log::info!("weather silhouette {s:.4}"),
                Err(e) => log::warn!("silhouette unavailable: {e}"),
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(&out, eval::embeddings_csv(&vectors, split, &checkpoint.class_names))
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Report { inputs, out } => {
            let summary = eval::report(&inputs, &out)?;
            for file in &summary.files {
                println!("{}", file.display());
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse().command)
}
