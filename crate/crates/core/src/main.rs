use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use cpfean::dataio::{gen_synthetic, load_dataset, Dataset, SyntheticSpec};
use cpfean::eval::evaluate_split;
use cpfean::gradsuite::{run_suite, COMPONENT_SAMPLES, STEP, TOLERANCE};
use cpfean::numerics::Real;
use cpfean::training::{fit, Ablation, ModelParams, TrainConfig, FINAL_CHECKPOINT};
use cpfean::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cpfean",
    version,
    about = "Image-text matching on precomputed region and word features"
)]
struct Cli {
    /// Config file: a synthetic spec for `gen`, a training config otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run in f64 instead of f32.
    #[arg(long = "f64", global = true)]
    use_f64: bool,
    /// Disable cross-modal semantic fusion.
    #[arg(long, global = true)]
    no_csf: bool,
    /// Disable region label words.
    #[arg(long, global = true)]
    no_pti: bool,
    /// Disable the word graph convolution.
    #[arg(long, global = true)]
    no_tgr: bool,
    /// Use the raw affinity matrix instead of its row softmax.
    #[arg(long, global = true)]
    literal_affinity: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (default spec when --config is absent).
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config; checkpoints and the epoch log go to its output_dir.
    Train,
    /// Recall@K and rSum of a checkpoint on a dataset.
    Eval {
        /// Defaults to the final checkpoint in the config's output_dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the config's val_dataset, then its dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation and the loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Fragment alignment report for one caption and one image.
    Align {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        image: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Regions whose best word cosine is below this are reported unfused.
        #[arg(long)]
        floor: Option<f64>,
    },
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn print_json(value: &impl Serialize) {
    emit(&serde_json::to_string_pretty(value).expect("serializable"));
}

impl Cli {
    fn ablation(&self) -> Ablation {
        Ablation {
            csf: self.no_csf,
            pti: self.no_pti,
            tgr: self.no_tgr,
        }
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
        let mut config = TrainConfig::from_file(path)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let a = self.ablation();
        config.ablation.csf |= a.csf;
        config.ablation.pti |= a.pti;
        config.ablation.tgr |= a.tgr;
        if self.literal_affinity {
            config.normalize_affinity = false;
        }
        Ok(config)
    }
}

fn eval_dataset(config: &TrainConfig, dataset: Option<&Path>) -> Result<Dataset> {
    let root = dataset
        .map(Path::to_path_buf)
        .or_else(|| config.val_dataset.clone())
        .unwrap_or_else(|| config.dataset.clone());
    load_dataset(root)
}

fn checkpoint_path(config: &TrainConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    config
        .output_dir
        .as_ref()
        .map(|d| d.join(FINAL_CHECKPOINT))
        .ok_or_else(|| {
            Error::Config(
                "--checkpoint <path> is required when the config has no output_dir".into(),
            )
        })
}

fn load_model<T: Real>(
    config: &TrainConfig,
    data: &Dataset,
    checkpoint: &Path,
) -> Result<ModelParams<T>> {
    let shape = config.model_config(data.manifest.d_region, data.manifest.d_word);
    Ok(ModelParams::<f32>::load(shape, checkpoint)?.cast())
}

fn train<T: Real>(config: &TrainConfig) -> Result<()> {
    let train = load_dataset(&config.dataset)?;
    let val = match &config.val_dataset {
        Some(p) => load_dataset(p)?,
        None => train.clone(),
    };
    let (_, logs) = fit::<T>(&train, &val, config)?;
    for entry in &logs {
        emit(&serde_json::to_string(entry).expect("serializable"));
    }
    Ok(())
}

fn eval<T: Real>(cli: &Cli, checkpoint: Option<&Path>, dataset: Option<&Path>) -> Result<()> {
    let config = cli.train_config()?;
    let path = checkpoint_path(&config, checkpoint)?;
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let data = eval_dataset(&config, dataset)?;
    let model = load_model::<T>(&config, &data, &path)?;
    print_json(&evaluate_split(&data, &model, config.ablation)?);
    Ok(())
}

fn align<T: Real>(
    cli: &Cli,
    checkpoint: Option<&Path>,
    dataset: Option<&Path>,
    caption: &str,
    image: &str,
    floor: Option<f64>,
) -> Result<()> {
    let config = cli.train_config()?;
    let path = checkpoint_path(&config, checkpoint)?;
    let data = eval_dataset(&config, dataset)?;
    let cap = data
        .caption_by_id(caption)
        .ok_or_else(|| Error::Config(format!("no caption with id {caption}")))?;
    let img = data
        .image_by_id(image)
        .ok_or_else(|| Error::Config(format!("no image with id {image}")))?;
    let model = load_model::<T>(&config, &data, &path)?;
    print_json(&model.alignment_report(cap, img, config.ablation, floor)?);
    Ok(())
}

fn gradcheck(seed: u64, instances: usize) -> Result<()> {
    let results = run_suite(seed, instances)?;
    emit(&format!(
        "gradient check: f64, h = {STEP:e}, tolerance {TOLERANCE:e}, {instances} instances per case, seed {seed}"
    ));
    emit(&format!(
        "(model components check {COMPONENT_SAMPLES} sampled coordinates per instance)"
    ));
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        emit(&format!(
            "{status:>4}  {:<24} coords {:>6}  skipped {:>4}  max rel err {:.3e}",
            r.name, r.coordinates, r.skipped, r.max_rel_error
        ));
        if !r.passed() {
            failed.push(format!("{} (worst at {:?})", r.name, r.worst));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { out } => {
            let mut spec = match &cli.config {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    serde_json::from_str::<SyntheticSpec>(&text).map_err(|e| Error::Validation {
                        path: path.clone(),
                        field: "synthetic spec".into(),
                        message: e.to_string(),
                    })?
                }
                None => SyntheticSpec::overfit(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let generated = gen_synthetic(&spec, out)?;
            eprintln!(
                "wrote {} images and {} captions to {}",
                generated.dataset.num_images(),
                generated.dataset.num_captions(),
                out.display()
            );
            Ok(())
        }
        Command::Train => {
            let config = cli.train_config()?;
            if cli.use_f64 {
                train::<f64>(&config)
            } else {
                train::<f32>(&config)
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
        } => {
            if cli.use_f64 {
                eval::<f64>(cli, checkpoint.as_deref(), dataset.as_deref())
            } else {
                eval::<f32>(cli, checkpoint.as_deref(), dataset.as_deref())
            }
        }
        Command::Gradcheck { instances } => gradcheck(cli.seed.unwrap_or(1), *instances),
        Command::Align {
            checkpoint,
            caption,
            image,
            dataset,
            floor,
        } => {
            let (c, d) = (checkpoint.as_deref(), dataset.as_deref());
            if cli.use_f64 {
                align::<f64>(cli, c, d, caption, image, *floor)
            } else {
                align::<f32>(cli, c, d, caption, image, *floor)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Numeric(_)) { 2 } else { 1 })
        }
    }
}
