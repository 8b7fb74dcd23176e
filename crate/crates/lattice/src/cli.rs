//! Command-line surface: train, eval, explain, compare, gen-data.
//!
//! Exit codes are stable: 0 success, 2 user or configuration error
//! (clap's own usage errors also exit 2), 3 numeric failure during
//! training. All heavy lifting lives in the library modules; this module
//! wires flags to configs and writes the artifact files.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array3;

use crate::checkpoint;
use crate::config::{cache_dir, RunConfig};
use crate::data::{self, DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::explain::{write_explanation, Provenance};
use crate::metrics::{evaluate, EvalReport};
use crate::model::Model;
use crate::report::{
    render_ablation_table, render_explainer_table, DatasetSummary, RunSummary,
};
use crate::saliency::Explainer;
use crate::train::fit;

#[derive(Debug, Parser)]
#[command(
    name = "lattice",
    version,
    about = "Attention-branch explanation generation: train, evaluate, and explain"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint with one or more explainers.
    Eval(EvalArgs),
    /// Write heatmap/overlay/raw-attention artifacts for one input.
    Explain(ExplainArgs),
    /// Evaluate several checkpoints side by side.
    Compare(CompareArgs),
    /// Generate a synthetic dataset on disk.
    GenData(GenDataArgs),
}

/// Shared --config/--seed/--out/--ablation plumbing.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run config; defaults to the built-in quickstart config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable components, comma-separated: no-taps, no-lora, no-aea.
    #[arg(long, value_delimiter = ',')]
    ablation: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => crate::config::quickstart(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        for toggle in &self.ablation {
            match toggle.as_str() {
                "no-taps" => cfg.train.ablation.use_taps = false,
                "no-lora" => cfg.train.ablation.use_lora = false,
                "no-aea" => cfg.train.ablation.use_aea = false,
                other => {
                    return Err(Error::Input(format!(
                        "unknown ablation toggle '{other}' (expected no-taps, no-lora, no-aea)"
                    )))
                }
            }
        }
        cfg.resolve()
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Print the resolved config as TOML and exit without training.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split to evaluate on.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Explainers to compare (default: the config's list).
    #[arg(long, value_delimiter = ',')]
    explainers: Vec<String>,
    /// Curve segments: a number, or "exhaustive" for per-pixel steps.
    #[arg(long)]
    steps: Option<String>,
    /// Binarization threshold for IoU.
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Checkpoint to explain with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Explain an image file (PNG), resized to the model's input size.
    #[arg(long, conflicts_with_all = ["sample_id", "index"])]
    image: Option<PathBuf>,
    /// Explain the dataset sample with this id.
    #[arg(long, conflicts_with = "index")]
    sample_id: Option<String>,
    /// Explain the n-th sample of the test split.
    #[arg(long)]
    index: Option<usize>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Checkpoints to compare, in row order.
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoints: Vec<PathBuf>,
    /// Row labels (default: checkpoint file stems).
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Dataset split to evaluate on.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory (default: under the cache directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    num_samples: usize,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl Cli {
    pub fn run(self) -> Result<()> {
        match self.command {
            Command::Train(args) => cmd_train(args),
            Command::Eval(args) => cmd_eval(args),
            Command::Explain(args) => cmd_explain(args),
            Command::Compare(args) => cmd_compare(args),
            Command::GenData(args) => cmd_gen_data(args),
        }
    }
}

fn split_of<'a>(split: &'a DatasetSplit, name: &str) -> &'a [ImageSample] {
    match name {
        "train" => &split.train,
        "val" => &split.val,
        _ => &split.test,
    }
}

fn parse_steps(arg: &Option<String>, image_size: usize, default: usize) -> Result<usize> {
    match arg.as_deref() {
        None => Ok(default),
        Some("exhaustive") => Ok(image_size * image_size),
        Some(text) => text.parse().map_err(|_| {
            Error::Input(format!(
                "--steps must be a number or \"exhaustive\", got '{text}'"
            ))
        }),
    }
}

fn parse_explainers(names: &[String], ig_steps: usize, seed: u64) -> Result<Vec<Explainer>> {
    names
        .iter()
        .map(|n| Explainer::parse(n, ig_steps, seed))
        .collect()
}

/// Checkpoint models must match the dataset the config describes.
fn check_compat(model: &Model, cfg: &RunConfig) -> Result<()> {
    let size = (cfg.data.image_size, cfg.data.image_size);
    if model.cfg.encoder.image_size != size {
        return Err(Error::Input(format!(
            "checkpoint expects {:?} images but the config provides {:?}",
            model.cfg.encoder.image_size, size
        )));
    }
    if model.cfg.num_classes != cfg.data.num_classes {
        return Err(Error::Input(format!(
            "checkpoint has {} classes but the config provides {}",
            model.cfg.num_classes, cfg.data.num_classes
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.common.load()?;
    if args.print_config {
        println!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out = cfg.output.dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io(&out.join("config.toml"), e))?;

    let split = cfg.load_dataset()?;
    log::info!(
        "dataset: {} train / {} val / {} test samples",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let mut model = Model::new(cfg.model_config()?, cfg.train.seed)?;

    let started = Instant::now();
    let training = match fit(&mut model, &split.train, &split.val, &cfg.train) {
        Ok(report) => report,
        Err(e) => {
            // Keep the weights that produced the failure for diagnosis.
            let diag = out.join("diagnostic.ckpt");
            if let Err(save_err) = checkpoint::save(&diag, &model.cfg, &model.store) {
                log::warn!("could not write diagnostic checkpoint: {save_err}");
            } else {
                log::info!("diagnostic checkpoint written to {}", diag.display());
            }
            return Err(e);
        }
    };
    let train_secs = started.elapsed().as_secs_f64();

    let ckpt_path = out.join("model.ckpt");
    checkpoint::save(&ckpt_path, &model.cfg, &model.store)?;
    let checkpoint_sha256 = checkpoint::file_sha256(&ckpt_path)?;

    let explainers =
        parse_explainers(&cfg.metrics.explainers, cfg.metrics.ig_steps, cfg.metrics.random_seed)?;
    let mut eval_reports = Vec::new();
    for explainer in &explainers {
        eval_reports.push(evaluate(
            &model,
            &split.test,
            *explainer,
            cfg.metrics.theta,
            cfg.metrics.num_steps,
        )?);
    }

    // Line-oriented log: epoch records plus wall-clock timing. Timing
    // stays out of the run summary so summaries hash reproducibly.
    let mut log_text = String::new();
    for e in &training.epochs {
        log_text.push_str(&format!(
            "epoch {} gate={} frozen={} train_loss={:.6} val_loss={:.6} val_acc={:.4}\n",
            e.epoch, e.gate, e.ala_frozen, e.train_loss, e.val_loss, e.val_accuracy
        ));
    }
    log_text.push_str(&format!(
        "best_epoch {} stopping_epoch {} train_seconds {train_secs:.1}\n",
        training.best_epoch, training.stopping_epoch
    ));
    fs::write(out.join("train.log"), &log_text)
        .map_err(|e| Error::io(&out.join("train.log"), e))?;

    let summary = RunSummary {
        dataset: DatasetSummary {
            source: cfg.data.source.clone(),
            num_classes: cfg.data.num_classes,
            image_size: cfg.data.image_size,
            seed: cfg.data.seed,
            train_count: split.train.len(),
            val_count: split.val.len(),
            test_count: split.test.len(),
        },
        config: cfg,
        training,
        checkpoint_sha256,
        eval: eval_reports,
    };
    summary.save(&out.join("run_summary.json"))?;
    let table = render_explainer_table(&summary.eval);
    fs::write(out.join("eval_table.txt"), &table)
        .map_err(|e| Error::io(&out.join("eval_table.txt"), e))?;

    println!(
        "trained {} epochs (best {}), checkpoint {}",
        summary.training.stopping_epoch,
        summary.training.best_epoch,
        ckpt_path.display()
    );
    print!("{table}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(theta) = args.theta {
        cfg.metrics.theta = theta;
        cfg = cfg.resolve()?;
    }
    let (model_cfg, store) = checkpoint::load(&args.checkpoint)?;
    let model = Model::from_parts(model_cfg, store)?;
    check_compat(&model, &cfg)?;

    let split = cfg.load_dataset()?;
    let samples = split_of(&split, &args.split);
    let steps = parse_steps(&args.steps, cfg.data.image_size, cfg.metrics.num_steps)?;
    let names = if args.explainers.is_empty() { &cfg.metrics.explainers } else { &args.explainers };
    let explainers = parse_explainers(names, cfg.metrics.ig_steps, cfg.metrics.random_seed)?;

    let out = cfg.output.dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for explainer in &explainers {
        let report = evaluate(&model, samples, *explainer, cfg.metrics.theta, steps)?;
        let path = out.join(format!("eval_{}.json", report.explainer));
        let json = serde_json::to_vec_pretty(&report)
            .map_err(|e| Error::Internal(format!("cannot encode report: {e}")))?;
        fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
        reports.push(report);
    }
    let table = render_explainer_table(&reports);
    fs::write(out.join("eval_table.txt"), &table)
        .map_err(|e| Error::io(&out.join("eval_table.txt"), e))?;
    print!("{table}");
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let (model_cfg, store) = checkpoint::load(&args.checkpoint)?;
    let model = Model::from_parts(model_cfg, store)?;

    let (stem, image): (String, Array3<f64>) = if let Some(path) = &args.image {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        (stem, data::load_image(path, model.cfg.encoder.image_size.0)?)
    } else {
        check_compat(&model, &cfg)?;
        let split = cfg.load_dataset()?;
        let sample = if let Some(id) = &args.sample_id {
            split
                .train
                .iter()
                .chain(&split.val)
                .chain(&split.test)
                .find(|s| &s.sample_id == id)
                .ok_or_else(|| Error::Input(format!("no sample with id '{id}'")))?
                .clone()
        } else {
            let index = args.index.unwrap_or(0);
            split
                .test
                .get(index)
                .ok_or_else(|| {
                    Error::Input(format!(
                        "--index {index} is out of range for the {}-sample test split",
                        split.test.len()
                    ))
                })?
                .clone()
        };
        (sample.sample_id.clone(), sample.image)
    };

    let map = model.attention(&image)?.pixel_map;
    let predicted = model.predict(&image)?.argmax();
    let provenance = Provenance {
        sample_id: stem.clone(),
        checkpoint_sha256: checkpoint::file_sha256(&args.checkpoint)?,
        config_sha256: cfg.sha256()?,
        predicted_class: predicted,
    };
    let out = cfg.output.dir.join("explanations");
    let artifact = write_explanation(&out, &stem, &image, &map, &provenance)?;
    println!(
        "wrote {} (predicted class {predicted})",
        artifact.overlay.display()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let cfg = args.common.load()?;
    if !args.labels.is_empty() && args.labels.len() != args.checkpoints.len() {
        return Err(Error::Input(format!(
            "{} labels for {} checkpoints",
            args.labels.len(),
            args.checkpoints.len()
        )));
    }
    let split = cfg.load_dataset()?;
    let samples = split_of(&split, &args.split);

    let mut rows = Vec::new();
    for (i, path) in args.checkpoints.iter().enumerate() {
        let label = args
            .labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| {
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
        let (model_cfg, store) = checkpoint::load(path)?;
        let model = Model::from_parts(model_cfg, store)?;
        check_compat(&model, &cfg)?;
        let report =
            evaluate(&model, samples, Explainer::Ala, cfg.metrics.theta, cfg.metrics.num_steps)?;
        rows.push((label, report));
    }
    let table = render_ablation_table(&rows);
    let out = cfg.output.dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    fs::write(out.join("compare_table.txt"), &table)
        .map_err(|e| Error::io(&out.join("compare_table.txt"), e))?;
    let json = serde_json::to_vec_pretty(&rows.iter().map(|(l, r)| (l, r)).collect::<Vec<_>>())
        .map_err(|e| Error::Internal(format!("cannot encode comparison: {e}")))?;
    fs::write(out.join("compare.json"), &json)
        .map_err(|e| Error::io(&out.join("compare.json"), e))?;
    print!("{table}");
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| {
        cache_dir().join(format!(
            "synth-c{}-s{}-n{}-seed{}",
            args.num_classes, args.image_size, args.num_samples, args.seed
        ))
    });
    let samples =
        data::synth_shapes(args.num_samples, args.num_classes, args.image_size, args.seed)?;
    let manifest = data::save_dataset(&out, &samples)?;
    println!(
        "wrote {} samples ({} classes, {}x{}) to {}",
        samples.len(),
        args.num_classes,
        args.image_size,
        args.image_size,
        manifest.display()
    );
    Ok(())
}

/// Entry point used by the binary.
pub fn main_impl() -> Result<()> {
    Cli::parse().run()
}
