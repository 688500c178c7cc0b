use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use cbhvt::data::{load_dataset, save_dataset, synth_generate, DataSource, ImageSample, SynthConfig};
use cbhvt::gradcheck_suite::{check_component, COMPONENTS};
use cbhvt::harness::report::{ablation_markdown, metrics_markdown, plot_loss_curve};
use cbhvt::harness::{
    ablate, evaluate_checkpoint, infer, save_detections, train, AblationTable, Model, RunRecord, TrainConfig,
};
use cbhvt::metrics::{Criterion, MetricsReport};
use cbhvt::{Error, Result};

#[derive(Parser)]
#[command(name = "cbhvt", version, about = "Lymphocyte detection and segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a run record.
    Train(TrainArgs),
    /// Score a checkpoint against a labelled dataset.
    Eval(EvalArgs),
    /// Write detections for every image, labelled or not.
    Infer(InferArgs),
    /// Train and score several generator/merger pairings.
    Ablate(AblateArgs),
    /// Finite-difference checks of every differentiable component.
    Gradcheck(GradcheckArgs),
    /// Render a metrics report, ablation table or run record.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root holding images/ and annotations.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Synthetic)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Synthetic,
    Lysto,
    Nuclick,
    LyonRoi,
}

impl From<Format> for DataSource {
    fn from(f: Format) -> Self {
        match f {
            Format::Synthetic => DataSource::Synthetic,
            Format::Lysto => DataSource::Lysto,
            Format::Nuclick => DataSource::Nuclick,
            Format::LyonRoi => DataSource::LyonRoi,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    image_size: Option<u32>,
    #[arg(long)]
    images_per_group: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Synthetic)]
    format: Format,
}

/// Flags that override fields of the training config.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    generator_combo: Option<String>,
    #[arg(long)]
    merger_preset: Option<String>,
    #[arg(long)]
    c_fpn: Option<usize>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c: TrainConfig = match &self.config {
            Some(p) => read_config(p, "train")?,
            None => TrainConfig::default(),
        };
        c.seed = self.seed;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if self.max_iterations.is_some() {
            c.max_iterations = self.max_iterations;
        }
        if let Some(v) = &self.generator_combo {
            c.model.generator_combo = v.clone();
        }
        if let Some(v) = &self.merger_preset {
            c.model.merger_preset = v.clone();
        }
        if let Some(v) = self.c_fpn {
            c.model.c_fpn = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Receives epoch checkpoints, model.ckpt and run.json.
    #[arg(long)]
    out: PathBuf,
    /// Labelled datasets in the same format, scored after training, as
    /// NAME=DIR.
    #[arg(long = "eval", value_parser = parse_named)]
    evals: Vec<(String, PathBuf)>,
}

#[derive(Args)]
struct CriterionArgs {
    #[arg(long, value_enum, default_value_t = CriterionKind::Iou)]
    criterion: CriterionKind,
    /// IoU threshold or centre distance in pixels.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionKind {
    Iou,
    Center,
}

impl CriterionArgs {
    fn criterion(&self) -> Criterion {
        match self.criterion {
            CriterionKind::Iou => Criterion::Iou {
                threshold: self.threshold.unwrap_or(0.5),
            },
            CriterionKind::Center => Criterion::CenterDistance {
                pixels: self.threshold.unwrap_or(Criterion::DEFAULT_CENTER_PIXELS),
            },
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    criterion: CriterionArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Generator combos; defaults to all six.
    #[arg(long = "combo")]
    combos: Vec<String>,
    /// Merger presets; defaults to the six matching presets.
    #[arg(long = "merger")]
    mergers: Vec<String>,
    /// Labelled evaluation splits as NAME=DIR.
    #[arg(long = "eval", value_parser = parse_named, required = true)]
    evals: Vec<(String, PathBuf)>,
    #[command(flatten)]
    criterion: CriterionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Restrict to these components.
    #[arg(long = "component")]
    components: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A metrics report, ablation table or run record (JSON).
    input: PathBuf,
    /// Markdown for reports and tables; PNG loss curve for run records.
    #[arg(long)]
    out: PathBuf,
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, dir) = s.split_once('=').ok_or_else(|| format!("expected NAME=DIR, got {s:?}"))?;
    Ok((name.to_string(), PathBuf::from(dir)))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// A config file may hold `train` and `synth` sections, or be a bare
/// config for one of them. Any failure here is a configuration error.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> Result<T> {
    let v = read_json(path).map_err(|e| Error::Config(e.to_string()))?;
    serde_json::from_value(v.get(key).cloned().unwrap_or(v)).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load(d: &DataArgs) -> Result<Vec<ImageSample>> {
    load_dataset(&d.data, d.format.into())
}

fn load_named(evals: &[(String, PathBuf)], format: Format) -> Result<Vec<(String, Vec<ImageSample>)>> {
    evals
        .iter()
        .map(|(name, dir)| Ok((name.clone(), load_dataset(dir, format.into())?)))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut c: SynthConfig = match &a.config {
                Some(p) => read_config(p, "synth")?,
                None => SynthConfig::default(),
            };
            if let Some(v) = a.n_images {
                c.n_images = v;
            }
            if let Some(v) = a.image_size {
                c.image_size = v;
            }
            if let Some(v) = a.images_per_group {
                c.images_per_group = v;
            }
            if let Some(v) = a.seed {
                c.seed = v;
            }
            let samples = synth_generate(&c)?;
            save_dataset(&samples, &a.out, a.format.into())?;
            println!("wrote {} images to {}", samples.len(), a.out.display());
        }
        Command::Train(a) => {
            let config = a.overrides.resolve()?;
            let dataset = load(&a.data)?;
            let evals = load_named(&a.evals, a.data.format)?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            let (model, mut record) = train(&config, &dataset, Some(&a.out))?;
            let model_path = a.out.join("model.ckpt");
            model.save(&model_path)?;
            record.checkpoints.push(model_path);
            for (name, data) in &evals {
                record.metrics.insert(name.clone(), cbhvt::harness::evaluate(&model, data, &Criterion::default())?);
            }
            record.save(&a.out.join("run.json"))?;
            if let Some(last) = record.losses.last() {
                println!("{} steps, final loss {:.5}", last.iteration, last.loss.total);
            }
            for (name, m) in &record.metrics {
                println!("{name}: F {:.4} P {:.4} R {:.4}", m.f_score, m.precision, m.recall);
            }
        }
        Command::Eval(a) => {
            let report = evaluate_checkpoint(&a.checkpoint, &load(&a.data)?, &a.criterion.criterion())?;
            if let Some(out) = &a.out {
                report.save(out)?;
            }
            print!("{}", metrics_markdown(&a.data.data.display().to_string(), &report));
        }
        Command::Infer(a) => {
            let model = Model::load(&a.checkpoint)?;
            let dets = infer(&model, &load(&a.data)?)?;
            save_detections(&dets, &a.out)?;
            let n: usize = dets.iter().map(|d| d.detections.len()).sum();
            println!("{n} detections over {} images", dets.len());
        }
        Command::Ablate(a) => {
            let base = a.overrides.resolve()?;
            let combos = if a.combos.is_empty() {
                (1..=6).map(|k| format!("Channel Generator-{k}")).collect()
            } else {
                a.combos
            };
            let mergers = if a.mergers.is_empty() {
                (1..=6).map(|k| format!("Channel Merger-{k}")).collect()
            } else {
                a.mergers
            };
            let table = ablate(&combos, &mergers, &base, &load(&a.data)?, &load_named(&a.evals, a.data.format)?, &a.criterion.criterion())?;
            write_json(&table, &a.out)?;
            print!("{}", ablation_markdown(&table));
        }
        Command::Gradcheck(a) => {
            let names: Vec<String> = if a.components.is_empty() {
                COMPONENTS.iter().map(|s| s.to_string()).collect()
            } else {
                a.components
            };
            let reports = names.iter().map(|n| check_component(n, a.seed)).collect::<Result<Vec<_>>>()?;
            for r in &reports {
                println!("{:<20} {} max rel err {:.2e}", r.component, if r.passed { "ok  " } else { "FAIL" }, r.max_relative_error);
            }
            if let Some(out) = &a.out {
                write_json(&reports, out)?;
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.component.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Report(a) => {
            let v = read_json(&a.input)?;
            let bad = |e| Error::json(&a.input, e);
            if v.get("rows").is_some() {
                let table: AblationTable = serde_json::from_value(v).map_err(bad)?;
                std::fs::write(&a.out, ablation_markdown(&table)).map_err(|e| Error::io(&a.out, e))?;
            } else if v.get("losses").is_some() {
                let record: RunRecord = serde_json::from_value(v).map_err(bad)?;
                plot_loss_curve(&record.losses, &a.out)?;
            } else {
                let report: MetricsReport = serde_json::from_value(v).map_err(bad)?;
                let title = a.input.file_stem().map_or("metrics".into(), |s| s.to_string_lossy().into_owned());
                std::fs::write(&a.out, metrics_markdown(&title, &report)).map_err(|e| Error::io(&a.out, e))?;
            }
            println!("wrote {}", a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
