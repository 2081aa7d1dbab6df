//! Command-line front end: `train`, `eval`, `reproduce-table`, `gradcheck`
//! and `synth`.
//!
//! Settings come from an optional JSON config file, then flags. Commands
//! that take a config write the fully resolved one back as `config.json`,
//! which is itself a valid `--config` input.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, stratified_split, synth_dataset, write_layout, LabeledImage, SkipReport, SynthSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, FusionModelConfig, ModelKind, Scale};
use crate::gradcheck::{self, GradCheckOptions};
use crate::metrics::{self, confusion_matrix, render_report, reproduce_table, Format, ReportEntry};
use crate::rng::RngState;
use crate::train::{self, load_checkpoint, save_checkpoint, select_best, TrainingConfig};

/// Stream labels mixed into the run seed.
const SPLIT_STREAM: u64 = 1;
const SYNTH_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

#[derive(Parser, Debug)]
#[command(name = "fusionnet", version, about = "CNN + transformer feature-fusion classifier for chest X-rays")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunFlags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// resnet, maxvit or fusion.
    #[arg(long)]
    pub model: Option<String>,
    /// desk or full.
    #[arg(long)]
    pub scale: Option<String>,
    /// Input side length; defaults to the synthetic resolution, else 64 (desk) or 224 (full).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Dataset root containing train/ and test/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic data instead of --data, as NxR (N images per class, R×R pixels).
    #[arg(long)]
    pub synth: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// text, csv or json.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints, history and the resolved config.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Evaluate a checkpoint on a data split and write metric reports.
    Eval {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Rebuild the published results table from its sensitivity/specificity.
    ReproduceTable {
        #[arg(long, default_value_t = 5e-4)]
        tolerance: f64,
        #[arg(long, default_value = "text")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit mode.
    Gradcheck {
        /// Comma-separated subset of ops (default: all).
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value = "text")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the standard directory layout.
    Synth {
        #[arg(long)]
        synth: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Every effective setting of a `train` or `eval` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub model: ModelKind,
    pub scale: Scale,
    pub resolution: Option<usize>,
    pub data: Option<PathBuf>,
    pub synth: Option<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            model: ModelKind::Fusion,
            scale: Scale::Desk,
            resolution: None,
            data: None,
            synth: None,
            seed: 0,
            out: None,
            training: TrainingConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `flags.config` (if any) and applies the flags on top.
    pub fn resolve(command: &str, flags: &RunFlags) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Path { path: path.clone(), reason: e.to_string() })?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.command = command.to_string();
        if let Some(m) = &flags.model {
            cfg.model = m.parse()?;
        }
        if let Some(s) = &flags.scale {
            cfg.scale = s.parse()?;
        }
        if flags.resolution.is_some() {
            cfg.resolution = flags.resolution;
        }
        if let Some(d) = &flags.data {
            cfg.data = Some(d.clone());
            cfg.synth = None;
        }
        if let Some(s) = &flags.synth {
            cfg.synth = Some(s.clone());
            cfg.data = None;
        }
        if let Some(seed) = flags.seed {
            cfg.seed = seed;
        }
        if let Some(o) = &flags.out {
            cfg.out = Some(o.clone());
        }
        cfg.training.seed = cfg.seed;
        if let Some(spec) = cfg.synth_spec()? {
            match cfg.resolution {
                Some(r) if r != spec.resolution => {
                    return Err(Error::config(format!(
                        "resolution {r} conflicts with synthetic spec {spec}"
                    )))
                }
                _ => cfg.resolution = Some(spec.resolution),
            }
        }
        if cfg.resolution.is_none() {
            cfg.resolution = Some(match cfg.scale {
                Scale::Desk => 64,
                Scale::Full => 224,
            });
        }
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> Result<Option<SynthSpec>> {
        self.synth.as_deref().map(str::parse).transpose()
    }

    pub fn resolution(&self) -> usize {
        self.resolution.unwrap_or(64)
    }

    pub fn model_config(&self) -> FusionModelConfig {
        FusionModelConfig::preset(self.model, self.scale, self.resolution())
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let out = self.out.clone().ok_or_else(|| Error::Usage("--out is required".into()))?;
        std::fs::create_dir_all(&out).map_err(|e| Error::Path { path: out.clone(), reason: e.to_string() })?;
        Ok(out)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Path { path: path.to_path_buf(), reason: e.to_string() })
}

/// Labelled pool the train/val split is drawn from, and the test set.
struct Sources {
    labelled: Vec<LabeledImage>,
    skipped: SkipReport,
}

fn load_sources(cfg: &RunConfig, split: &str) -> Result<Sources> {
    let root_rng = RngState::new(cfg.seed);
    if let Some(spec) = cfg.synth_spec()? {
        let (n, stream) = match split {
            "test" => ((spec.per_class / 4).max(1), SYNTH_STREAM + 100),
            _ => (spec.per_class, SYNTH_STREAM),
        };
        let labelled = synth_dataset(n, spec.resolution, &root_rng.derive(stream))?;
        return Ok(Sources { labelled, skipped: SkipReport::default() });
    }
    let root = cfg.data.as_ref().ok_or_else(|| Error::Usage("either --data or --synth is required".into()))?;
    let dir = if split == "test" { "test" } else { "train" };
    let loaded = load_dataset(root, dir, cfg.resolution())?;
    if loaded.images.is_empty() {
        return Err(Error::validation(format!("no images found under {}", root.join(dir).display())));
    }
    Ok(Sources { labelled: loaded.images, skipped: loaded.skipped })
}

fn split_indices(cfg: &RunConfig, images: &[LabeledImage]) -> Result<crate::data::DatasetSplit> {
    let labels: Vec<_> = images.iter().map(|i| i.label).collect();
    stratified_split(&labels, cfg.training.train_ratio, &mut RngState::new(cfg.seed).derive(SPLIT_STREAM).stream_at(0))
}

#[derive(Serialize)]
struct TrainSummary {
    epochs_completed: usize,
    best_epoch: Option<usize>,
    final_record: Option<train::EpochRecord>,
    aborted: Option<String>,
}

fn cmd_train(flags: &RunFlags, epochs: Option<usize>, warmup: Option<usize>, lr: Option<f64>, batch: Option<usize>) -> Result<i32> {
    let mut cfg = RunConfig::resolve("train", flags)?;
    if let Some(e) = epochs {
        cfg.training.epochs = e;
    }
    if let Some(w) = warmup {
        cfg.training.warmup_epochs = w;
    }
    if let Some(lr) = lr {
        cfg.training.base_lr = lr;
    }
    if let Some(b) = batch {
        cfg.training.batch_size = b;
    }
    cfg.training.validate()?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let out = cfg.out_dir()?;
    write_json(&out.join("config.json"), &cfg)?;

    let sources = load_sources(&cfg, "train")?;
    if cfg.data.is_some() {
        write_json(&out.join("skip_report.json"), &sources.skipped)?;
    }
    let split = split_indices(&cfg, &sources.labelled)?;
    write_json(&out.join("split.json"), &split)?;

    let mut model = FusionModel::<f32>::build(&model_cfg, &mut RngState::new(cfg.seed).derive(INIT_STREAM))?;
    let rng = RngState::new(cfg.seed);
    save_checkpoint(&out.join("initial.ckpt"), &model, 0, rng, &[])?;

    let mut history = Vec::new();
    let outcome = train::train(&mut model, &sources.labelled, &split, &cfg.training, |record, m| {
        history.push(record.clone());
        save_checkpoint(&out.join("last.ckpt"), m, record.epoch + 1, rng, &history)
    })?;
    write_json(&out.join("history.json"), &outcome.history)?;

    if let Some(reason) = &outcome.aborted {
        save_checkpoint(&out.join("last_good.ckpt"), &model, outcome.history.len(), rng, &outcome.history)?;
        eprintln!("training aborted: {reason}");
    }
    if let Some((epoch, store)) = &outcome.best {
        let mut best = model.clone();
        best.store = store.clone();
        let upto = &outcome.history[..=*epoch];
        save_checkpoint(&out.join("best.ckpt"), &best, epoch + 1, rng, upto)?;
    }
    let summary = TrainSummary {
        epochs_completed: outcome.history.len(),
        best_epoch: select_best(&outcome.history),
        final_record: outcome.history.last().cloned(),
        aborted: outcome.aborted.clone(),
    };
    let text = match flags.format.as_deref().map(str::parse::<Format>).transpose()?.unwrap_or(Format::Text) {
        Format::Json => serde_json::to_string_pretty(&summary)? + "\n",
        _ => {
            let mut s = format!("epochs completed: {}\n", summary.epochs_completed);
            if let Some(r) = &summary.final_record {
                s += &format!(
                    "final: loss {:.6}  train accuracy {}  val accuracy {}  lr {:.3e}\n",
                    r.train_loss,
                    r.train_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                    r.val_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                    r.lr
                );
            }
            if let Some(b) = summary.best_epoch {
                s += &format!("best epoch: {b}\n");
            }
            s
        }
    };
    print!("{text}");
    Ok(if outcome.aborted.is_some() { 1 } else { 0 })
}

fn cmd_eval(flags: &RunFlags, checkpoint: &Path, split: &str, batch: Option<usize>) -> Result<i32> {
    if !matches!(split, "train" | "val" | "test") {
        return Err(Error::Usage(format!("unknown split {split:?} (expected train, val or test)")));
    }
    let mut cfg = RunConfig::resolve("eval", flags)?;
    if let Some(b) = batch {
        cfg.training.batch_size = b;
    }
    let ck = load_checkpoint(checkpoint)?;
    let model = ck.to_model()?;
    if cfg.resolution() != model.resolution() {
        return Err(Error::config(format!(
            "data resolution {} does not match the checkpoint's {}",
            cfg.resolution(),
            model.resolution()
        )));
    }
    let sources = load_sources(&cfg, split)?;
    let indices: Vec<usize> = match split {
        "test" => (0..sources.labelled.len()).collect(),
        "train" => split_indices(&cfg, &sources.labelled)?.train,
        _ => split_indices(&cfg, &sources.labelled)?.val,
    };
    if indices.is_empty() {
        return Err(Error::validation(format!("the {split} split is empty")));
    }
    let preds = train::evaluate(&model, &sources.labelled, &indices, cfg.training.batch_size, &cfg.training.augmentation)?;
    let labels: Vec<usize> = indices.iter().map(|&i| sources.labelled[i].label.index()).collect();
    let cm = confusion_matrix(&preds, &labels)?;
    let name = match model.config.kind() {
        Some(ModelKind::Resnet) => "resnet",
        Some(ModelKind::Maxvit) => "maxvit",
        _ => "fusion",
    };
    let entries = [ReportEntry::new(name, cm)?];
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out).map_err(|e| Error::Path { path: out.clone(), reason: e.to_string() })?;
        write_json(&out.join("config.json"), &cfg)?;
        std::fs::write(out.join("metrics.csv"), render_report(&entries, Format::Csv)?)?;
        std::fs::write(out.join("metrics.json"), render_report(&entries, Format::Json)?)?;
    }
    let format = flags.format.as_deref().map(str::parse::<Format>).transpose()?.unwrap_or(Format::Text);
    print!("{}", render_report(&entries, format)?);
    Ok(0)
}

fn cmd_reproduce_table(tolerance: f64, format: &str, out: Option<&Path>) -> Result<i32> {
    let format: Format = format.parse()?;
    let check = reproduce_table(tolerance)?;
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::Path { path: out.to_path_buf(), reason: e.to_string() })?;
        std::fs::write(out.join("table.json"), metrics::render_table_check(&check, Format::Json)?)?;
    }
    print!("{}", metrics::render_table_check(&check, format)?);
    Ok(if check.pass { 0 } else { 1 })
}

fn cmd_gradcheck(ops: &[String], opts: &GradCheckOptions, format: &str, out: Option<&Path>) -> Result<i32> {
    let format: Format = format.parse()?;
    let reports = gradcheck::run(ops, opts)?;
    let pass = reports.iter().all(|r| r.passed);
    let json = serde_json::to_string_pretty(&reports)? + "\n";
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::Path { path: out.to_path_buf(), reason: e.to_string() })?;
        std::fs::write(out.join("gradcheck.json"), &json)?;
    }
    let text = match format {
        Format::Json => json,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["Op", "Instances", "Coordinates", "Refined", "WorstRelErr", "WorstAt", "Pass"])?;
            for r in &reports {
                w.write_record([
                    r.op.clone(),
                    r.instances.to_string(),
                    r.coords_checked.to_string(),
                    r.refined.to_string(),
                    format!("{:.3e}", r.worst_rel_err),
                    r.worst_at.clone(),
                    r.passed.to_string(),
                ])?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).unwrap_or_default()
        }
        Format::Text => {
            let mut s = String::new();
            for r in &reports {
                s += &format!(
                    "{}  {:<24} worst rel err {:.3e} at {} ({} instances, {} coordinates)\n",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.op,
                    r.worst_rel_err,
                    r.worst_at,
                    r.instances,
                    r.coords_checked
                );
            }
            s += if pass { "all gradients match\n" } else { "gradient mismatch\n" };
            s
        }
    };
    print!("{text}");
    Ok(if pass { 0 } else { 1 })
}

fn cmd_synth(spec: &str, seed: u64, out: &Path) -> Result<i32> {
    let spec: SynthSpec = spec.parse()?;
    std::fs::create_dir_all(out).map_err(|e| Error::Path { path: out.to_path_buf(), reason: e.to_string() })?;
    let [train, test] = write_layout(out, spec, &RngState::new(seed).derive(SYNTH_STREAM))?;
    println!("wrote {train} train and {test} test images per class at {0}x{0} to {1}", spec.resolution, out.display());
    Ok(0)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { run, epochs, warmup, lr, batch } => cmd_train(&run, epochs, warmup, lr, batch),
        Command::Eval { run, checkpoint, split, batch } => cmd_eval(&run, &checkpoint, &split, batch),
        Command::ReproduceTable { tolerance, format, out } => cmd_reproduce_table(tolerance, &format, out.as_deref()),
        Command::Gradcheck { ops, seed, instances, tolerance, format, out } => {
            let opts = GradCheckOptions { seed, instances, tolerance, ..GradCheckOptions::default() };
            cmd_gradcheck(&ops, &opts, &format, out.as_deref())
        }
        Command::Synth { synth, seed, out } => cmd_synth(&synth, seed, &out),
    }
}

/// Parses `args` (including the program name) and runs; errors are printed
/// to stderr and mapped to exit codes.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
