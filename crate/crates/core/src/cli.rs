//! Command-line front end. `run` returns the process exit code: 0 on success,
//! 1 for usage and validation errors, 2 for failures while running.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::ablation::{ablate, Variant};
use crate::checkpoint::Checkpoint;
use crate::data::{generate_synthetic, load_dataset, write_dataset, Dataset, Preset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::export::export_embeddings;
use crate::gradcheck::toy_model_check;
use crate::modality::ModalitySet;
use crate::objectives::Head;
use crate::train::{evaluate, evaluate_all_heads, train, TrainConfig};

const PATH_KEYS: [&str; 5] = ["train", "val", "test", "out", "checkpoint"];

#[derive(Parser, Debug)]
#[command(name = "mmerc", version, about = "Multimodal emotion recognition in conversation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature file (optionally with held-out splits)
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint plus history.json
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled dataset
    Eval(EvalArgs),
    /// Train and test ablation variants over several seeds
    Ablate(AblateArgs),
    /// Finite-difference check of the full training loss on a toy model
    Gradcheck(GradcheckArgs),
    /// Write per-utterance fused embeddings as JSON lines
    ExportEmbeddings(ExportArgs),
    /// Print dataset header statistics
    Inspect(InspectArgs),
}

/// Hyperparameter flags shared by `train` and `ablate`. Precedence:
/// flag, then config file, then preset, then built-in default.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Flat JSON config (training, synthetic-data and path keys); unknown keys are errors
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter preset: iemocap-like or meld-like [default: none]
    #[arg(long)]
    preset: Option<Preset>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Modality subset such as "ta" [default: tav]
    #[arg(long)]
    modalities: Option<ModalitySet>,
    /// Evaluation head: t, a, v or x [default: x]
    #[arg(long)]
    head: Option<Head>,
    /// Training epochs [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Conversations per batch [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// Low-level distillation weight [default: 1]
    #[arg(long)]
    gamma1: Option<f64>,
    /// High-level distillation weight [default: 1]
    #[arg(long)]
    gamma2: Option<f64>,
    /// Common representation width [default: 64]
    #[arg(long)]
    d: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Flat JSON config; synthetic-data and path keys are used
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus shape preset: iemocap-like or meld-like [default: none]
    #[arg(long)]
    preset: Option<Preset>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Total conversations before splitting [default: 20, or the preset's]
    #[arg(long)]
    conversations: Option<usize>,
    /// Probability an utterance's label is only jointly recoverable [default: 0, or the preset's]
    #[arg(long)]
    cross_modal_only: Option<f32>,
    /// Feature noise standard deviation [default: 0, or the preset's]
    #[arg(long)]
    noise: Option<f32>,
    /// Output path for the training split (required here or in the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a validation split here
    #[arg(long)]
    val: Option<PathBuf>,
    /// Also write a test split here
    #[arg(long)]
    test: Option<PathBuf>,
    /// Fraction of conversations held out for each requested split
    #[arg(long, default_value_t = 0.15)]
    holdout: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Training feature file (required here or in the config)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation feature file for model selection [default: none, last epoch kept]
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint output path; history.json is written beside it (required)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate (required)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled feature file (required)
    #[arg(long)]
    test: PathBuf,
    /// Head used for predictions [default: the checkpoint's eval head]
    #[arg(long)]
    head: Option<Head>,
    /// Report every head the model carries
    #[arg(long)]
    all_heads: bool,
    /// Also write the metrics JSON here [default: stdout only]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Training feature file (required here or in the config)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation feature file for model selection [default: none]
    #[arg(long)]
    val: Option<PathBuf>,
    /// Test feature file (required here or in the config)
    #[arg(long)]
    test: Option<PathBuf>,
    /// Variant names, repeatable or comma separated, e.g. "full,w/o CMA-T,Text" [default: all]
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
    /// Number of seeds, counting up from --seed
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Report JSON output path [default: stdout only]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Common width
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Utterances in the toy conversation
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Attention heads
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Classes
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Random seed for data, parameters and noise
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint to load (required)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file to embed (required)
    #[arg(long)]
    test: PathBuf,
    /// JSON-lines output path (required)
    #[arg(long)]
    out: PathBuf,
    /// Head used for the predicted label [default: the checkpoint's eval head]
    #[arg(long)]
    head: Option<Head>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Feature file to describe
    path: PathBuf,
}

/// Values read from a `--config` file, split by destination.
#[derive(Debug, Default)]
struct FileConfig {
    train: Map<String, Value>,
    synth: Map<String, Value>,
    paths: Map<String, Value>,
    preset: Option<Preset>,
}

fn object_keys<T: Serialize>(v: &T) -> Vec<String> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path)?;
    let Value::Object(map) = serde_json::from_str(&text)? else {
        return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
    };
    let train_keys = object_keys(&TrainConfig::default());
    let synth_keys = object_keys(&SynthConfig::default());
    let mut out = FileConfig::default();
    for (k, v) in map {
        let mut used = false;
        if k == "preset" {
            out.preset = Some(serde_json::from_value(v.clone())?);
            used = true;
        }
        if PATH_KEYS.contains(&k.as_str()) {
            out.paths.insert(k.clone(), v.clone());
            used = true;
        }
        if train_keys.contains(&k) {
            out.train.insert(k.clone(), v.clone());
            used = true;
        }
        if synth_keys.contains(&k) {
            out.synth.insert(k.clone(), v);
            used = true;
        }
        if !used {
            return Err(Error::Config(format!("{}: unknown config key \"{k}\"", path.display())));
        }
    }
    Ok(out)
}

/// Overlays `overrides` on the serialized `base` and parses the result.
fn merge<T: Serialize + serde::de::DeserializeOwned>(base: &T, overrides: &Map<String, Value>) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Value::Object(m) = &mut v {
        for (k, x) in overrides {
            m.insert(k.clone(), x.clone());
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

impl FileConfig {
    fn path(&self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.paths.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
            Some(other) => Err(Error::Config(format!("config key \"{key}\" must be a string, got {other}"))),
        }
    }
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("missing --{what}")))
}

fn train_config(flags: &TrainFlags, file: &FileConfig) -> Result<TrainConfig> {
    let base = match flags.preset.or(file.preset) {
        Some(p) => TrainConfig::preset(p),
        None => TrainConfig::default(),
    };
    let mut cfg = merge(&base, &file.train)?;
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.modalities {
        cfg.modalities = v;
    }
    if let Some(v) = flags.head {
        cfg.eval_head = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.gamma1 {
        cfg.gamma1 = v;
    }
    if let Some(v) = flags.gamma2 {
        cfg.gamma2 = v;
    }
    if let Some(v) = flags.d {
        cfg.d = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let file = read_config(a.config.as_deref())?;
    let base = match a.preset.or(file.preset) {
        Some(p) => SynthConfig::preset(p),
        None => SynthConfig::default(),
    };
    let mut cfg = merge(&base, &file.synth)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.conversations {
        cfg.conversations = v;
    }
    if let Some(v) = a.cross_modal_only {
        cfg.cross_modal_only = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    let out = required(file.path("out", a.out)?, "out")?;
    let val_path = file.path("val", a.val)?;
    let test_path = file.path("test", a.test)?;
    if !(a.holdout > 0.0 && a.holdout < 1.0) {
        return Err(Error::Config("--holdout must lie strictly between 0 and 1".into()));
    }
    let mut ds = generate_synthetic(&cfg)?;
    let n = ds.conversations.len();
    let take = |ds: &mut Dataset, split| -> Result<Dataset> {
        let frac = (a.holdout * n as f64 / ds.conversations.len() as f64).min(1.0);
        let mut part = ds.split_off(frac)?;
        part.split = Some(split);
        Ok(part)
    };
    let test = test_path.as_ref().map(|_| take(&mut ds, Split::Test)).transpose()?;
    let val = val_path.as_ref().map(|_| take(&mut ds, Split::Val)).transpose()?;
    if val.is_some() || test.is_some() {
        ds.split = Some(Split::Train);
    }
    write_dataset(&ds, &out)?;
    println!("{}: {} conversations, {} utterances", out.display(), ds.conversations.len(), ds.num_utterances());
    for (path, part) in [(val_path, val), (test_path, test)] {
        if let (Some(path), Some(part)) = (path, part) {
            write_dataset(&part, &path)?;
            println!("{}: {} conversations, {} utterances", path.display(), part.conversations.len(), part.num_utterances());
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = read_config(a.flags.config.as_deref())?;
    let cfg = train_config(&a.flags, &file)?;
    let train_path = required(file.path("train", a.train)?, "train")?;
    let val_path = file.path("val", a.val)?;
    let out = required(file.path("out", a.out)?, "out")?;
    let train_ds = load_dataset(&train_path)?;
    let val_ds = val_path.map(load_dataset).transpose()?;
    let outcome = match train(&train_ds, val_ds.as_ref(), &cfg) {
        Err(Error::Diverged { epoch, checkpoint }) => {
            checkpoint.save(&out)?;
            eprintln!("diverged at epoch {epoch}; last finite state saved to {}", out.display());
            return Err(Error::Diverged { epoch, checkpoint });
        }
        other => other?,
    };
    outcome.best.save(&out)?;
    let history_path = out.parent().unwrap_or(Path::new("")).join("history.json");
    write_json(&outcome.history, &history_path)?;
    for e in &outcome.history.epochs {
        let val = e.val.as_ref().map_or(String::new(), |m| {
            format!(" val_acc={:.4} val_wf1={:.4}", m.accuracy, m.weighted_f1)
        });
        println!("epoch {:>3} loss={:.5} grad_norm={:.4}{val}", e.epoch, e.train.total, e.grad_norm);
    }
    println!(
        "best epoch {} written to {}; history in {}",
        outcome.history.best_epoch,
        out.display(),
        history_path.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.test)?;
    let report = if a.all_heads {
        let all = evaluate_all_heads(&ckpt.model, &ds)?;
        serde_json::to_value(all)?
    } else {
        let head = a.head.unwrap_or(ckpt.train_config.eval_head);
        serde_json::to_value(evaluate(&ckpt.model, &ds, head)?)?
    };
    print_json(&report)?;
    if let Some(out) = a.out {
        write_json(&report, &out)?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let file = read_config(a.flags.config.as_deref())?;
    let base = train_config(&a.flags, &file)?;
    let train_ds = load_dataset(required(file.path("train", a.train)?, "train")?)?;
    let val_ds = file.path("val", a.val)?.map(load_dataset).transpose()?;
    let test_ds = load_dataset(required(file.path("test", a.test)?, "test")?)?;
    let out = file.path("out", a.out)?;
    let variants = if a.variant.is_empty() { Variant::standard() } else { a.variant };
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|i| base.seed.wrapping_add(i)).collect();
    let report = ablate(&train_ds, val_ds.as_ref(), &test_ds, &base, &variants, &seeds)?;
    print!("{report}");
    if let Some(out) = out {
        write_json(&report, &out)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let report = toy_model_check(a.d, a.n, a.heads, a.classes, a.seed)?;
    println!("{report}");
    Ok(report.passed)
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.test)?;
    let head = a.head.unwrap_or(ckpt.train_config.eval_head);
    let n = export_embeddings(&ckpt.model, &ds, head, &a.out)?;
    println!("{n} embeddings written to {}", a.out.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let ds = load_dataset(&a.path)?;
    let mut lengths: Vec<usize> = ds.conversations.iter().map(|c| c.len()).collect();
    lengths.sort_unstable();
    let labelled = ds.conversations.iter().filter(|c| c.labels.is_some()).count();
    println!("file            {}", a.path.display());
    if let Some(s) = ds.split {
        println!("split           {}", serde_json::to_value(s)?.as_str().unwrap_or(""));
    }
    println!("modality dims   t={} a={} v={}", ds.modality_dims[0], ds.modality_dims[1], ds.modality_dims[2]);
    println!("speakers        {}", ds.num_speakers);
    println!("conversations   {} ({labelled} labelled)", ds.conversations.len());
    println!("utterances      {}", ds.num_utterances());
    if !lengths.is_empty() {
        let q = |p: f64| lengths[((lengths.len() - 1) as f64 * p).round() as usize];
        let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
        println!(
            "length          min={} q1={} median={} q3={} max={} mean={mean:.2}",
            lengths[0],
            q(0.25),
            q(0.5),
            q(0.75),
            lengths[lengths.len() - 1]
        );
    }
    let counts = ds.class_counts();
    let total: usize = counts.iter().sum();
    println!("classes         {}", ds.num_classes());
    for (name, n) in ds.class_names.iter().zip(&counts) {
        let share = if total > 0 { 100.0 * *n as f64 / total as f64 } else { 0.0 };
        println!("  {name:<14}{n:>8} {share:>6.2}%");
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `argv` (program name first) and runs the chosen subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return 2,
            Err(e) => Err(e),
        },
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
