//! Command-line pipeline. Stages talk to each other only through files:
//! datasets, soft targets, checkpoints and reports.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{dataset_name, ExperimentConfig, Stage};
use crate::data::synth::{generate, SynthConfig};
use crate::data::{load_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics, DEFAULT_MAX_ANSWER_LEN};
use crate::gradcheck::{gradcheck, gradcheck_with, GradCheckReport};
use crate::kd::{generate_soft_targets, write_soft_targets, Combiner, SoftTargetStore, SoftTargets};
use crate::losses::KdMode;
use crate::nn::{Model, ModelConfig};
use crate::trainer::{finetune, mtl_pretrain, resolve_head, RunReport, TrainSet};
use crate::TaskKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "road", version, about = "Multi-task pretraining and multi-teacher distillation on a small encoder")]
pub struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSONL.
    Synth(SynthArgs),
    /// Multi-task pretraining from an experiment config.
    Pretrain(PretrainArgs),
    /// Run a checkpoint over a dataset and write its logits as soft targets.
    GenSoft(GenSoftArgs),
    /// Finetune on one dataset, optionally distilling a teacher ensemble.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint and print metrics JSON.
    Eval(EvalArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Task kind: mrc_span, nli, sa or pi.
    pub task: TaskKind,
    /// Number of examples.
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Example id prefix; defaults to the output file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    /// Probability of flipping a class label.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Extra markers of other classes per example.
    #[arg(long, default_value_t = 0)]
    pub distractors: usize,
    #[arg(long, default_value_t = 0.2)]
    pub no_answer_frac: f64,
    #[arg(long, default_value_t = 4)]
    pub max_answer_len: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides pretrain.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenSoftArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Head to run; resolved from the dataset's task when omitted.
    #[arg(long)]
    pub head: Option<String>,
    /// Teacher id stored in every record. Defaults to the checkpoint file
    /// stem, or its directory name for a run's `checkpoint.json`.
    #[arg(long)]
    pub teacher_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Distillation mode: none, plain, annealing or weighted.
    #[arg(long)]
    pub kd: Option<KdMode>,
    /// Teacher soft-target files; replaces data.teachers.
    #[arg(long, num_args = 1..)]
    pub teachers: Vec<PathBuf>,
    /// Scale for incorrect teachers in weighted KD (default: 0.75, or finetune.kd.w from the config).
    #[arg(short = 'W', long = "w")]
    pub w: Option<f64>,
    /// Overrides finetune.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long, default_value_t = DEFAULT_MAX_ANSWER_LEN)]
    pub max_answer_len: usize,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model config as TOML (fields of the model config, with a [heads] table).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    pub d_model: usize,
    #[arg(long, default_value_t = 1)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 3)]
    pub max_seq_len: usize,
    /// Write the report JSON here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturb one backward entry; the check must then fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidConfig { .. } | Error::NoTeachers => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::GenSoft(a) => cmd_gen_soft(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        vocab_size: a.vocab_size,
        seq_len: a.seq_len,
        noise: a.noise,
        distractors: a.distractors,
        no_answer_frac: a.no_answer_frac,
        max_answer_len: a.max_answer_len,
    };
    let name = a.name.clone().unwrap_or_else(|| dataset_name(&a.out));
    let ds = generate(a.task, a.n, a.seed, &name, &cfg).map_err(|e| Error::Config(vec![e.to_string()]))?;
    write_dataset(&ds, &a.out)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Vocabulary size and, when resuming from a checkpoint, the starting model.
fn base_model(cfg: &ExperimentConfig) -> Result<(usize, Option<Model>)> {
    match &cfg.init_checkpoint {
        Some(p) => {
            let model = Checkpoint::load(p)?.model()?;
            Ok((model.config().vocab_size, Some(model)))
        }
        None => Ok((cfg.model.as_ref().expect("validated").vocab_size, None)),
    }
}

fn load_all(paths: &[PathBuf], vocab: usize) -> Result<Vec<Dataset>> {
    paths.iter().map(|p| load_dataset(p, vocab)).collect()
}

fn evaluate_all(model: &Model, datasets: &[Dataset], max_answer_len: usize) -> Result<Vec<Metrics>> {
    datasets
        .iter()
        .map(|ds| evaluate(model, &resolve_head(model.config(), ds)?, ds, max_answer_len))
        .collect()
}

fn write_outputs(out_dir: &Path, model: &Model, seed: u64, report: &RunReport) -> Result<()> {
    ensure_dir(out_dir)?;
    Checkpoint::from_model(model, seed).save(out_dir.join("checkpoint.json"))?;
    report.write_json(out_dir.join("report.json"))?;
    report.write_loss_log(out_dir.join("metrics.tsv"))?;
    log::info!("wrote checkpoint, report and loss log to {}", out_dir.display());
    Ok(())
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.pretrain.seed = seed;
    }
    cfg.validate(Stage::Pretrain)?;
    let loop_cfg = cfg.pretrain.clone();
    let (vocab, init) = base_model(&cfg)?;
    let train = load_all(&cfg.data.train, vocab)?;
    let dev = load_all(&cfg.data.dev, vocab)?;

    let model = match init {
        Some(m) => m,
        None => {
            let refs: Vec<&Dataset> = train.iter().collect();
            let heads = loop_cfg.heads_for(&refs)?;
            let mc = cfg.model.as_ref().expect("validated").to_model_config(heads);
            Model::new(mc, loop_cfg.seed)?
        }
    };

    let combiner = match loop_cfg.kd.mode {
        KdMode::Weighted => Combiner::Weighted(loop_cfg.kd.w),
        _ => Combiner::Mean,
    };
    let mut soft: BTreeMap<String, SoftTargets> = BTreeMap::new();
    if loop_cfg.kd.mode != KdMode::None {
        for ds in &train {
            let files = &cfg.data.soft_targets[ds.name()];
            let store = SoftTargetStore::from_files(files)?;
            soft.insert(ds.name().to_string(), SoftTargets::build(&store, ds, combiner)?);
        }
    }
    let sets = train
        .iter()
        .map(|ds| match soft.get(ds.name()) {
            Some(s) => TrainSet::new(ds).with_soft(s),
            None => TrainSet::new(ds),
        })
        .collect();

    let (model, mut report) = mtl_pretrain(loop_cfg.clone(), model, sets)?;
    report.metrics = evaluate_all(&model, &dev, cfg.eval.max_answer_len)?;
    write_outputs(&cfg.out_dir, &model, loop_cfg.seed, &report)
}

pub fn cmd_gen_soft(a: &GenSoftArgs) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let ds = load_dataset(&a.dataset, model.config().vocab_size)?;
    let head = match &a.head {
        Some(h) => h.clone(),
        None => resolve_head(model.config(), &ds)?,
    };
    let teacher = a.teacher_id.clone().unwrap_or_else(|| default_teacher_id(&a.checkpoint));
    let records = generate_soft_targets(&model, &head, &ds, &teacher)?;
    write_soft_targets(&records, &a.out)
}

fn default_teacher_id(checkpoint: &Path) -> String {
    let stem = dataset_name(checkpoint);
    match checkpoint.parent().and_then(|d| d.file_name()) {
        Some(dir) if stem == "checkpoint" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

pub fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(mode) = a.kd {
        cfg.finetune.kd.mode = mode;
    }
    if !a.teachers.is_empty() {
        cfg.data.teachers = a.teachers.clone();
    }
    if let Some(w) = a.w {
        cfg.finetune.kd.w = w;
    }
    if let Some(seed) = a.seed {
        cfg.finetune.seed = seed;
    }
    cfg.validate(Stage::Finetune)?;
    let ft = cfg.finetune.clone();
    let (vocab, init) = base_model(&cfg)?;
    let train = load_dataset(&cfg.data.train[0], vocab)?;
    let dev = load_all(&cfg.data.dev, vocab)?;
    let model = match init {
        Some(m) => m,
        None => {
            let head = ft.head.clone().unwrap_or_else(|| train.task().as_str().to_string());
            let heads = BTreeMap::from([(head, train.task())]);
            Model::new(cfg.model.as_ref().expect("validated").to_model_config(heads), ft.seed)?
        }
    };
    let store = if ft.kd.mode == KdMode::None {
        None
    } else {
        Some(SoftTargetStore::from_files(&cfg.data.teachers)?)
    };
    let (model, mut report) = finetune(&ft, model, &train, store.as_ref())?;
    report.metrics = evaluate_all(&model, &dev, cfg.eval.max_answer_len)?;
    write_outputs(&cfg.out_dir, &model, ft.seed, &report)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Metrics> {
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let ds = load_dataset(&a.dataset, model.config().vocab_size)?;
    let head = match &a.head {
        Some(h) => h.clone(),
        None => resolve_head(model.config(), &ds)?,
    };
    let metrics = evaluate(&model, &head, &ds, a.max_answer_len)?;
    println!("{}", serde_json::to_string_pretty(&metrics).expect("serializable"));
    if let Some(out) = &a.out {
        write_json(&metrics, out)?;
    }
    Ok(metrics)
}

fn gradcheck_config(a: &GradcheckArgs) -> Result<ModelConfig> {
    match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", p.display())]))
        }
        None => Ok(ModelConfig::new(a.vocab_size, a.d_model, a.n_layers, a.max_seq_len, &TaskKind::ALL)),
    }
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let config = gradcheck_config(a)?;
    config.validate()?;
    let report: GradCheckReport = if a.inject_fault {
        gradcheck_with(&config, a.seed, |model, ids, head, up| {
            let mut g = model.gradient(ids, head, up)?;
            if let Some((_, arr)) = g.iter_mut().next() {
                if let Some(v) = arr.iter_mut().next() {
                    *v += 1.0;
                }
            }
            Ok(g)
        })?
    } else {
        gradcheck(&config, a.seed)?
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    if let Some(out) = &a.out {
        write_json(&report, out)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Setup(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error(),
            report.tolerance
        )))
    }
}
