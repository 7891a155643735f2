//! Training loops.
//!
//! [`Trainer`] runs the multi-task procedure: each optimizer step draws
//! `pass_step` datasets at random, computes the mean minibatch loss gradient
//! for each draw, averages the pass gradients, clips, and applies one Adam
//! update. Single-dataset finetuning is the same engine with one dataset and
//! one pass per step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Example, Sampler};
use crate::error::{Error, Result};
use crate::eval::Metrics;
use crate::kd::{Combiner, SoftTargetStore, SoftTargets};
use crate::losses::{annealing_hard_weight, combined_loss, hard_loss, soft_loss, KdConfig, KdMode, LossResult};
use crate::nn::{GradSet, HeadOutput, Model, ModelConfig};
use crate::optim::{adam_step, clip_global_norm, schedule_lr, GradAccumulator, OptimHyper, OptimState};
use crate::rng::DetRng;
use crate::TaskKind;

/// Random stream layout of a run seeded `seed`: the dataset chooser reads
/// stream 0, dropout masks stream 1, and the sampler of dataset `i` stream
/// `100 + i`.
pub const CHOOSER_STREAM: u64 = 0;
pub const DROPOUT_STREAM: u64 = 1;
pub const SAMPLER_STREAM_BASE: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One head per task kind, shared by all datasets of that kind.
    #[default]
    Shared,
    /// One head per dataset.
    PerDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Average the gradients of `pass_step` passes per update.
    #[default]
    Averaged,
    /// Update after every pass.
    SingleTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetDraw {
    #[default]
    WithReplacement,
    /// Distinct datasets within one step.
    WithoutReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub step_max: usize,
    /// Datasets drawn per step; also the number of accumulated passes.
    pub pass_step: usize,
    pub examples_per_pass: usize,
    pub seed: u64,
    pub head_mode: HeadMode,
    pub step_mode: StepMode,
    pub draw: DatasetDraw,
    pub label_smoothing: f64,
    pub optim: OptimHyper,
    pub kd: KdConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            step_max: 100,
            pass_step: 4,
            examples_per_pass: 16,
            seed: 0,
            head_mode: HeadMode::Shared,
            step_mode: StepMode::Averaged,
            draw: DatasetDraw::WithReplacement,
            label_smoothing: 0.0,
            optim: OptimHyper::pretraining(),
            kd: KdConfig::pretraining(KdMode::None),
        }
    }
}

impl LoopConfig {
    pub fn effective_pass_step(&self) -> usize {
        match self.step_mode {
            StepMode::Averaged => self.pass_step,
            StepMode::SingleTask => 1,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.step_max < 1 {
            errs.push("step_max must be at least 1".to_string());
        }
        if self.pass_step < 1 {
            errs.push("pass_step must be at least 1".to_string());
        }
        if self.examples_per_pass < 1 {
            errs.push("examples_per_pass must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            errs.push(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        errs.extend(self.optim.validate());
        errs.extend(self.kd.validate());
        errs
    }

    pub fn head_name(&self, dataset: &Dataset) -> String {
        match self.head_mode {
            HeadMode::Shared => dataset.task().as_str().to_string(),
            HeadMode::PerDataset => dataset.name().to_string(),
        }
    }

    /// The head registry a model needs to train on `datasets`.
    pub fn heads_for(&self, datasets: &[&Dataset]) -> Result<BTreeMap<String, TaskKind>> {
        let mut heads = BTreeMap::new();
        for ds in datasets {
            let name = self.head_name(ds);
            if let Some(prev) = heads.insert(name.clone(), ds.task()) {
                if prev != ds.task() {
                    return Err(Error::TaskMismatch {
                        expected: prev.to_string(),
                        found: format!("{} for head `{name}`", ds.task()),
                    });
                }
            }
        }
        Ok(heads)
    }
}

/// Picks the head used for `dataset`: a head named after the dataset, then
/// one named after its task kind, then the first head of that kind.
pub fn resolve_head(config: &ModelConfig, dataset: &Dataset) -> Result<String> {
    let task = dataset.task();
    [dataset.name(), task.as_str()]
        .into_iter()
        .find(|n| config.heads.get(*n) == Some(&task))
        .map(str::to_string)
        .or_else(|| config.heads.iter().find(|(_, t)| **t == task).map(|(n, _)| n.clone()))
        .ok_or_else(|| Error::UnknownHead(format!("no head for task {task} (dataset `{}`)", dataset.name())))
}

/// One training dataset with its optional combined teacher targets.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub dataset: &'a Dataset,
    pub soft: Option<&'a SoftTargets>,
    /// Overrides the head chosen by [`HeadMode`].
    pub head: Option<&'a str>,
}

impl<'a> TrainSet<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self {
            dataset,
            soft: None,
            head: None,
        }
    }

    pub fn with_soft(mut self, soft: &'a SoftTargets) -> Self {
        self.soft = Some(soft);
        self
    }

    pub fn with_head(mut self, head: &'a str) -> Self {
        self.head = Some(head);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    /// 1-based index of the update this pass contributed to.
    pub step: usize,
    pub pass: usize,
    pub dataset: String,
    pub task: TaskKind,
    pub loss: f64,
    pub lr: f64,
}

/// Everything besides parameters and Adam moments needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub config: LoopConfig,
    pub datasets: Vec<String>,
    /// Completed updates.
    pub step: usize,
    pub chooser: DetRng,
    pub dropout: DetRng,
    pub samplers: Vec<Sampler>,
    pub losses: Vec<LossEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub steps: usize,
    pub losses: Vec<LossEntry>,
    pub metrics: Vec<Metrics>,
    /// Weighted-KD examples where no teacher was correct.
    pub kd_fallbacks: usize,
    /// Logged but kept out of the JSON so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Tab-separated `step dataset task loss lr`, one line per pass.
    pub fn write_loss_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("step\tdataset\ttask\tloss\tlr\n");
        for e in &self.losses {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.step, e.dataset, e.task, e.loss, e.lr));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|e| e.loss)
    }
}

/// A resumable training run.
pub struct Trainer<'a> {
    model: Model,
    optim: OptimState,
    sets: Vec<TrainSet<'a>>,
    heads: Vec<String>,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: LoopConfig, model: Model, sets: Vec<TrainSet<'a>>) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let samplers = (0..sets.len())
            .map(|i| Sampler::new(DetRng::new(config.seed, SAMPLER_STREAM_BASE + i as u64)))
            .collect();
        let state = TrainState {
            datasets: sets.iter().map(|s| s.dataset.name().to_string()).collect(),
            step: 0,
            chooser: DetRng::new(config.seed, CHOOSER_STREAM),
            dropout: DetRng::new(config.seed, DROPOUT_STREAM),
            samplers,
            losses: Vec::new(),
            config,
        };
        let optim = OptimState::new(model.params());
        Self::assemble(model, optim, sets, state)
    }

    /// Continues the run stored in `checkpoint` on the same datasets.
    pub fn resume(checkpoint: &Checkpoint, sets: Vec<TrainSet<'a>>) -> Result<Self> {
        let bad = |reason: String| Error::Setup(format!("cannot resume: {reason}"));
        let model = checkpoint.model()?;
        let state = checkpoint.train.clone().ok_or_else(|| bad("checkpoint has no training state".into()))?;
        let optim = checkpoint
            .optim_state(model.params())?
            .ok_or_else(|| bad("checkpoint has no optimizer state".into()))?;
        let names: Vec<&str> = sets.iter().map(|s| s.dataset.name()).collect();
        if names != state.datasets.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(bad(format!("datasets {names:?} differ from {:?}", state.datasets)));
        }
        if optim.step as usize != state.step {
            return Err(bad("optimizer and loop step counters disagree".into()));
        }
        Self::assemble(model, optim, sets, state)
    }

    fn assemble(model: Model, optim: OptimState, sets: Vec<TrainSet<'a>>, state: TrainState) -> Result<Self> {
        let config = &state.config;
        if sets.is_empty() {
            return Err(Error::Setup("at least one training dataset is required".into()));
        }
        if state.samplers.len() != sets.len() {
            return Err(Error::Setup("sampler count does not match datasets".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut heads = Vec::with_capacity(sets.len());
        for set in &sets {
            let ds = set.dataset;
            if !seen.insert(ds.name()) {
                return Err(Error::Setup(format!("dataset name `{}` used twice", ds.name())));
            }
            let head = set.head.map_or_else(|| config.head_name(ds), str::to_string);
            let task = model.head_task(&head)?;
            if task != ds.task() {
                return Err(Error::TaskMismatch {
                    expected: format!("{task} (head `{head}`)"),
                    found: format!("{} (dataset `{}`)", ds.task(), ds.name()),
                });
            }
            if config.kd.mode != KdMode::None {
                let soft = set.soft.ok_or_else(|| {
                    Error::MissingSoftTargets(format!("dataset `{}` has no soft targets", ds.name()))
                })?;
                let missing: Vec<&str> = ds
                    .examples()
                    .iter()
                    .filter(|e| soft.get(&e.id).is_none())
                    .map(|e| e.id.as_str())
                    .collect();
                if !missing.is_empty() {
                    return Err(Error::MissingSoftTargets(format!(
                        "dataset `{}` lacks {} examples, e.g. {}",
                        ds.name(),
                        missing.len(),
                        missing[..missing.len().min(5)].join(", ")
                    )));
                }
            }
            heads.push(head);
        }
        if config.draw == DatasetDraw::WithoutReplacement && config.effective_pass_step() > sets.len() {
            return Err(Error::Setup(format!(
                "pass_step {} exceeds {} datasets with draws without replacement",
                config.effective_pass_step(),
                sets.len()
            )));
        }
        Ok(Self {
            model,
            optim,
            sets,
            heads,
            state,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn optim_state(&self) -> &OptimState {
        &self.optim
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &LoopConfig {
        &self.state.config
    }

    pub fn heads(&self) -> &[String] {
        &self.heads
    }

    pub fn step_index(&self) -> usize {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.state.config.step_max
    }

    /// Snapshot of the run, resumable with [`Trainer::resume`].
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.state.config.seed).with_training(&self.optim, &self.state)
    }

    /// Draws the `(dataset index, example indices)` pairs for the next step.
    pub fn draw_passes(&mut self) -> Vec<(usize, Vec<usize>)> {
        let n = self.sets.len();
        let passes = self.state.config.effective_pass_step();
        let chooser = &mut self.state.chooser;
        let picks: Vec<usize> = match self.state.config.draw {
            DatasetDraw::WithReplacement => (0..passes).map(|_| chooser.gen_range(0..n)).collect(),
            DatasetDraw::WithoutReplacement => rand::seq::index::sample(chooser, n, passes).into_vec(),
        };
        picks
            .into_iter()
            .map(|d| {
                let idx = self.state.samplers[d].next_indices(self.sets[d].dataset.len(), self.state.config.examples_per_pass);
                (d, idx)
            })
            .collect()
    }

    /// One update from freshly drawn batches.
    pub fn step(&mut self) -> Result<()> {
        let passes = self.draw_passes();
        self.step_with(&passes)
    }

    /// One update from explicit batches, bypassing the random draws.
    pub fn step_with(&mut self, passes: &[(usize, Vec<usize>)]) -> Result<()> {
        if self.is_done() {
            return Err(Error::Setup(format!("all {} steps already taken", self.state.config.step_max)));
        }
        if passes.is_empty() {
            return Err(Error::Setup("a step needs at least one pass".into()));
        }
        let k = self.state.step;
        let config = self.state.config.clone();
        let lr = schedule_lr(k, config.step_max, &config.optim);
        let mut acc = GradAccumulator::new();
        for (p, (set_idx, indices)) in passes.iter().enumerate() {
            let set = self
                .sets
                .get(*set_idx)
                .ok_or_else(|| Error::Setup(format!("dataset index {set_idx} out of range")))?;
            let examples = set.dataset.examples();
            if indices.is_empty() || indices.iter().any(|&i| i >= examples.len()) {
                return Err(Error::Setup(format!("bad batch for dataset `{}`", set.dataset.name())));
            }
            let batch: Vec<&Example> = indices.iter().map(|&i| &examples[i]).collect();
            let ctx = LossContext {
                kd: &config.kd,
                smoothing: config.label_smoothing,
                soft: set.soft,
                step: k,
                total_steps: config.step_max,
            };
            let (g, loss) = pass_gradient(&self.model, &self.heads[*set_idx], &batch, &ctx, &mut self.state.dropout)?;
            acc.accumulate(&g)?;
            self.state.losses.push(LossEntry {
                step: k + 1,
                pass: p + 1,
                dataset: set.dataset.name().to_string(),
                task: set.dataset.task(),
                loss,
                lr,
            });
        }
        let mut g = acc.average()?;
        clip_global_norm(&mut g, config.optim.clip_norm);
        adam_step(self.model.params_mut(), &g, &mut self.optim, &config.optim, lr)?;
        self.state.step += 1;
        Ok(())
    }

    /// Steps until `step` updates have been taken (capped at `step_max`).
    pub fn run_until(&mut self, step: usize) -> Result<()> {
        let target = step.min(self.state.config.step_max);
        while self.state.step < target {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.state.config.step_max)
    }

    pub fn into_parts(self) -> (Model, OptimState, TrainState) {
        (self.model, self.optim, self.state)
    }

    pub fn finish(self) -> (Model, RunReport) {
        let fallbacks = self.sets.iter().filter_map(|s| s.soft).map(|s| s.fallbacks).sum();
        let report = RunReport {
            seed: self.state.config.seed,
            steps: self.state.step,
            losses: self.state.losses,
            metrics: Vec::new(),
            kd_fallbacks: fallbacks,
            wall_clock_secs: 0.0,
        };
        (self.model, report)
    }
}

struct LossContext<'c> {
    kd: &'c KdConfig,
    smoothing: f64,
    soft: Option<&'c SoftTargets>,
    step: usize,
    total_steps: usize,
}

fn example_loss(output: &HeadOutput, ex: &Example, ctx: &LossContext) -> Result<LossResult> {
    let hard = hard_loss(output, ex.label, ctx.smoothing)?;
    let lambda = match ctx.kd.mode {
        KdMode::None => return Ok(hard),
        KdMode::Plain | KdMode::Weighted => ctx.kd.lambda,
        KdMode::Annealing => 1.0 - annealing_hard_weight(ctx.step, ctx.total_steps),
    };
    let teacher = ctx
        .soft
        .and_then(|s| s.get(&ex.id))
        .ok_or_else(|| Error::MissingSoftTargets(format!("example `{}`", ex.id)))?;
    let soft = soft_loss(output, teacher, ctx.kd.temperature, ctx.kd.scale_by_t2)?;
    combined_loss(&hard, &soft, lambda)
}

/// Mean loss and mean gradient over one minibatch.
fn pass_gradient(
    model: &Model,
    head: &str,
    batch: &[&Example],
    ctx: &LossContext,
    dropout: &mut dyn RngCore,
) -> Result<(GradSet, f64)> {
    let mut sum = GradSet::zeros_like(model.params());
    let mut loss = 0.0;
    for ex in batch {
        let (out, tape) = model.forward(&ex.token_ids, head, Some(&mut *dropout))?;
        let l = example_loss(&out, ex, ctx)?;
        loss += l.value;
        sum.add_assign(&model.backward(&tape, &l.grad)?)?;
    }
    let inv = 1.0 / batch.len() as f64;
    sum.scale(inv);
    Ok((sum, loss * inv))
}

/// Multi-task pretraining for `config.step_max` updates.
pub fn mtl_pretrain(config: LoopConfig, model: Model, sets: Vec<TrainSet>) -> Result<(Model, RunReport)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config, model, sets)?;
    trainer.run()?;
    let (model, mut report) = trainer.finish();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    log::info!("pretraining: {} steps in {:.2}s", report.steps, report.wall_clock_secs);
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Head to train; resolved from the dataset when unset.
    pub head: Option<String>,
    pub optim: OptimHyper,
    pub kd: KdConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            seed: 0,
            label_smoothing: 0.0,
            head: None,
            optim: OptimHyper::finetuning(),
            kd: KdConfig::finetuning(KdMode::None),
        }
    }
}

impl FinetuneConfig {
    /// Updates needed for `epochs` full passes over `n` examples.
    pub fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs < 1 {
            errs.push("epochs must be at least 1".to_string());
        }
        if self.batch_size < 1 {
            errs.push("batch_size must be at least 1".to_string());
        }
        errs.extend(self.loop_config(1).validate().into_iter().filter(|e| !e.starts_with("step_max")));
        errs
    }

    pub fn loop_config(&self, n: usize) -> LoopConfig {
        LoopConfig {
            step_max: self.steps_for(n),
            pass_step: 1,
            examples_per_pass: self.batch_size,
            seed: self.seed,
            head_mode: HeadMode::Shared,
            step_mode: StepMode::Averaged,
            draw: DatasetDraw::WithReplacement,
            label_smoothing: self.label_smoothing,
            optim: self.optim,
            kd: self.kd,
        }
    }

    pub fn combiner(&self) -> Option<Combiner> {
        match self.kd.mode {
            KdMode::None => None,
            KdMode::Plain | KdMode::Annealing => Some(Combiner::Mean),
            KdMode::Weighted => Some(Combiner::Weighted(self.kd.w)),
        }
    }
}

/// Combines teacher logits as the KD mode requires. `None` when KD is off.
pub fn finetune_targets(
    config: &FinetuneConfig,
    dataset: &Dataset,
    teachers: Option<&SoftTargetStore>,
) -> Result<Option<SoftTargets>> {
    let Some(combiner) = config.combiner() else {
        return Ok(None);
    };
    let store = teachers.filter(|t| !t.is_empty()).ok_or(Error::NoTeachers)?;
    SoftTargets::build(store, dataset, combiner).map(Some)
}

/// Epoch-based single-dataset training with an optional teacher ensemble.
pub fn finetune(
    config: &FinetuneConfig,
    model: Model,
    dataset: &Dataset,
    teachers: Option<&SoftTargetStore>,
) -> Result<(Model, RunReport)> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let start = Instant::now();
    let targets = finetune_targets(config, dataset, teachers)?;
    let head = match &config.head {
        Some(h) => h.clone(),
        None => resolve_head(model.config(), dataset)?,
    };
    let mut set = TrainSet::new(dataset).with_head(&head);
    if let Some(t) = &targets {
        set = set.with_soft(t);
    }
    let mut trainer = Trainer::new(config.loop_config(dataset.len()), model, vec![set])?;
    trainer.run()?;
    let (model, mut report) = trainer.finish();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    log::info!(
        "finetuning `{}`: {} steps in {:.2}s",
        dataset.name(),
        report.steps,
        report.wall_clock_secs
    );
    Ok((model, report))
}
