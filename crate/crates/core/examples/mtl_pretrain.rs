//! Multi-task pretraining on four synthetic datasets with shared per-task
//! heads and averaged gradients, next to the per-dataset-head,
//! single-task-step ablation under the same number of passes.
//!
//! cargo run --release --example mtl_pretrain

use road::data::synth::{generate, SynthConfig};
use road::data::Dataset;
use road::eval::{evaluate, DEFAULT_MAX_ANSWER_LEN};
use road::nn::{Model, ModelConfig};
use road::optim::OptimHyper;
use road::trainer::{mtl_pretrain, resolve_head, HeadMode, LoopConfig, StepMode, TrainSet};
use road::TaskKind;

fn main() -> road::Result<()> {
    let cfg = SynthConfig {
        vocab_size: 48,
        seq_len: 14,
        ..Default::default()
    };
    let specs = [
        (TaskKind::Nli, "nli_a"),
        (TaskKind::Nli, "nli_b"),
        (TaskKind::Sa, "sa"),
        (TaskKind::MrcSpan, "qa"),
    ];
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (i, (task, name)) in specs.into_iter().enumerate() {
        let all = generate(task, 600, i as u64, name, &cfg)?;
        let (t, d) = all.split_at(500, name, &format!("{name}_dev"))?;
        train.push(t);
        dev.push(d);
    }
    let refs: Vec<&Dataset> = train.iter().collect();

    let road = LoopConfig {
        step_max: 300,
        pass_step: 4,
        examples_per_pass: 16,
        seed: 1,
        optim: OptimHyper {
            base_lr: 3e-3,
            ..OptimHyper::pretraining()
        },
        ..Default::default()
    };
    let ablation = LoopConfig {
        head_mode: HeadMode::PerDataset,
        step_mode: StepMode::SingleTask,
        step_max: road.step_max * road.pass_step,
        ..road.clone()
    };

    for (label, config) in [("shared heads, averaged steps", road), ("per-dataset heads, single-task steps", ablation)] {
        let mut mc = ModelConfig::new(48, 16, 2, 14, &[]);
        mc.heads = config.heads_for(&refs)?;
        let model = Model::new(mc, 7)?;
        let sets = train.iter().map(TrainSet::new).collect();
        let (model, report) = mtl_pretrain(config, model, sets)?;
        println!("{label}: {} updates, {:.1}s", report.steps, report.wall_clock_secs);
        for (t, d) in train.iter().zip(&dev) {
            // per-dataset heads are named after the training set
            let head = if model.config().heads.contains_key(t.name()) {
                t.name().to_string()
            } else {
                resolve_head(model.config(), d)?
            };
            let m = evaluate(&model, &head, d, DEFAULT_MAX_ANSWER_LEN)?;
            let values: Vec<String> = m.values.iter().map(|(k, v)| format!("{k}={v:.3}")).collect();
            println!("  {:<8} head {:<6} {}", d.name(), head, values.join(" "));
        }
    }
    Ok(())
}
