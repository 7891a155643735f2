//! Builds a three-teacher ensemble where one teacher learned from 30% flipped
//! labels, then compares plain-mean and correctness-weighted soft targets and
//! the students distilled from each.
//!
//! cargo run --release --example weighted_kd

use road::data::synth::{generate, SynthConfig};
use road::eval::{evaluate, DEFAULT_MAX_ANSWER_LEN};
use road::kd::{generate_soft_targets, is_correct, Combiner, SoftTargetStore, SoftTargets};
use road::losses::{KdConfig, KdMode};
use road::nn::{Model, ModelConfig};
use road::optim::OptimHyper;
use road::trainer::{finetune, FinetuneConfig};
use road::TaskKind;

fn config(mode: KdMode, seed: u64, epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        batch_size: 16,
        seed,
        optim: OptimHyper {
            base_lr: 3e-3,
            ..OptimHyper::finetuning()
        },
        kd: KdConfig::finetuning(mode),
        ..Default::default()
    }
}

fn main() -> road::Result<()> {
    let synth = SynthConfig {
        vocab_size: 48,
        seq_len: 12,
        distractors: 1,
        ..Default::default()
    };
    let all = generate(TaskKind::Nli, 1500, 9, "nli", &synth)?;
    let (train, dev) = all.split_at(1000, "nli_train", "nli_dev")?;
    let noisy = train.with_label_noise(0.3, 5);
    let mc = ModelConfig::new(48, 16, 1, 12, &[TaskKind::Nli]);

    let mut store = SoftTargetStore::new();
    for (i, ds) in [&train, &train, &noisy].into_iter().enumerate() {
        let (teacher, _) = finetune(&config(KdMode::None, i as u64, 1), Model::new(mc.clone(), 10 + i as u64)?, ds, None)?;
        let acc = evaluate(&teacher, "nli", &dev, DEFAULT_MAX_ANSWER_LEN)?.values["accuracy"];
        println!("teacher {i} ({}): dev accuracy {acc:.3}", if i == 2 { "noisy labels" } else { "clean labels" });
        store.extend(generate_soft_targets(&teacher, "nli", &train, &format!("t{i}"))?)?;
    }

    let plain = SoftTargets::build(&store, &train, Combiner::Mean)?;
    let weighted = SoftTargets::build(&store, &train, Combiner::Weighted(0.75))?;
    let agree = |s: &SoftTargets| {
        train.examples().iter().filter(|e| is_correct(s.get(&e.id).unwrap(), e.label)).count()
    };
    println!(
        "soft targets agreeing with gold: plain {} / weighted {} of {} ({} weighted fallbacks)",
        agree(&plain),
        agree(&weighted),
        train.len(),
        weighted.fallbacks
    );

    for mode in [KdMode::None, KdMode::Plain, KdMode::Annealing, KdMode::Weighted] {
        let (student, report) = finetune(&config(mode, 42, 2), Model::new(mc.clone(), 99)?, &train, Some(&store))?;
        let acc = evaluate(&student, "nli", &dev, DEFAULT_MAX_ANSWER_LEN)?.values["accuracy"];
        println!("student kd={mode:?}: dev accuracy {acc:.3}, final loss {:.4}", report.final_loss().unwrap_or(f64::NAN));
    }
    Ok(())
}
