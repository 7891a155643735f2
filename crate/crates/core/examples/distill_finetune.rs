//! Trains a teacher on a synthetic 3-class task, then distills it into a
//! fresh student with plain KD under the same budget.
//!
//! cargo run --release --example distill_finetune

use road::data::synth::{generate, SynthConfig};
use road::eval::{evaluate, DEFAULT_MAX_ANSWER_LEN};
use road::kd::{generate_soft_targets, SoftTargetStore};
use road::losses::{KdConfig, KdMode};
use road::nn::{Model, ModelConfig};
use road::optim::OptimHyper;
use road::trainer::{finetune, FinetuneConfig};
use road::TaskKind;

fn main() -> road::Result<()> {
    let synth = SynthConfig {
        vocab_size: 48,
        seq_len: 12,
        noise: 0.02,
        ..Default::default()
    };
    let all = generate(TaskKind::Nli, 2500, 1, "nli", &synth)?;
    let (train, dev) = all.split_at(2000, "nli_train", "nli_dev")?;
    let model_config = ModelConfig::new(48, 16, 1, 12, &[TaskKind::Nli]);

    let config = |mode, seed| FinetuneConfig {
        epochs: 3,
        batch_size: 16,
        seed,
        optim: OptimHyper {
            base_lr: 3e-3,
            ..OptimHyper::finetuning()
        },
        kd: KdConfig::finetuning(mode),
        ..Default::default()
    };

    let start = std::time::Instant::now();
    let (teacher, _) = finetune(&config(KdMode::None, 0), Model::new(model_config.clone(), 100)?, &train, None)?;
    let teacher_acc = evaluate(&teacher, "nli", &dev, DEFAULT_MAX_ANSWER_LEN)?.values["accuracy"];
    println!("teacher dev accuracy {teacher_acc:.4} ({:.1}s)", start.elapsed().as_secs_f64());

    let store = SoftTargetStore::from_records(generate_soft_targets(&teacher, "nli", &train, "teacher")?)?;
    let (student, _) = finetune(
        &config(KdMode::Plain, 1),
        Model::new(model_config, 200)?,
        &train,
        Some(&store),
    )?;
    let student_acc = evaluate(&student, "nli", &dev, DEFAULT_MAX_ANSWER_LEN)?.values["accuracy"];
    println!("student dev accuracy {student_acc:.4} ({:.1}s)", start.elapsed().as_secs_f64());
    Ok(())
}
