//! Interrupts a multi-task run halfway, saves a checkpoint, resumes from the
//! file and confirms the result matches an uninterrupted run exactly.
//!
//! cargo run --example resume_checkpoint

use road::checkpoint::Checkpoint;
use road::data::synth::{generate, SynthConfig};
use road::nn::{Model, ModelConfig};
use road::trainer::{LoopConfig, TrainSet, Trainer};
use road::TaskKind;

fn main() -> road::Result<()> {
    let cfg = SynthConfig {
        vocab_size: 40,
        ..Default::default()
    };
    let nli = generate(TaskKind::Nli, 64, 1, "nli", &cfg)?;
    let pi = generate(TaskKind::Pi, 64, 2, "pi", &cfg)?;
    let model = Model::new(ModelConfig::new(40, 8, 2, 16, &[TaskKind::Nli, TaskKind::Pi]), 3)?;
    let config = LoopConfig {
        step_max: 20,
        pass_step: 2,
        examples_per_pass: 8,
        seed: 5,
        ..Default::default()
    };
    let sets = || vec![TrainSet::new(&nli), TrainSet::new(&pi)];

    let mut full = Trainer::new(config.clone(), model.clone(), sets())?;
    full.run()?;

    let path = std::env::temp_dir().join("road-resume-example.json");
    let mut first = Trainer::new(config, model, sets())?;
    first.run_until(10)?;
    first.checkpoint().save(&path)?;
    println!("saved step {} to {}", first.step_index(), path.display());

    let mut resumed = Trainer::resume(&Checkpoint::load(&path)?, sets())?;
    resumed.run()?;
    let same = resumed.model() == full.model() && resumed.optim_state() == full.optim_state();
    println!("resumed run identical to uninterrupted run: {same}");
    std::fs::remove_file(&path).ok();
    Ok(())
}
