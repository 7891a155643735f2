//! Checks reverse-mode gradients against central finite differences on a
//! few tiny encoder configurations.
//!
//! cargo run --example gradcheck

use road::gradcheck::gradcheck;
use road::nn::ModelConfig;
use road::TaskKind;

fn main() -> road::Result<()> {
    let configs = [
        ModelConfig::new(12, 4, 1, 3, &TaskKind::ALL),
        ModelConfig::new(20, 8, 2, 6, &[TaskKind::Nli, TaskKind::MrcSpan]),
        ModelConfig::new(8, 2, 2, 5, &[TaskKind::Sa]),
    ];
    for (seed, config) in configs.iter().enumerate() {
        let report = gradcheck(config, seed as u64)?;
        println!(
            "d_model={} n_layers={} max_seq_len={}: {}",
            config.d_model,
            config.n_layers,
            config.max_seq_len,
            if report.passed() { "ok" } else { "FAILED" }
        );
        for g in &report.groups {
            println!("  {:<16} {:>5} scalars  max rel error {:.2e}", g.group, g.n_scalars, g.max_rel_error);
        }
    }
    Ok(())
}
