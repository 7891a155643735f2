//! Generates one synthetic dataset per task kind, writes them as JSONL and
//! reads them back. Also shows text-mode tokenization.
//!
//! cargo run --example synth_data -- /tmp/road-data

use road::data::synth::{generate, SynthConfig};
use road::data::{load_dataset, tokenize, write_dataset};
use road::TaskKind;

fn main() -> road::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "road-data".to_string());
    std::fs::create_dir_all(&dir).map_err(|e| road::Error::Setup(e.to_string()))?;
    let cfg = SynthConfig {
        noise: 0.05,
        ..Default::default()
    };
    for (i, task) in TaskKind::ALL.into_iter().enumerate() {
        let name = task.as_str();
        let ds = generate(task, 200, i as u64, name, &cfg)?;
        let path = format!("{dir}/{name}.jsonl");
        write_dataset(&ds, &path)?;
        let back = load_dataset(&path, cfg.vocab_size)?;
        let first = &back.examples()[0];
        println!("{path}: {} {task} examples; first {:?} -> {:?}", back.len(), first.token_ids, first.label);
    }
    println!("tokenize(\"The cat sat.\") = {:?}", tokenize("The cat sat.", cfg.vocab_size));
    Ok(())
}
