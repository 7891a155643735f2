//! Trains a span head on synthetic reading-comprehension data and reports
//! exact match and token F1, including unanswerable questions.
//!
//! cargo run --release --example span_eval

use road::data::synth::{generate, SynthConfig};
use road::data::Label;
use road::eval::{decode_span, evaluate, span_f1, DEFAULT_MAX_ANSWER_LEN};
use road::nn::{HeadOutput, Model, ModelConfig};
use road::optim::OptimHyper;
use road::trainer::{finetune, FinetuneConfig};
use road::TaskKind;

fn main() -> road::Result<()> {
    let synth = SynthConfig {
        vocab_size: 40,
        seq_len: 16,
        no_answer_frac: 0.25,
        max_answer_len: 5,
        ..Default::default()
    };
    let all = generate(TaskKind::MrcSpan, 1200, 3, "qa", &synth)?;
    let (train, dev) = all.split_at(1000, "qa_train", "qa_dev")?;
    let config = FinetuneConfig {
        epochs: 4,
        optim: OptimHyper {
            base_lr: 3e-3,
            ..OptimHyper::finetuning()
        },
        ..Default::default()
    };
    let model = Model::new(ModelConfig::new(40, 16, 2, 16, &[TaskKind::MrcSpan]), 1)?;
    let before = evaluate(&model, "mrc_span", &dev, DEFAULT_MAX_ANSWER_LEN)?;
    let (model, _) = finetune(&config, model, &train, None)?;
    let after = evaluate(&model, "mrc_span", &dev, DEFAULT_MAX_ANSWER_LEN)?;
    println!("untrained: {:?}", before.values);
    println!("trained:   {:?}", after.values);

    for ex in dev.examples().iter().take(5) {
        let HeadOutput::Span { start, end } = model.predict(&ex.token_ids, "mrc_span")? else {
            unreachable!()
        };
        let pred = decode_span(&start, &end, DEFAULT_MAX_ANSWER_LEN);
        let Label::Span { start: s, end: e } = ex.label else { unreachable!() };
        println!("{}: gold ({s}, {e}) predicted {pred:?} F1 {:.2}", ex.id, span_f1(pred, (s, e)));
    }
    Ok(())
}
