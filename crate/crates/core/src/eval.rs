//! Accuracy, exact match and token F1, span decoding, and multi-seed
//! aggregation.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::kd::argmax;
use crate::nn::{HeadOutput, Model};

pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

/// Named metric values for one dataset, e.g. `accuracy` or `exact_match`/`f1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dataset: String,
    pub n: usize,
    pub values: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

/// Best `(start, end)` under `start[s] + end[e]`. Candidates are the
/// no-answer pair `(0, 0)` and every `1 <= s <= e <= s + max_answer_len`.
/// Ties keep the earliest candidate in that order.
pub fn decode_span(start: &Array1<f64>, end: &Array1<f64>, max_answer_len: usize) -> (usize, usize) {
    let n = start.len().min(end.len());
    let mut best = (0, 0);
    let mut best_score = start[0] + end[0];
    for s in 1..n {
        let last = (s + max_answer_len).min(n - 1);
        for e in s..=last {
            let score = start[s] + end[e];
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

fn span_tokens(s: usize, e: usize) -> BTreeSet<usize> {
    if (s, e) == (0, 0) {
        BTreeSet::new()
    } else {
        (s..=e).collect()
    }
}

pub fn span_exact_match(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    f64::from(u8::from(pred == gold))
}

/// Token-index overlap F1. Both no-answer scores 1, exactly one scores 0.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let p = span_tokens(pred.0, pred.1);
    let g = span_tokens(gold.0, gold.1);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = p.intersection(&g).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / p.len() as f64;
    let recall = common / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / pred.len() as f64
}

/// Mean EM and F1 over prediction/gold span pairs.
pub fn span_scores(pred: &[(usize, usize)], gold: &[(usize, usize)]) -> (f64, f64) {
    if pred.is_empty() {
        return (0.0, 0.0);
    }
    let n = pred.len() as f64;
    let em: f64 = pred.iter().zip(gold).map(|(&p, &g)| span_exact_match(p, g)).sum();
    let f1: f64 = pred.iter().zip(gold).map(|(&p, &g)| span_f1(p, g)).sum();
    (em / n, f1 / n)
}

/// Evaluates `model` through `head` on every example of `dataset`, with
/// dropout off.
pub fn evaluate(model: &Model, head: &str, dataset: &Dataset, max_answer_len: usize) -> Result<Metrics> {
    let task = model.head_task(head)?;
    if task != dataset.task() {
        return Err(Error::TaskMismatch {
            expected: task.to_string(),
            found: format!("{} (dataset `{}`)", dataset.task(), dataset.name()),
        });
    }
    let mut values = BTreeMap::new();
    if task.is_span() {
        let mut pred = Vec::with_capacity(dataset.len());
        let mut gold = Vec::with_capacity(dataset.len());
        for ex in dataset.examples() {
            let HeadOutput::Span { start, end } = model.predict(&ex.token_ids, head)? else {
                unreachable!("span head returns span logits")
            };
            pred.push(decode_span(&start, &end, max_answer_len));
            let Label::Span { start, end } = ex.label else {
                unreachable!("validated span dataset")
            };
            gold.push((start, end));
        }
        let (em, f1) = span_scores(&pred, &gold);
        values.insert("exact_match".to_string(), em);
        values.insert("f1".to_string(), f1);
    } else {
        let mut pred = Vec::with_capacity(dataset.len());
        let mut gold = Vec::with_capacity(dataset.len());
        for ex in dataset.examples() {
            let HeadOutput::Class(logits) = model.predict(&ex.token_ids, head)? else {
                unreachable!("class head returns class logits")
            };
            pred.push(argmax(&logits));
            let Label::Class(c) = ex.label else {
                unreachable!("validated class dataset")
            };
            gold.push(c);
        }
        values.insert("accuracy".to_string(), accuracy(&pred, &gold));
    }
    Ok(Metrics {
        dataset: dataset.name().to_string(),
        n: dataset.len(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub runs: Vec<SeedRun>,
    pub mean: BTreeMap<String, f64>,
    /// Population standard deviation.
    pub std: BTreeMap<String, f64>,
}

/// Runs `pipeline` with seeds `base_seed .. base_seed + n_runs` and
/// aggregates every metric name the runs report.
pub fn multi_seed<F>(base_seed: u64, n_runs: usize, mut pipeline: F) -> Result<MultiSeedSummary>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if n_runs == 0 {
        return Err(Error::Setup("multi_seed needs at least one run".into()));
    }
    let mut runs = Vec::with_capacity(n_runs);
    for i in 0..n_runs as u64 {
        let seed = base_seed + i;
        runs.push(SeedRun {
            seed,
            values: pipeline(seed)?,
        });
    }
    Ok(summarize(runs))
}

pub fn summarize(runs: Vec<SeedRun>) -> MultiSeedSummary {
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in &runs {
        for (k, &v) in &run.values {
            series.entry(k.clone()).or_default().push(v);
        }
    }
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for (k, xs) in series {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        mean.insert(k.clone(), m);
        std.insert(k, var.sqrt());
    }
    MultiSeedSummary { runs, mean, std }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::nn::ModelConfig;
    use crate::TaskKind;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn exact_span() {
        assert_eq!(span_exact_match((2, 4), (2, 4)), 1.0);
        assert_eq!(span_f1((2, 4), (2, 4)), 1.0);
        assert_eq!(span_exact_match((2, 4), (2, 5)), 0.0);
    }

    #[test]
    fn partial_overlap() {
        let f1 = span_f1((4, 6), (3, 5));
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(span_f1((1, 2), (5, 6)), 0.0);
    }

    #[test]
    fn no_answer_conventions() {
        assert_eq!(span_f1((0, 0), (0, 0)), 1.0);
        assert_eq!(span_exact_match((0, 0), (0, 0)), 1.0);
        assert_eq!(span_f1((0, 0), (2, 3)), 0.0);
        assert_eq!(span_f1((2, 3), (0, 0)), 0.0);
    }

    #[test]
    fn accuracy_edges() {
        assert_eq!(accuracy(&[1, 2, 0], &[0, 0, 1]), 0.0);
        assert_eq!(accuracy(&[1, 2, 0], &[1, 2, 0]), 1.0);
        assert_eq!(accuracy(&[1, 2], &[1, 0]), 0.5);
    }

    #[test]
    fn decode_respects_order_and_length() {
        // best unconstrained pair would be end before start
        let start = array![0.0, 0.0, 0.0, 5.0];
        let end = array![0.0, 0.0, 4.0, 1.0];
        assert_eq!(decode_span(&start, &end, 30), (3, 3));
        // length cap excludes (1, 3)
        let start = array![0.0, 3.0, 0.0, 0.0];
        let end = array![0.0, 0.0, 0.5, 3.0];
        assert_eq!(decode_span(&start, &end, 2), (1, 3));
        assert_eq!(decode_span(&start, &end, 1), (1, 2));
    }

    #[test]
    fn decode_prefers_null_when_it_wins() {
        let start = array![2.0, 0.5, 0.1];
        let end = array![2.0, 0.1, 0.5];
        assert_eq!(decode_span(&start, &end, 30), (0, 0));
        let single = array![1.0];
        assert_eq!(decode_span(&single, &single, 30), (0, 0));
    }

    #[test]
    fn evaluate_rejects_task_mismatch_and_is_pure() {
        let cfg = ModelConfig::new(16, 4, 1, 8, &[TaskKind::Nli, TaskKind::MrcSpan]);
        let model = Model::new(cfg, 3).unwrap();
        let ds = Dataset::new(
            "d",
            TaskKind::Nli,
            vec![
                Example {
                    id: "a".into(),
                    token_ids: vec![2, 5, 6],
                    label: Label::Class(1),
                },
                Example {
                    id: "b".into(),
                    token_ids: vec![2, 7],
                    label: Label::Class(0),
                },
            ],
        )
        .unwrap();
        assert!(matches!(evaluate(&model, "mrc_span", &ds, 30), Err(Error::TaskMismatch { .. })));
        let a = evaluate(&model, "nli", &ds, 30).unwrap();
        assert_eq!(a, evaluate(&model, "nli", &ds, 30).unwrap());
        assert_eq!(a.n, 2);
        assert!(a.get("accuracy").is_some());
    }

    #[test]
    fn multi_seed_aggregation() {
        let one = multi_seed(10, 1, |s| Ok(BTreeMap::from([("acc".to_string(), s as f64)]))).unwrap();
        assert_eq!(one.mean["acc"], 10.0);
        assert_eq!(one.std["acc"], 0.0);

        let same = multi_seed(0, 4, |_| Ok(BTreeMap::from([("acc".to_string(), 0.7)]))).unwrap();
        assert!((same.mean["acc"] - 0.7).abs() < 1e-15);
        assert!(same.std["acc"].abs() < 1e-15);

        let vals = [0.8, 0.9];
        let two = multi_seed(5, 2, |s| Ok(BTreeMap::from([("acc".to_string(), vals[(s - 5) as usize])]))).unwrap();
        assert!((two.mean["acc"] - 0.85).abs() < 1e-15);
        assert!((two.std["acc"] - 0.05).abs() < 1e-12);
        assert_eq!(two.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![5, 6]);

        assert!(multi_seed(0, 0, |_| Ok(BTreeMap::new())).is_err());
    }

    proptest! {
        #[test]
        fn decoded_span_is_valid(
            logits in prop::collection::vec(-5.0f64..5.0, 2..20),
            shift in 0usize..7,
            cap in 0usize..5,
        ) {
            let n = logits.len();
            let start = Array1::from(logits.clone());
            let end = Array1::from_shape_fn(n, |i| logits[(i + shift) % n]);
            let (s, e) = decode_span(&start, &end, cap);
            prop_assert!((s, e) == (0, 0) || (1 <= s && s <= e && e <= s + cap && e < n));
            // no valid candidate scores higher
            let best = start[s] + end[e];
            prop_assert!(start[0] + end[0] <= best);
            for a in 1..n {
                for b in a..n.min(a + cap + 1) {
                    prop_assert!(start[a] + end[b] <= best);
                }
            }
        }

        #[test]
        fn f1_bounds_and_symmetry(a in 0usize..8, la in 0usize..4, b in 0usize..8, lb in 0usize..4) {
            let p = (a, a + la);
            let g = (b, b + lb);
            let f = span_f1(p, g);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f, span_f1(g, p));
            prop_assert!(span_exact_match(p, g) <= f);
        }
    }
}
