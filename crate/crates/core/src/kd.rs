//! Teacher soft targets: generation, storage, and combination of several
//! teachers into one target per example.
//!
//! Two combiners are provided. [`mean_combine`] averages teacher logits.
//! [`weighted_kd_combine`] first checks every teacher against the gold label:
//! incorrect teachers are scaled by `W < 1`, correct ones by
//! `Ŵ = (m - n_incorrect * W) / n_correct`, and the scaled logits are
//! averaged. The scale factors always sum to `m`, so the combined logits stay
//! in the same range as a plain mean.
//!
//! # Soft-target JSONL
//!
//! ```text
//! {"example_id": "nli-00001", "teacher_id": "t0", "logits": [0.3, -1.2, 0.9]}
//! {"example_id": "mrc-00007", "teacher_id": "t0", "start_logits": [..], "end_logits": [..]}
//! ```
//!
//! Logits are stored raw (untempered). Files may be concatenated; readers
//! index records by `(teacher_id, example_id)`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::nn::{HeadOutput, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetRecord {
    pub example_id: String,
    pub teacher_id: String,
    pub logits: HeadOutput,
}

/// Runs the model in inference mode over every example, in dataset order.
pub fn generate_soft_targets(
    model: &Model,
    head: &str,
    dataset: &Dataset,
    teacher_id: &str,
) -> Result<Vec<SoftTargetRecord>> {
    let task = model.head_task(head)?;
    if task != dataset.task() {
        return Err(Error::TaskMismatch {
            expected: dataset.task().to_string(),
            found: format!("head `{head}` ({task})"),
        });
    }
    dataset
        .examples()
        .iter()
        .map(|ex| {
            Ok(SoftTargetRecord {
                example_id: ex.id.clone(),
                teacher_id: teacher_id.to_string(),
                logits: model.predict(&ex.token_ids, head)?,
            })
        })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Whether the teacher's argmax prediction matches the gold label. For spans
/// both the start and the end argmax must match.
pub fn is_correct(logits: &HeadOutput, label: Label) -> bool {
    match (logits, label) {
        (HeadOutput::Class(l), Label::Class(c)) => !l.is_empty() && argmax(l) == c,
        (HeadOutput::Span { start, end }, Label::Span { start: s, end: e }) => {
            !start.is_empty() && argmax(start) == s && argmax(end) == e
        }
        _ => false,
    }
}

/// Per-teacher scales for weighted combination, and whether the
/// all-incorrect fallback (plain mean) was taken.
pub fn teacher_scales(correct: &[bool], w: f64) -> (Vec<f64>, bool) {
    let m = correct.len() as f64;
    let n_correct = correct.iter().filter(|&&c| c).count();
    if n_correct == 0 {
        return (vec![1.0; correct.len()], true);
    }
    let n_incorrect = (correct.len() - n_correct) as f64;
    let w_hat = (m - n_incorrect * w) / n_correct as f64;
    (correct.iter().map(|&c| if c { w_hat } else { w }).collect(), false)
}

fn scaled_mean(teachers: &[&HeadOutput], scales: &[f64]) -> Result<HeadOutput> {
    let first = *teachers.first().ok_or(Error::NoTeachers)?;
    if let Some(bad) = teachers.iter().find(|t| !t.same_shape(first)) {
        return Err(Error::Shape(format!("teacher logits differ in shape: {bad:?} vs {first:?}")));
    }
    let m = teachers.len() as f64;
    let mut acc = first.zeros_like();
    for (t, &s) in teachers.iter().zip(scales) {
        match (&mut acc, t) {
            (HeadOutput::Class(a), HeadOutput::Class(l)) => a.scaled_add(s, l),
            (HeadOutput::Span { start: a, end: b }, HeadOutput::Span { start, end }) => {
                a.scaled_add(s, start);
                b.scaled_add(s, end);
            }
            _ => unreachable!("shapes checked"),
        }
    }
    Ok(match acc {
        HeadOutput::Class(a) => HeadOutput::Class(a / m),
        HeadOutput::Span { start, end } => HeadOutput::Span {
            start: start / m,
            end: end / m,
        },
    })
}

/// Elementwise mean of the teachers' logits.
pub fn mean_combine(teachers: &[&HeadOutput]) -> Result<HeadOutput> {
    scaled_mean(teachers, &vec![1.0; teachers.len()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCombination {
    pub logits: HeadOutput,
    pub scales: Vec<f64>,
    /// No teacher was correct, so the plain mean was used.
    pub fallback: bool,
}

/// Correctness-weighted teacher combination for one labeled example.
pub fn weighted_kd_combine(teachers: &[&HeadOutput], label: Label, w: f64) -> Result<WeightedCombination> {
    if teachers.is_empty() {
        return Err(Error::NoTeachers);
    }
    if !(w > 0.0 && w <= 1.0) {
        return Err(Error::Setup(format!("W = {w} not in (0, 1]")));
    }
    let correct: Vec<bool> = teachers.iter().map(|t| is_correct(t, label)).collect();
    let (scales, fallback) = teacher_scales(&correct, w);
    Ok(WeightedCombination {
        logits: scaled_mean(teachers, &scales)?,
        scales,
        fallback,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    example_id: String,
    teacher_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start_logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    end_logits: Option<Vec<f64>>,
}

pub fn write_soft_targets(records: &[SoftTargetRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let mut line = RecordLine {
            example_id: r.example_id.clone(),
            teacher_id: r.teacher_id.clone(),
            logits: None,
            start_logits: None,
            end_logits: None,
        };
        match &r.logits {
            HeadOutput::Class(l) => line.logits = Some(l.to_vec()),
            HeadOutput::Span { start, end } => {
                line.start_logits = Some(start.to_vec());
                line.end_logits = Some(end.to_vec());
            }
        }
        let json = serde_json::to_string(&line).expect("record serializes");
        writeln!(out, "{json}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_soft_targets(path: impl AsRef<Path>) -> Result<Vec<SoftTargetRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let line: RecordLine = serde_json::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
        let logits = match (line.logits, line.start_logits, line.end_logits) {
            (Some(l), None, None) => HeadOutput::Class(Array1::from(l)),
            (None, Some(s), Some(e)) if s.len() == e.len() => HeadOutput::Span {
                start: Array1::from(s),
                end: Array1::from(e),
            },
            _ => return Err(parse_err("need `logits` or equal-length `start_logits`/`end_logits`".into())),
        };
        let finite = match &logits {
            HeadOutput::Class(l) => l.iter().all(|v| v.is_finite()),
            HeadOutput::Span { start, end } => start.iter().chain(end.iter()).all(|v| v.is_finite()),
        };
        if !finite {
            return Err(parse_err("non-finite logits".into()));
        }
        out.push(SoftTargetRecord {
            example_id: line.example_id,
            teacher_id: line.teacher_id,
            logits,
        });
    }
    Ok(out)
}

/// Soft-target records from one or more teachers, indexed by
/// `(teacher_id, example_id)`. Teachers keep their first-seen order.
#[derive(Debug, Clone, Default)]
pub struct SoftTargetStore {
    teachers: Vec<String>,
    records: HashMap<(String, String), HeadOutput>,
}

impl SoftTargetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = SoftTargetRecord>) -> Result<Self> {
        let mut store = Self::new();
        store.extend(records)?;
        Ok(store)
    }

    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut store = Self::new();
        for p in paths {
            store.extend(read_soft_targets(p)?)?;
        }
        Ok(store)
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = SoftTargetRecord>) -> Result<()> {
        for r in records {
            if !self.teachers.contains(&r.teacher_id) {
                self.teachers.push(r.teacher_id.clone());
            }
            let key = (r.teacher_id, r.example_id);
            if self.records.contains_key(&key) {
                return Err(Error::Setup(format!(
                    "duplicate soft target for teacher `{}`, example `{}`",
                    key.0, key.1
                )));
            }
            self.records.insert(key, r.logits);
        }
        Ok(())
    }

    pub fn teachers(&self) -> &[String] {
        &self.teachers
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, teacher_id: &str, example_id: &str) -> Option<&HeadOutput> {
        self.records.get(&(teacher_id.to_string(), example_id.to_string()))
    }

    /// Every teacher's logits for one example, in teacher order.
    pub fn teacher_logits(&self, example_id: &str) -> Option<Vec<&HeadOutput>> {
        self.teachers.iter().map(|t| self.get(t, example_id)).collect()
    }

    /// `(teacher, example id)` pairs missing for this dataset, or shape mismatches.
    pub fn check_coverage(&self, dataset: &Dataset) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::MissingSoftTargets(format!("no teachers for dataset `{}`", dataset.name())));
        }
        let mut missing = Vec::new();
        for t in &self.teachers {
            for ex in dataset.examples() {
                match self.get(t, &ex.id) {
                    None => missing.push(format!("{t}/{}", ex.id)),
                    Some(l) => {
                        let ok = match (l, ex.label) {
                            (HeadOutput::Class(v), Label::Class(_)) => Some(v.len()) == dataset.task().n_classes(),
                            (HeadOutput::Span { start, .. }, Label::Span { .. }) => start.len() == ex.token_ids.len(),
                            _ => false,
                        };
                        if !ok {
                            return Err(Error::Shape(format!(
                                "teacher `{t}` logits for `{}` do not fit a {} example",
                                ex.id,
                                dataset.task()
                            )));
                        }
                    }
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            let shown: Vec<_> = missing.iter().take(10).cloned().collect();
            Err(Error::MissingSoftTargets(format!(
                "dataset `{}`: {} missing (teacher/example), e.g. {}",
                dataset.name(),
                missing.len(),
                shown.join(", ")
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Combiner {
    Mean,
    /// Correctness weighting with incorrect-teacher scale `W`.
    Weighted(f64),
}

/// One combined teacher target per example id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftTargets {
    pub by_id: BTreeMap<String, HeadOutput>,
    /// Examples where weighted combination fell back to the plain mean.
    pub fallbacks: usize,
}

impl SoftTargets {
    /// Combines every teacher in `store` for each example of `dataset`.
    pub fn build(store: &SoftTargetStore, dataset: &Dataset, combiner: Combiner) -> Result<Self> {
        store.check_coverage(dataset)?;
        let mut out = SoftTargets::default();
        for ex in dataset.examples() {
            let teachers = store.teacher_logits(&ex.id).expect("coverage checked");
            let logits = match combiner {
                Combiner::Mean => mean_combine(&teachers)?,
                Combiner::Weighted(w) => {
                    let c = weighted_kd_combine(&teachers, ex.label, w)?;
                    out.fallbacks += usize::from(c.fallback);
                    c.logits
                }
            };
            out.by_id.insert(ex.id.clone(), logits);
        }
        Ok(out)
    }

    pub fn get(&self, example_id: &str) -> Option<&HeadOutput> {
        self.by_id.get(example_id)
    }
}
