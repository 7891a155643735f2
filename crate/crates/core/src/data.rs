//! Examples, datasets, JSONL ingestion, minibatch sampling and synthetic
//! task generators.
//!
//! # Dataset JSONL
//!
//! One object per line:
//!
//! ```text
//! {"id": "ex-1", "task": "nli", "tokens": [2, 40, 1, 51], "label": 2}
//! {"id": "ex-2", "task": "mrc_span", "text": "who won", "text_pair": "the blue team won", "span": [5, 6]}
//! ```
//!
//! `tokens` sequences must start with the `cls` id. `text`/`text_pair` are
//! tokenized on load as `cls text [sep text_pair]`. A file uses either
//! `tokens` or `text` throughout, and a single task kind.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CLS_ID, N_RESERVED, SEP_ID, UNK_ID};
use crate::rng::DetRng;
use crate::task::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    /// Inclusive token span; `(0, 0)` means no answer.
    Span { start: usize, end: usize },
}

impl Label {
    pub const NO_ANSWER: Label = Label::Span { start: 0, end: 0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub label: Label,
}

impl Example {
    pub fn validate(&self, task: TaskKind) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidExample {
                id: self.id.clone(),
                reason,
            })
        };
        if self.id.is_empty() {
            return fail("empty id".into());
        }
        if self.token_ids.first() != Some(&CLS_ID) {
            return fail(format!("token sequence must start with cls id {CLS_ID}"));
        }
        match (task, self.label) {
            (TaskKind::MrcSpan, Label::Span { start, end }) => {
                let len = self.token_ids.len();
                if start > end {
                    return fail(format!("span end {end} < start {start}"));
                }
                if end >= len {
                    return fail(format!("span end {end} outside sequence of length {len}"));
                }
                if start == 0 && end != 0 {
                    return fail(format!("span ({start}, {end}) starts at the cls position"));
                }
            }
            (TaskKind::MrcSpan, Label::Class(_)) => return fail("mrc_span example needs a span label".into()),
            (_, Label::Span { .. }) => return fail(format!("{task} example needs a class label")),
            (_, Label::Class(c)) => {
                let k = task.n_classes().unwrap();
                if c >= k {
                    return fail(format!("class {c} out of range for {task} ({k} classes)"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    task: TaskKind,
    examples: Vec<Example>,
}

impl Dataset {
    /// Builds a dataset after validating every example and id uniqueness.
    pub fn new(name: impl Into<String>, task: TaskKind, examples: Vec<Example>) -> Result<Self> {
        let name = name.into();
        if examples.is_empty() {
            return Err(Error::Setup(format!("dataset `{name}` is empty")));
        }
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            ex.validate(task)?;
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::InvalidExample {
                    id: ex.id.clone(),
                    reason: format!("duplicate id in dataset `{name}`"),
                });
            }
        }
        Ok(Self { name, task, examples })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Longest token sequence in the dataset.
    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.token_ids.len()).max().unwrap_or(0)
    }

    /// Copy with each class label replaced, with probability `rate`, by a
    /// uniformly drawn different class. Span datasets are returned unchanged.
    pub fn with_label_noise(&self, rate: f64, seed: u64) -> Dataset {
        let Some(k) = self.task.n_classes() else {
            return self.clone();
        };
        let mut rng = DetRng::new(seed, 7);
        let examples = self
            .examples
            .iter()
            .map(|ex| {
                let mut ex = ex.clone();
                if let Label::Class(c) = ex.label {
                    if rng.gen::<f64>() < rate {
                        ex.label = Label::Class((c + rng.gen_range(1..k)) % k);
                    }
                }
                ex
            })
            .collect();
        Dataset {
            name: self.name.clone(),
            task: self.task,
            examples,
        }
    }

    /// Splits into the first `n` examples and the rest.
    pub fn split_at(&self, n: usize, first: &str, second: &str) -> Result<(Dataset, Dataset)> {
        let (a, b) = self.examples.split_at(n.min(self.len()));
        Ok((
            Dataset::new(first, self.task, a.to_vec())?,
            Dataset::new(second, self.task, b.to_vec())?,
        ))
    }
}

/// Fixed 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed-vocabulary tokenizer.
///
/// Text is lowercased and split into maximal alphanumeric runs; every other
/// non-whitespace character is a token of its own. Token `t` maps to
/// `4 + fnv1a64(t) mod (vocab_size - 4)`, so ids never collide with the
/// reserved pad/sep/cls/unk ids.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<usize> {
    let mut pieces = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            pieces.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            pieces.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        pieces.push(word);
    }
    let buckets = vocab_size.saturating_sub(N_RESERVED) as u64;
    pieces
        .iter()
        .map(|p| {
            if buckets == 0 {
                UNK_ID
            } else {
                N_RESERVED + (fnv1a64(p.as_bytes()) % buckets) as usize
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    id: String,
    task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_pair: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span: Option<[usize; 2]>,
}

/// Reads a dataset JSONL file. The dataset is named after the file stem.
pub fn load_dataset(path: impl AsRef<Path>, vocab_size: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut task: Option<TaskKind> = None;
    let mut uses_text: Option<bool> = None;
    let mut examples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(raw).map_err(|e| parse_err(line_no, e.to_string()))?;
        match task {
            None => task = Some(rec.task),
            Some(t) if t != rec.task => {
                return Err(parse_err(line_no, format!("mixed task kinds: {t} and {}", rec.task)))
            }
            _ => {}
        }
        let token_ids = match (rec.tokens, rec.text) {
            (Some(tokens), None) => {
                if rec.text_pair.is_some() {
                    return Err(parse_err(line_no, "`text_pair` requires `text`".into()));
                }
                if uses_text == Some(true) {
                    return Err(parse_err(line_no, "mixed `tokens` and `text` records".into()));
                }
                uses_text = Some(false);
                tokens
            }
            (None, Some(text)) => {
                if uses_text == Some(false) {
                    return Err(parse_err(line_no, "mixed `tokens` and `text` records".into()));
                }
                uses_text = Some(true);
                let mut ids = vec![CLS_ID];
                ids.extend(tokenize(&text, vocab_size));
                if let Some(pair) = rec.text_pair {
                    ids.push(SEP_ID);
                    ids.extend(tokenize(&pair, vocab_size));
                }
                ids
            }
            (Some(_), Some(_)) => return Err(parse_err(line_no, "both `tokens` and `text` given".into())),
            (None, None) => return Err(parse_err(line_no, "one of `tokens` or `text` is required".into())),
        };
        if let Some(bad) = token_ids.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidExample {
                id: rec.id,
                reason: format!("token id {bad} >= vocab size {vocab_size}"),
            });
        }
        let label = match (rec.task, rec.label, rec.span) {
            (TaskKind::MrcSpan, None, Some([start, end])) => Label::Span { start, end },
            (TaskKind::MrcSpan, _, _) => return Err(parse_err(line_no, "mrc_span records need `span` only".into())),
            (_, Some(c), None) => Label::Class(c),
            (t, _, _) => return Err(parse_err(line_no, format!("{t} records need `label` only"))),
        };
        examples.push(Example {
            id: rec.id,
            token_ids,
            label,
        });
    }
    let task = task.ok_or_else(|| parse_err(0, "no records".into()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Dataset::new(name, task, examples)
}

/// Writes a dataset as token-id JSONL.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ex in dataset.examples() {
        let (label, span) = match ex.label {
            Label::Class(c) => (Some(c), None),
            Label::Span { start, end } => (None, Some([start, end])),
        };
        let rec = ExampleRecord {
            id: ex.id.clone(),
            task: dataset.task(),
            tokens: Some(ex.token_ids.clone()),
            text: None,
            text_pair: None,
            label,
            span,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// A minibatch: indices into one dataset.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn task(&self) -> TaskKind {
        self.dataset.task()
    }

    pub fn examples(&self) -> impl Iterator<Item = &'a Example> + '_ {
        self.indices.iter().map(|&i| &self.dataset.examples()[i])
    }
}

/// Epoch-shuffled sampling without replacement.
///
/// Each epoch is a fresh permutation; a batch never crosses an epoch
/// boundary, so the last batch of an epoch may be short.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: DetRng,
}

impl Sampler {
    pub fn new(rng: DetRng) -> Self {
        Self {
            order: Vec::new(),
            cursor: 0,
            rng,
        }
    }

    pub fn next_indices(&mut self, dataset_len: usize, size: usize) -> Vec<usize> {
        let size = size.max(1);
        if self.order.len() != dataset_len || self.cursor >= self.order.len() {
            self.order = (0..dataset_len).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    pub fn sample<'a>(&mut self, dataset: &'a Dataset, size: usize) -> Batch<'a> {
        Batch {
            dataset,
            indices: self.next_indices(dataset.len(), size),
        }
    }
}

pub mod synth {
    //! Label-learnable synthetic datasets.
    //!
    //! Classification examples look like `cls filler.. sep filler..` with one
    //! class marker token (plus optional distractor markers) placed in the
    //! second segment. Span examples look like `cls Q q q sep context..` with
    //! an answer delimited by `OPEN .. CLOSE`; the gold span runs from the
    //! `OPEN` token to the `CLOSE` token. Marker ids are shared across
    //! datasets of the same task kind.

    use super::*;

    pub const QUESTION_MARK: usize = 4;
    pub const ANSWER_OPEN: usize = 5;
    pub const ANSWER_CLOSE: usize = 6;
    const NLI_BASE: usize = 7;
    const SA_BASE: usize = 10;
    const PI_BASE: usize = 15;
    /// First id used for filler tokens.
    pub const FILLER_BASE: usize = 17;
    pub const MIN_VOCAB: usize = FILLER_BASE + 8;

    pub fn marker(task: TaskKind, class: usize) -> Option<usize> {
        let base = match task {
            TaskKind::Nli => NLI_BASE,
            TaskKind::Sa => SA_BASE,
            TaskKind::Pi => PI_BASE,
            TaskKind::MrcSpan => return None,
        };
        (class < task.n_classes()?).then_some(base + class)
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    pub struct SynthConfig {
        pub vocab_size: usize,
        /// Maximum sequence length, including `cls`.
        pub seq_len: usize,
        /// Probability that a class label is flipped to another class.
        pub noise: f64,
        /// Extra markers of other classes; the true class gets one more.
        pub distractors: usize,
        /// Fraction of span examples without an answer.
        pub no_answer_frac: f64,
        /// Longest answer span, delimiters included.
        pub max_answer_len: usize,
    }

    impl Default for SynthConfig {
        fn default() -> Self {
            Self {
                vocab_size: 64,
                seq_len: 16,
                noise: 0.0,
                distractors: 0,
                no_answer_frac: 0.2,
                max_answer_len: 4,
            }
        }
    }

    /// Generates `n` examples named `{name}-{index}`. Deterministic in `seed`.
    pub fn generate(task: TaskKind, n: usize, seed: u64, name: &str, cfg: &SynthConfig) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Setup("synthetic dataset size must be at least 1".into()));
        }
        if cfg.vocab_size < MIN_VOCAB {
            return Err(Error::Setup(format!("synthetic data needs vocab_size >= {MIN_VOCAB}")));
        }
        if !(0.0..=1.0).contains(&cfg.noise) || !(0.0..=1.0).contains(&cfg.no_answer_frac) {
            return Err(Error::Setup("noise and no_answer_frac must lie in [0, 1]".into()));
        }
        let min_len = match task {
            TaskKind::MrcSpan => 5 + cfg.max_answer_len.max(2),
            _ => 4 + 2 * cfg.distractors + 1,
        };
        if cfg.seq_len < min_len {
            return Err(Error::Setup(format!("seq_len {} too short for {task} (need {min_len})", cfg.seq_len)));
        }
        let mut rng = DetRng::new(seed, 0);
        let examples = (0..n)
            .map(|i| {
                let id = format!("{name}-{i:05}");
                match task {
                    TaskKind::MrcSpan => span_example(id, cfg, &mut rng),
                    _ => class_example(id, task, cfg, &mut rng),
                }
            })
            .collect();
        Dataset::new(name, task, examples)
    }

    fn filler(cfg: &SynthConfig, rng: &mut DetRng) -> usize {
        rng.gen_range(FILLER_BASE..cfg.vocab_size)
    }

    fn class_example(id: String, task: TaskKind, cfg: &SynthConfig, rng: &mut DetRng) -> Example {
        let k = task.n_classes().unwrap();
        let min_len = (4 + 2 * cfg.distractors + 1).max(cfg.seq_len / 2);
        let len = rng.gen_range(min_len..=cfg.seq_len);
        let sep = rng.gen_range(2..=len / 2);
        let mut tokens: Vec<usize> = (0..len).map(|_| filler(cfg, rng)).collect();
        tokens[0] = CLS_ID;
        tokens[sep] = SEP_ID;

        let class = rng.gen_range(0..k);
        let mut markers = vec![marker(task, class).unwrap(); cfg.distractors + 1];
        for _ in 0..cfg.distractors {
            let other = (class + rng.gen_range(1..k)) % k;
            markers.push(marker(task, other).unwrap());
        }
        let mut slots: Vec<usize> = (sep + 1..len).collect();
        slots.shuffle(rng);
        for (slot, m) in slots.into_iter().zip(markers) {
            tokens[slot] = m;
        }

        let label = if rng.gen::<f64>() < cfg.noise {
            (class + rng.gen_range(1..k)) % k
        } else {
            class
        };
        Example {
            id,
            token_ids: tokens,
            label: Label::Class(label),
        }
    }

    fn span_example(id: String, cfg: &SynthConfig, rng: &mut DetRng) -> Example {
        let answer_len = cfg.max_answer_len.max(2);
        let min_len = (5 + answer_len).max(cfg.seq_len / 2);
        let len = rng.gen_range(min_len..=cfg.seq_len);
        let mut tokens: Vec<usize> = (0..len).map(|_| filler(cfg, rng)).collect();
        tokens[0] = CLS_ID;
        tokens[1] = QUESTION_MARK;
        tokens[3] = SEP_ID;
        let context_start = 4;

        let label = if rng.gen::<f64>() < cfg.no_answer_frac {
            Label::NO_ANSWER
        } else {
            let span_len = rng.gen_range(2..=answer_len);
            let start = rng.gen_range(context_start..=len - span_len);
            let end = start + span_len - 1;
            tokens[start] = ANSWER_OPEN;
            tokens[end] = ANSWER_CLOSE;
            Label::Span { start, end }
        };
        Example {
            id,
            token_ids: tokens,
            label,
        }
    }
}
