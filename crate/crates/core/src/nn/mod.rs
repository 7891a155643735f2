//! A small post-norm transformer encoder with per-task heads and exact
//! reverse-mode gradients.
//!
//! Pipeline: token embedding + fixed sinusoidal positions, then `n_layers`
//! blocks of single-head self-attention → residual → layer norm →
//! GELU feed-forward → residual → layer norm. Classification heads read the
//! hidden state at position 0 (the `cls` token); span heads project every
//! position to a start and an end logit.
//!
//! Everything runs in `f64` and one example at a time, so there is no padding
//! and no attention mask.

mod layers;
mod params;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskKind;

pub use layers::{gelu, gelu_grad, LN_EPS};
pub use params::{group_of, ArrayRecord, GradSet, Param, ParamSet, HEAD_PREFIX, TRUNK_PREFIX};

use layers::{
    apply_mask, dropout_mask, layer_norm, layer_norm_backward, linear, linear_backward, sinusoidal_positions,
    softmax_rows, softmax_rows_backward, LayerNormCache,
};

pub const PAD_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const UNK_ID: usize = 3;
/// Number of reserved ids at the bottom of the vocabulary.
pub const N_RESERVED: usize = 4;

fn default_dropout() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Feed-forward inner width; `4 * d_model` when unset.
    #[serde(default)]
    pub d_ff: Option<usize>,
    pub n_layers: usize,
    pub max_seq_len: usize,
    /// Hidden dropout applied to both sublayer outputs in training mode.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Dropout on attention probabilities in training mode.
    #[serde(default = "default_dropout")]
    pub attention_dropout: f64,
    /// Add sinusoidal positions to the embeddings. Disabling it is a test hook.
    #[serde(default = "default_true")]
    pub positions: bool,
    /// Head name to task kind. Shared-head training names heads after the
    /// task kind (`"nli"`); per-dataset training names them after datasets.
    pub heads: BTreeMap<String, TaskKind>,
}

impl ModelConfig {
    /// A config with one head per listed task kind, named after the kind.
    pub fn new(vocab_size: usize, d_model: usize, n_layers: usize, max_seq_len: usize, tasks: &[TaskKind]) -> Self {
        Self {
            vocab_size,
            d_model,
            d_ff: None,
            n_layers,
            max_seq_len,
            dropout: default_dropout(),
            attention_dropout: default_dropout(),
            positions: true,
            heads: tasks.iter().map(|t| (t.as_str().to_string(), *t)).collect(),
        }
    }

    pub fn ff_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn without_dropout(mut self) -> Self {
        self.dropout = 0.0;
        self.attention_dropout = 0.0;
        self
    }

    /// Depth index of the heads (and the largest depth overall).
    pub fn head_depth(&self) -> usize {
        self.n_layers + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::InvalidConfig { field, reason });
        if self.vocab_size < N_RESERVED {
            return bad("vocab_size", format!("{} < {N_RESERVED}", self.vocab_size));
        }
        if self.d_model < 2 {
            return bad("d_model", format!("{} < 2", self.d_model));
        }
        if self.ff_width() < 1 {
            return bad("d_ff", "must be positive".into());
        }
        if self.n_layers < 1 {
            return bad("n_layers", "must be at least 1".into());
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len", format!("{} < 2", self.max_seq_len));
        }
        for (field, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(field, format!("{p} not in [0, 1)"));
            }
        }
        if self.heads.is_empty() {
            return bad("heads", "at least one head is required".into());
        }
        if let Some(name) = self.heads.keys().find(|n| n.is_empty() || n.contains('.')) {
            return bad("heads", format!("invalid head name `{name}`"));
        }
        Ok(())
    }
}

/// Per-token hidden vectors, `len x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(pub Array2<f64>);

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

/// Output of a head: class logits or per-token start/end logits.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Class(Array1<f64>),
    Span { start: Array1<f64>, end: Array1<f64> },
}

impl HeadOutput {
    pub fn zeros_like(&self) -> Self {
        match self {
            HeadOutput::Class(l) => HeadOutput::Class(Array1::zeros(l.len())),
            HeadOutput::Span { start, end } => HeadOutput::Span {
                start: Array1::zeros(start.len()),
                end: Array1::zeros(end.len()),
            },
        }
    }

    pub fn same_shape(&self, other: &HeadOutput) -> bool {
        match (self, other) {
            (HeadOutput::Class(a), HeadOutput::Class(b)) => a.len() == b.len(),
            (HeadOutput::Span { start: s1, end: e1 }, HeadOutput::Span { start: s2, end: e2 }) => {
                s1.len() == s2.len() && e1.len() == e2.len()
            }
            _ => false,
        }
    }

    fn describe(&self) -> String {
        match self {
            HeadOutput::Class(l) => format!("class[{}]", l.len()),
            HeadOutput::Span { start, end } => format!("span[{}, {}]", start.len(), end.len()),
        }
    }
}

struct LayerTape {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    attn_used: Array2<f64>,
    ctx: Array2<f64>,
    out_mask: Option<Array2<f64>>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Tape {
    token_ids: Vec<usize>,
    head: String,
    layers: Vec<LayerTape>,
    hidden: Array2<f64>,
}

impl Tape {
    pub fn hidden(&self) -> HiddenStates {
        HiddenStates(self.hidden.clone())
    }
}

/// Encoder trunk plus heads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    positions: Array2<f64>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn layer_key(layer: usize, name: &str) -> String {
    format!("trunk.layer{layer}.{name}")
}

fn head_key(head: &str, name: &str) -> String {
    format!("{HEAD_PREFIX}{head}.{name}")
}

const EMBED_KEY: &str = "trunk.embed.tok";

/// Deterministic parameter initialization.
///
/// Weight matrices are uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// (the embedding uses `fan_in = d_model`); biases start at 0 and layer-norm
/// gains at 1.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let ff = config.ff_width();
    let mut params = ParamSet::new();

    let uniform = |rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng| -> ArrayD<f64> {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| (2.0 * rng.gen::<f64>() - 1.0) * scale).into_dyn()
    };
    let zeros = |n: usize| ArrayD::zeros(IxDyn(&[n]));
    let ones = |n: usize| ArrayD::ones(IxDyn(&[n]));

    params.insert(EMBED_KEY, uniform(config.vocab_size, d, d, &mut rng), 0);
    for layer in 0..config.n_layers {
        let depth = layer + 1;
        for name in ["q", "k", "v", "o"] {
            params.insert(layer_key(layer, &format!("attn.w{name}")), uniform(d, d, d, &mut rng), depth);
            params.insert(layer_key(layer, &format!("attn.b{name}")), zeros(d), depth);
        }
        params.insert(layer_key(layer, "ln1.gain"), ones(d), depth);
        params.insert(layer_key(layer, "ln1.bias"), zeros(d), depth);
        params.insert(layer_key(layer, "ff.w1"), uniform(d, ff, d, &mut rng), depth);
        params.insert(layer_key(layer, "ff.b1"), zeros(ff), depth);
        params.insert(layer_key(layer, "ff.w2"), uniform(ff, d, ff, &mut rng), depth);
        params.insert(layer_key(layer, "ff.b2"), zeros(d), depth);
        params.insert(layer_key(layer, "ln2.gain"), ones(d), depth);
        params.insert(layer_key(layer, "ln2.bias"), zeros(d), depth);
    }
    let depth = config.head_depth();
    for (name, task) in &config.heads {
        let width = task.n_classes().unwrap_or(2);
        params.insert(head_key(name, "w"), uniform(d, width, d, &mut rng), depth);
        params.insert(head_key(name, "b"), zeros(width), depth);
    }
    Ok(params)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking they match the config's layout.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = init_params(&config, 0)?;
        for (key, p) in expected.iter() {
            match params.get(key) {
                Some(q) if q.value.shape() == p.value.shape() && q.depth == p.depth => {}
                Some(q) => {
                    return Err(Error::Shape(format!(
                        "{key}: expected {:?} at depth {}, found {:?} at depth {}",
                        p.value.shape(),
                        p.depth,
                        q.value.shape(),
                        q.depth
                    )))
                }
                None => return Err(Error::KeyMismatch(format!("missing parameter {key}"))),
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains(k)) {
            return Err(Error::KeyMismatch(format!("unexpected parameter {extra}")));
        }
        let positions = if config.positions {
            sinusoidal_positions(config.max_seq_len, config.d_model)
        } else {
            Array2::zeros((config.max_seq_len, config.d_model))
        };
        Ok(Self { config, params, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn head_task(&self, head: &str) -> Result<TaskKind> {
        self.config
            .heads
            .get(head)
            .copied()
            .ok_or_else(|| Error::UnknownHead(head.to_string()))
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                pos,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn run_encoder(&self, ids: &[usize], mut rng: Option<&mut dyn RngCore>) -> (Array2<f64>, Vec<LayerTape>) {
        let d = self.config.d_model;
        let n = ids.len();
        let embed = self.params.mat(EMBED_KEY);
        let mut x = Array2::from_shape_fn((n, d), |(i, j)| embed[[ids[i], j]] + self.positions[[i, j]]);
        let scale = 1.0 / (d as f64).sqrt();
        let mut tapes = Vec::with_capacity(self.config.n_layers);

        for layer in 0..self.config.n_layers {
            let p = |name: &str| layer_key(layer, name);
            let xv = x.view();
            let q = linear(&xv, &self.params.mat(&p("attn.wq")), &self.params.vector(&p("attn.bq")));
            let k = linear(&xv, &self.params.mat(&p("attn.wk")), &self.params.vector(&p("attn.bk")));
            let v = linear(&xv, &self.params.mat(&p("attn.wv")), &self.params.vector(&p("attn.bv")));
            let attn = softmax_rows(&(q.dot(&k.t()) * scale));
            let mut mask = |rows, cols, prob| match rng.as_deref_mut() {
                Some(r) => dropout_mask(rows, cols, prob, r),
                None => None,
            };
            let attn_mask = mask(n, n, self.config.attention_dropout);
            let attn_used = apply_mask(attn.clone(), &attn_mask);
            let ctx = attn_used.dot(&v);
            let out = linear(&ctx.view(), &self.params.mat(&p("attn.wo")), &self.params.vector(&p("attn.bo")));
            let out_mask = mask(n, d, self.config.dropout);
            let r1 = &x + &apply_mask(out, &out_mask);
            let (h1, ln1) = layer_norm(&r1, &self.params.vector(&p("ln1.gain")), &self.params.vector(&p("ln1.bias")));
            let pre_act = linear(&h1.view(), &self.params.mat(&p("ff.w1")), &self.params.vector(&p("ff.b1")));
            let act = pre_act.mapv(gelu);
            let ff_out = linear(&act.view(), &self.params.mat(&p("ff.w2")), &self.params.vector(&p("ff.b2")));
            let ff_mask = mask(n, d, self.config.dropout);
            let r2 = &h1 + &apply_mask(ff_out, &ff_mask);
            let (y, ln2) = layer_norm(&r2, &self.params.vector(&p("ln2.gain")), &self.params.vector(&p("ln2.bias")));
            tapes.push(LayerTape {
                x,
                q,
                k,
                v,
                attn,
                attn_mask,
                attn_used,
                ctx,
                out_mask,
                ln1,
                h1,
                pre_act,
                act,
                ff_mask,
                ln2,
            });
            x = y;
        }
        (x, tapes)
    }

    /// Inference-mode trunk evaluation (no dropout).
    pub fn encode(&self, ids: &[usize]) -> Result<HiddenStates> {
        self.check_tokens(ids)?;
        Ok(HiddenStates(self.run_encoder(ids, None).0))
    }

    /// Class logits from the hidden state at the `cls` position.
    pub fn classify(&self, hidden: &HiddenStates, head: &str) -> Result<Array1<f64>> {
        let task = self.head_task(head)?;
        if task.is_span() {
            return Err(Error::TaskMismatch {
                expected: "classification head".into(),
                found: format!("{head} ({task})"),
            });
        }
        if hidden.is_empty() {
            return Err(Error::EmptySequence);
        }
        let w = self.params.mat(&head_key(head, "w"));
        let b = self.params.vector(&head_key(head, "b"));
        Ok(hidden.0.row(0).dot(&w) + b)
    }

    /// Per-token start and end logits. Position 0 doubles as "no answer".
    pub fn span(&self, hidden: &HiddenStates, head: &str) -> Result<(Array1<f64>, Array1<f64>)> {
        let task = self.head_task(head)?;
        if !task.is_span() {
            return Err(Error::TaskMismatch {
                expected: "span head".into(),
                found: format!("{head} ({task})"),
            });
        }
        if hidden.is_empty() {
            return Err(Error::EmptySequence);
        }
        let w = self.params.mat(&head_key(head, "w"));
        let b = self.params.vector(&head_key(head, "b"));
        let proj = linear(&hidden.0.view(), &w, &b);
        Ok((proj.column(0).to_owned(), proj.column(1).to_owned()))
    }

    fn apply_head(&self, hidden: &HiddenStates, head: &str) -> Result<HeadOutput> {
        if self.head_task(head)?.is_span() {
            let (start, end) = self.span(hidden, head)?;
            Ok(HeadOutput::Span { start, end })
        } else {
            Ok(HeadOutput::Class(self.classify(hidden, head)?))
        }
    }

    /// Deterministic inference: encoder plus the named head.
    pub fn predict(&self, ids: &[usize], head: &str) -> Result<HeadOutput> {
        self.head_task(head)?;
        let hidden = self.encode(ids)?;
        self.apply_head(&hidden, head)
    }

    /// Forward pass that records a tape. Dropout masks are drawn from `rng`
    /// when one is given; `None` is the deterministic inference path.
    pub fn forward(&self, ids: &[usize], head: &str, rng: Option<&mut dyn RngCore>) -> Result<(HeadOutput, Tape)> {
        self.head_task(head)?;
        self.check_tokens(ids)?;
        let (hidden, layers) = self.run_encoder(ids, rng);
        let hidden = HiddenStates(hidden);
        let out = self.apply_head(&hidden, head)?;
        let tape = Tape {
            token_ids: ids.to_vec(),
            head: head.to_string(),
            layers,
            hidden: hidden.0,
        };
        Ok((out, tape))
    }

    /// Reverse-mode gradient of `<upstream, head output>` with respect to
    /// every parameter. Heads other than the taped one get exact zeros.
    pub fn backward(&self, tape: &Tape, upstream: &HeadOutput) -> Result<GradSet> {
        let mut grads = GradSet::zeros_like(&self.params);
        let hidden = &tape.hidden;
        let n = hidden.nrows();
        let wkey = head_key(&tape.head, "w");
        let bkey = head_key(&tape.head, "b");
        let w = self.params.mat(&wkey);

        let mut dx = match (self.head_task(&tape.head)?, upstream) {
            (task, HeadOutput::Class(dl)) if !task.is_span() => {
                if dl.len() != w.ncols() {
                    return Err(Error::Shape(format!(
                        "upstream {} vs {} classes for head {}",
                        upstream.describe(),
                        w.ncols(),
                        tape.head
                    )));
                }
                let h0 = hidden.row(0);
                let dw = Array2::from_shape_fn((h0.len(), dl.len()), |(i, j)| h0[i] * dl[j]);
                grads.add_at(&wkey, &dw);
                grads.add_at(&bkey, dl);
                let mut dh = Array2::zeros(hidden.raw_dim());
                dh.row_mut(0).assign(&w.dot(dl));
                dh
            }
            (task, HeadOutput::Span { start, end }) if task.is_span() => {
                if start.len() != n || end.len() != n {
                    return Err(Error::Shape(format!(
                        "upstream {} vs sequence length {n}",
                        upstream.describe()
                    )));
                }
                let mut dl = Array2::zeros((n, 2));
                dl.column_mut(0).assign(start);
                dl.column_mut(1).assign(end);
                let g = linear_backward(&hidden.view(), &w, &dl.view());
                grads.add_at(&wkey, &g.dw);
                grads.add_at(&bkey, &g.db);
                g.dx
            }
            (task, _) => {
                return Err(Error::Shape(format!(
                    "upstream {} does not fit head {} ({task})",
                    upstream.describe(),
                    tape.head
                )))
            }
        };

        let scale = 1.0 / (self.config.d_model as f64).sqrt();
        for (layer, t) in tape.layers.iter().enumerate().rev() {
            let p = |name: &str| layer_key(layer, name);

            let (dr2, dg, db) = layer_norm_backward(&t.ln2, &self.params.vector(&p("ln2.gain")), &dx);
            grads.add_at(&p("ln2.gain"), &dg);
            grads.add_at(&p("ln2.bias"), &db);
            let mut dh1 = dr2.clone();
            let dff = apply_mask(dr2, &t.ff_mask);
            let g = linear_backward(&t.act.view(), &self.params.mat(&p("ff.w2")), &dff.view());
            grads.add_at(&p("ff.w2"), &g.dw);
            grads.add_at(&p("ff.b2"), &g.db);
            let mut dpre = g.dx;
            ndarray::Zip::from(&mut dpre)
                .and(&t.pre_act)
                .for_each(|d, &u| *d *= gelu_grad(u));
            let g = linear_backward(&t.h1.view(), &self.params.mat(&p("ff.w1")), &dpre.view());
            grads.add_at(&p("ff.w1"), &g.dw);
            grads.add_at(&p("ff.b1"), &g.db);
            dh1 += &g.dx;

            let (dr1, dg, db) = layer_norm_backward(&t.ln1, &self.params.vector(&p("ln1.gain")), &dh1);
            grads.add_at(&p("ln1.gain"), &dg);
            grads.add_at(&p("ln1.bias"), &db);
            let mut dx_in = dr1.clone();
            let dout = apply_mask(dr1, &t.out_mask);
            let g = linear_backward(&t.ctx.view(), &self.params.mat(&p("attn.wo")), &dout.view());
            grads.add_at(&p("attn.wo"), &g.dw);
            grads.add_at(&p("attn.bo"), &g.db);
            let dctx = g.dx;
            let dv = t.attn_used.t().dot(&dctx);
            let dattn = apply_mask(dctx.dot(&t.v.t()), &t.attn_mask);
            let dscores = softmax_rows_backward(&t.attn, &dattn) * scale;
            let dq = dscores.dot(&t.k);
            let dk = dscores.t().dot(&t.q);
            for (name, d) in [("q", dq), ("k", dk), ("v", dv)] {
                let g = linear_backward(
                    &t.x.view(),
                    &self.params.mat(&p(&format!("attn.w{name}"))),
                    &d.view(),
                );
                grads.add_at(&p(&format!("attn.w{name}")), &g.dw);
                grads.add_at(&p(&format!("attn.b{name}")), &g.db);
                dx_in += &g.dx;
            }
            dx = dx_in;
        }

        let embed_grad = grads.get_mut(EMBED_KEY).expect("embedding gradient");
        for (pos, &id) in tape.token_ids.iter().enumerate() {
            let mut row = embed_grad.index_axis_mut(Axis(0), id);
            row += &dx.row(pos).into_dyn();
        }
        Ok(grads)
    }

    /// Forward (no dropout) plus backward in one call.
    pub fn gradient(&self, ids: &[usize], head: &str, upstream: &HeadOutput) -> Result<GradSet> {
        let (_, tape) = self.forward(ids, head, None)?;
        self.backward(&tape, upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> ModelConfig {
        ModelConfig::new(16, 4, 1, 6, &TaskKind::ALL).without_dropout()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&tiny(), 7).unwrap();
        let b = init_params(&tiny(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&tiny(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn layer_norm_gains_start_at_one() {
        let params = init_params(&tiny(), 3).unwrap();
        let gains: Vec<_> = params.iter().filter(|(k, _)| k.ends_with(".gain")).collect();
        assert_eq!(gains.len(), 2);
        for (_, p) in gains {
            assert!(p.value.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn weights_respect_fan_in_bound() {
        // d_model = 4 so every d-fan-in matrix lies in [-1/2, 1/2]
        let params = init_params(&tiny(), 11).unwrap();
        for key in ["trunk.embed.tok", "trunk.layer0.attn.wq", "trunk.layer0.ff.w1", "head.nli.w"] {
            let p = params.get(key).unwrap();
            assert!(p.value.iter().all(|v| v.abs() <= 0.5), "{key}");
        }
        let w2 = params.get("trunk.layer0.ff.w2").unwrap();
        assert!(w2.value.iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn depths_are_assigned_per_layer() {
        let cfg = ModelConfig::new(16, 4, 2, 6, &[TaskKind::Nli]);
        let params = init_params(&cfg, 1).unwrap();
        assert_eq!(params.get("trunk.embed.tok").unwrap().depth, 0);
        assert_eq!(params.get("trunk.layer0.ff.w1").unwrap().depth, 1);
        assert_eq!(params.get("trunk.layer1.ff.w1").unwrap().depth, 2);
        assert_eq!(params.get("head.nli.w").unwrap().depth, 3);
        assert_eq!(params.max_depth(), 3);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = tiny();
        cfg.vocab_size = 3;
        match init_params(&cfg, 0) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "vocab_size"),
            other => panic!("{other:?}"),
        }
        let mut cfg = tiny();
        cfg.n_layers = 0;
        assert!(matches!(init_params(&cfg, 0), Err(Error::InvalidConfig { field: "n_layers", .. })));
    }

    #[test]
    fn encode_rejects_bad_input() {
        let model = Model::new(tiny(), 0).unwrap();
        assert!(matches!(model.encode(&[]), Err(Error::EmptySequence)));
        assert!(matches!(model.encode(&[2; 7]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(model.encode(&[2, 16]), Err(Error::TokenOutOfRange { id: 16, pos: 1, .. })));
    }

    #[test]
    fn single_token_is_finite() {
        let model = Model::new(tiny(), 0).unwrap();
        let h = model.encode(&[CLS_ID]).unwrap();
        assert_eq!(h.0.dim(), (1, 4));
        assert!(h.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn class_head_widths() {
        let model = Model::new(tiny(), 0).unwrap();
        let h = model.encode(&[2, 5, 6]).unwrap();
        assert_eq!(model.classify(&h, "nli").unwrap().len(), 3);
        assert_eq!(model.classify(&h, "sa").unwrap().len(), 5);
        assert_eq!(model.classify(&h, "pi").unwrap().len(), 2);
        assert!(matches!(model.classify(&h, "qqp"), Err(Error::UnknownHead(_))));
    }

    #[test]
    fn zeroed_heads_give_zero_logits() {
        let mut model = Model::new(tiny(), 0).unwrap();
        for (k, p) in model.params_mut().iter_mut() {
            if k.starts_with(HEAD_PREFIX) {
                p.value.fill(0.0);
            }
        }
        let h = model.encode(&[2, 5, 6]).unwrap();
        assert!(model.classify(&h, "nli").unwrap().iter().all(|&v| v == 0.0));
        let (s, e) = model.span(&h, "mrc_span").unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().chain(e.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn span_head_is_a_per_token_projection() {
        let mut model = Model::new(ModelConfig::new(16, 2, 1, 6, &[TaskKind::MrcSpan]), 0).unwrap();
        let w = array![[1.0, -2.0], [0.5, 3.0]];
        let b = array![0.25, -0.5];
        model.params_mut().get_mut("head.mrc_span.w").unwrap().value = w.clone().into_dyn();
        model.params_mut().get_mut("head.mrc_span.b").unwrap().value = b.clone().into_dyn();
        let hidden = HiddenStates(array![[1.0, 2.0], [-1.0, 0.0], [0.5, 0.5]]);
        let (s, e) = model.span(&hidden, "mrc_span").unwrap();
        // by hand: row . column + bias
        assert_eq!(s.to_vec(), vec![1.0 + 1.0 + 0.25, -1.0 + 0.25, 0.5 + 0.25 + 0.25]);
        assert_eq!(e.to_vec(), vec![-2.0 + 6.0 - 0.5, 2.0 - 0.5, -1.0 + 1.5 - 0.5]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let model = Model::new(tiny(), 5).unwrap();
        let up = HeadOutput::Class(Array1::zeros(3));
        let g = model.gradient(&[2, 7, 1, 9], "nli", &up).unwrap();
        assert!(g.matches(model.params()));
        assert!(g.iter().all(|(_, a)| a.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unused_heads_get_exact_zeros() {
        let model = Model::new(tiny(), 5).unwrap();
        let up = HeadOutput::Class(array![0.3, -1.0, 0.7]);
        let g = model.gradient(&[2, 7, 1, 9], "nli", &up).unwrap();
        for (k, a) in g.iter() {
            if k.starts_with(HEAD_PREFIX) && !k.starts_with("head.nli.") {
                assert!(a.iter().all(|&v| v == 0.0), "{k}");
            }
        }
        assert!(g.get("head.nli.w").unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let model = Model::new(tiny(), 5).unwrap();
        let up = HeadOutput::Class(Array1::zeros(4));
        assert!(matches!(model.gradient(&[2, 7], "nli", &up), Err(Error::Shape(_))));
        let up = HeadOutput::Class(Array1::zeros(2));
        assert!(matches!(model.gradient(&[2, 7], "mrc_span", &up), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_pool_is_permutation_invariant_without_positions() {
        let mut cfg = ModelConfig::new(16, 4, 2, 6, &[TaskKind::Nli]).without_dropout();
        cfg.positions = false;
        let model = Model::new(cfg, 9).unwrap();
        let a = model.encode(&[2, 5, 9, 11]).unwrap();
        let b = model.encode(&[11, 9, 2, 5]).unwrap();
        let pa = a.0.mean_axis(Axis(0)).unwrap();
        let pb = b.0.mean_axis(Axis(0)).unwrap();
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_only_applies_with_rng() {
        let cfg = ModelConfig::new(16, 4, 1, 6, &[TaskKind::Nli]);
        let model = Model::new(cfg, 2).unwrap();
        let ids = [2, 5, 9, 11];
        let (eval, _) = model.forward(&ids, "nli", None).unwrap();
        assert_eq!(eval, model.predict(&ids, "nli").unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (train, _) = model.forward(&ids, "nli", Some(&mut rng)).unwrap();
        assert_ne!(eval, train);
    }
}
