//! Training objectives: cross-entropy with label smoothing, tempered KL to
//! teacher logits, the convex hard/soft combination, span losses and the
//! teacher-annealing schedule.
//!
//! Every loss returns its value together with the exact gradient with respect
//! to the student logits, shaped like the head output.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::nn::HeadOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    /// Hard targets only.
    #[default]
    None,
    /// Fixed λ, soft targets from the plain teacher mean.
    Plain,
    /// Hard weight grows linearly from 0 to 1 over training.
    Annealing,
    /// Fixed λ, soft targets from the correctness-weighted teacher mix.
    Weighted,
}

impl std::str::FromStr for KdMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(KdMode::None),
            "plain" => Ok(KdMode::Plain),
            "annealing" => Ok(KdMode::Annealing),
            "weighted" => Ok(KdMode::Weighted),
            other => Err(format!("unknown kd mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub mode: KdMode,
    /// Weight of the soft-target term.
    pub lambda: f64,
    pub temperature: f64,
    /// Multiply the KL term by `T^2`.
    pub scale_by_t2: bool,
    /// Scale applied to incorrect teachers in weighted mode.
    pub w: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            mode: KdMode::None,
            lambda: 0.7,
            temperature: 5.0,
            scale_by_t2: true,
            w: 0.75,
        }
    }
}

impl KdConfig {
    /// Pretraining defaults: T = 5, λ = 0.7.
    pub fn pretraining(mode: KdMode) -> Self {
        Self {
            mode,
            lambda: 0.7,
            ..Default::default()
        }
    }

    /// Finetuning defaults: T = 5, λ = 0.9, W = 0.75.
    pub fn finetuning(mode: KdMode) -> Self {
        Self {
            mode,
            lambda: 0.9,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            errs.push(format!("kd.lambda {} not in [0, 1]", self.lambda));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push(format!("kd.temperature {} must be positive", self.temperature));
        }
        if !(self.w > 0.0 && self.w <= 1.0) {
            errs.push(format!("kd.w {} not in (0, 1]", self.w));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: HeadOutput,
}

fn log_softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.mapv(|v| v - lse)
}

pub fn softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    log_softmax(logits).mapv(f64::exp)
}

fn ce_parts(logits: &ArrayView1<f64>, target: usize, smoothing: f64) -> Result<(f64, Array1<f64>)> {
    let k = logits.len();
    if target >= k {
        return Err(Error::TargetOutOfRange { target, classes: k });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Setup(format!("label smoothing {smoothing} not in [0, 1)")));
    }
    let logp = log_softmax(logits);
    let uniform = smoothing / k as f64;
    let q = Array1::from_shape_fn(k, |i| if i == target { 1.0 - smoothing + uniform } else { uniform });
    let value = -q.iter().zip(logp.iter()).map(|(qi, lp)| qi * lp).sum::<f64>();
    let grad = logp.mapv(f64::exp) - &q;
    Ok((value, grad))
}

/// `-sum q log softmax(logits)` with `q = (1 - eps) onehot + eps / K`.
pub fn cross_entropy(logits: &ArrayView1<f64>, target: usize, smoothing: f64) -> Result<LossResult> {
    let (value, grad) = ce_parts(logits, target, smoothing)?;
    Ok(LossResult {
        value,
        grad: HeadOutput::Class(grad),
    })
}

fn kl_parts(
    student: &ArrayView1<f64>,
    teacher: &ArrayView1<f64>,
    temperature: f64,
    scale_by_t2: bool,
) -> Result<(f64, Array1<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "student logits {} vs teacher logits {}",
            student.len(),
            teacher.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Setup(format!("temperature {temperature} must be positive")));
    }
    let logp = log_softmax(&teacher.mapv(|v| v / temperature).view());
    let logq = log_softmax(&student.mapv(|v| v / temperature).view());
    let p = logp.mapv(f64::exp);
    let q = logq.mapv(f64::exp);
    let kl: f64 = p
        .iter()
        .zip(logp.iter().zip(logq.iter()))
        .map(|(&pi, (&lp, &lq))| if pi > 0.0 { pi * (lp - lq) } else { 0.0 })
        .sum();
    // d KL / d student = (q - p) / T
    let factor = if scale_by_t2 { temperature * temperature } else { 1.0 };
    let grad = (q - p) * (factor / temperature);
    Ok((kl.max(0.0) * factor, grad))
}

/// `KL(softmax(teacher / T) || softmax(student / T))`, optionally times `T^2`.
pub fn kl_soft(
    student: &ArrayView1<f64>,
    teacher: &ArrayView1<f64>,
    temperature: f64,
    scale_by_t2: bool,
) -> Result<LossResult> {
    let (value, grad) = kl_parts(student, teacher, temperature, scale_by_t2)?;
    Ok(LossResult {
        value,
        grad: HeadOutput::Class(grad),
    })
}

fn combine_grads(a: &HeadOutput, wa: f64, b: &HeadOutput, wb: f64) -> Result<HeadOutput> {
    if !a.same_shape(b) {
        return Err(Error::Shape("hard and soft gradients differ in shape".into()));
    }
    Ok(match (a, b) {
        (HeadOutput::Class(x), HeadOutput::Class(y)) => HeadOutput::Class(x * wa + y * wb),
        (HeadOutput::Span { start: s1, end: e1 }, HeadOutput::Span { start: s2, end: e2 }) => HeadOutput::Span {
            start: s1 * wa + s2 * wb,
            end: e1 * wa + e2 * wb,
        },
        _ => unreachable!(),
    })
}

/// `(1 - λ) hard + λ soft`, value and gradient.
pub fn combined_loss(hard: &LossResult, soft: &LossResult, lambda: f64) -> Result<LossResult> {
    Ok(LossResult {
        value: (1.0 - lambda) * hard.value + lambda * soft.value,
        grad: combine_grads(&hard.grad, 1.0 - lambda, &soft.grad, lambda)?,
    })
}

/// Mean of start and end cross-entropies.
pub fn span_loss(
    start_logits: &ArrayView1<f64>,
    end_logits: &ArrayView1<f64>,
    start: usize,
    end: usize,
    smoothing: f64,
) -> Result<LossResult> {
    let len = start_logits.len();
    if end_logits.len() != len {
        return Err(Error::Shape(format!("start logits {len} vs end logits {}", end_logits.len())));
    }
    if start > end || end >= len {
        return Err(Error::InvalidSpan { start, end, len });
    }
    let (vs, gs) = ce_parts(start_logits, start, smoothing)?;
    let (ve, ge) = ce_parts(end_logits, end, smoothing)?;
    Ok(LossResult {
        value: 0.5 * (vs + ve),
        grad: HeadOutput::Span {
            start: gs * 0.5,
            end: ge * 0.5,
        },
    })
}

/// Mean of the start and end tempered KL terms.
pub fn span_kl(
    student_start: &ArrayView1<f64>,
    student_end: &ArrayView1<f64>,
    teacher_start: &ArrayView1<f64>,
    teacher_end: &ArrayView1<f64>,
    temperature: f64,
    scale_by_t2: bool,
) -> Result<LossResult> {
    let (vs, gs) = kl_parts(student_start, teacher_start, temperature, scale_by_t2)?;
    let (ve, ge) = kl_parts(student_end, teacher_end, temperature, scale_by_t2)?;
    Ok(LossResult {
        value: 0.5 * (vs + ve),
        grad: HeadOutput::Span {
            start: gs * 0.5,
            end: ge * 0.5,
        },
    })
}

/// Hard-target loss for any head output.
pub fn hard_loss(output: &HeadOutput, label: Label, smoothing: f64) -> Result<LossResult> {
    match (output, label) {
        (HeadOutput::Class(l), Label::Class(c)) => cross_entropy(&l.view(), c, smoothing),
        (HeadOutput::Span { start, end }, Label::Span { start: s, end: e }) => {
            span_loss(&start.view(), &end.view(), s, e, smoothing)
        }
        _ => Err(Error::Shape("label kind does not match head output".into())),
    }
}

/// Soft-target loss for any head output.
pub fn soft_loss(output: &HeadOutput, teacher: &HeadOutput, temperature: f64, scale_by_t2: bool) -> Result<LossResult> {
    match (output, teacher) {
        (HeadOutput::Class(s), HeadOutput::Class(t)) => kl_soft(&s.view(), &t.view(), temperature, scale_by_t2),
        (HeadOutput::Span { start: ss, end: se }, HeadOutput::Span { start: ts, end: te }) => {
            span_kl(&ss.view(), &se.view(), &ts.view(), &te.view(), temperature, scale_by_t2)
        }
        _ => Err(Error::Shape("teacher logits do not match head output".into())),
    }
}

/// Linear hard-target weight `step / total_steps` for teacher annealing.
pub fn annealing_hard_weight(step: usize, total_steps: usize) -> f64 {
    let total = total_steps.max(1);
    step.min(total) as f64 / total as f64
}
