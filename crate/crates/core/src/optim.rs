//! Adam with layer-wise learning rates, a warmup/linear-decay schedule,
//! global-norm clipping and gradient accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradSet, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimHyper {
    pub base_lr: f64,
    /// Fraction of all steps spent ramping the rate up from 0.
    pub warmup_frac: f64,
    /// Per-depth decay: depth `d` trains at `base * multiplier^(max_depth - d)`.
    pub lr_layer_multiplier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self::pretraining()
    }
}

impl OptimHyper {
    pub fn pretraining() -> Self {
        Self {
            base_lr: 3e-4,
            warmup_frac: 0.1,
            lr_layer_multiplier: 0.75,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            clip_norm: 1.0,
            weight_decay: 0.0,
        }
    }

    pub fn finetuning() -> Self {
        Self {
            base_lr: 5e-5,
            lr_layer_multiplier: 0.9,
            ..Self::pretraining()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(self.base_lr > 0.0, format!("optim.base_lr {} must be > 0", self.base_lr));
        check(
            (0.0..1.0).contains(&self.warmup_frac),
            format!("optim.warmup_frac {} not in [0, 1)", self.warmup_frac),
        );
        check(
            self.lr_layer_multiplier > 0.0 && self.lr_layer_multiplier <= 1.0,
            format!("optim.lr_layer_multiplier {} not in (0, 1]", self.lr_layer_multiplier),
        );
        check((0.0..1.0).contains(&self.beta1), format!("optim.beta1 {} not in [0, 1)", self.beta1));
        check((0.0..1.0).contains(&self.beta2), format!("optim.beta2 {} not in [0, 1)", self.beta2));
        check(self.epsilon > 0.0, format!("optim.epsilon {} must be > 0", self.epsilon));
        check(self.clip_norm > 0.0, format!("optim.clip_norm {} must be > 0", self.clip_norm));
        check(self.weight_decay >= 0.0, format!("optim.weight_decay {} must be >= 0", self.weight_decay));
        errs
    }
}

/// Adam moments and the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first: GradSet,
    pub second: GradSet,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            first: GradSet::zeros_like(params),
            second: GradSet::zeros_like(params),
        }
    }
}

/// Running gradient sum over the passes of one step.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    sum: Option<GradSet>,
    passes: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn accumulate(&mut self, g: &GradSet) -> Result<()> {
        match &mut self.sum {
            Some(sum) => sum.add_assign(g)?,
            None => self.sum = Some(g.clone()),
        }
        self.passes += 1;
        Ok(())
    }

    /// Mean over accumulated passes; resets the accumulator.
    pub fn average(&mut self) -> Result<GradSet> {
        let mut sum = self.sum.take().ok_or(Error::EmptyAccumulator)?;
        let n = std::mem::take(&mut self.passes);
        if n > 1 {
            sum.scale(1.0 / n as f64);
        }
        Ok(sum)
    }
}

/// Scales `g` so its joint L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(g: &mut GradSet, max_norm: f64) -> f64 {
    let norm = g.global_norm();
    if norm > max_norm {
        g.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup to `base_lr` over `warmup_frac * total_steps` steps, then
/// linear decay to 0 at `total_steps`.
pub fn schedule_lr(step: usize, total_steps: usize, hyper: &OptimHyper) -> f64 {
    let total = total_steps.max(1) as f64;
    let step = (step as f64).min(total);
    let warmup = hyper.warmup_frac * total;
    if step < warmup {
        hyper.base_lr * step / warmup
    } else {
        hyper.base_lr * (total - step) / (total - warmup)
    }
}

pub fn layer_lr(lr_at_step: f64, multiplier: f64, depth: usize, max_depth: usize) -> f64 {
    let below_top = max_depth.saturating_sub(depth);
    lr_at_step * multiplier.powi(below_top as i32)
}

/// One bias-corrected Adam update with layer-wise rates.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradSet,
    state: &mut OptimState,
    hyper: &OptimHyper,
    lr_at_step: f64,
) -> Result<()> {
    if !grads.matches(params) || !state.first.matches(params) || !state.second.matches(params) {
        return Err(Error::Shape("gradients or optimizer state do not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let max_depth = params.max_depth();
    for (key, p) in params.iter_mut() {
        let lr = layer_lr(lr_at_step, hyper.lr_layer_multiplier, p.depth, max_depth);
        let g = grads.get(key).unwrap();
        let m = state.first.get_mut(key).unwrap();
        let v = state.second.get_mut(key).unwrap();
        ndarray::Zip::from(&mut p.value)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
                *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + hyper.epsilon);
                *w -= lr * update;
                if hyper.weight_decay > 0.0 {
                    *w -= lr * hyper.weight_decay * *w;
                }
            });
    }
    Ok(())
}
