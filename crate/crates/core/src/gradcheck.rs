//! Finite-difference verification of the encoder's reverse-mode gradients.
//!
//! For every head we draw a random token sequence and a random upstream
//! vector `r`, then compare the analytic gradient of `<r, head(ids)>` with
//! central differences over every scalar parameter. Errors are relative with
//! an absolute floor: `|a - n| / max(|a|, |n|, REL_FLOOR)`.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nn::{group_of, GradSet, HeadOutput, Model, ModelConfig, CLS_ID};

pub const FD_EPS: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub group: String,
    pub n_scalars: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn contract(up: &HeadOutput, out: &HeadOutput) -> f64 {
    match (up, out) {
        (HeadOutput::Class(r), HeadOutput::Class(l)) => r.dot(l),
        (HeadOutput::Span { start: rs, end: re }, HeadOutput::Span { start, end }) => rs.dot(start) + re.dot(end),
        _ => unreachable!("upstream built from the head output shape"),
    }
}

/// Checks the model's own backward pass.
pub fn gradcheck(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    gradcheck_with(config, seed, |model, ids, head, up| model.gradient(ids, head, up))
}

/// Checks an arbitrary gradient routine against central differences of the
/// model's forward pass. Dropout is disabled.
pub fn gradcheck_with<F>(config: &ModelConfig, seed: u64, grad_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&Model, &[usize], &str, &HeadOutput) -> Result<GradSet>,
{
    let config = config.clone().without_dropout();
    let mut model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let sizes: BTreeMap<String, usize> = model
        .params()
        .groups()
        .into_iter()
        .map(|(g, keys)| {
            let n = keys.iter().map(|k| model.params().get(k).unwrap().value.len()).sum();
            (g, n)
        })
        .collect();
    let mut worst: BTreeMap<String, f64> = sizes.keys().map(|g| (g.clone(), 0.0)).collect();

    let heads: Vec<String> = config.heads.keys().cloned().collect();
    for head in &heads {
        let len = rng.gen_range(2..=config.max_seq_len);
        let mut ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect();
        ids[0] = CLS_ID;

        let out = model.predict(&ids, head)?;
        let mut draw = |n: usize| Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let up = match &out {
            HeadOutput::Class(l) => HeadOutput::Class(draw(l.len())),
            HeadOutput::Span { start, .. } => {
                let n = start.len();
                HeadOutput::Span { start: draw(n), end: draw(n) }
            }
        };
        let analytic = grad_fn(&model, &ids, head, &up)?;

        let keys: Vec<String> = model.params().keys().cloned().collect();
        for key in keys {
            let group = group_of(&key);
            let n = model.params().get(&key).unwrap().value.len();
            for i in 0..n {
                let orig = model.params().get(&key).unwrap().value.as_slice().unwrap()[i];
                let set = |m: &mut Model, v: f64| {
                    m.params_mut().get_mut(&key).unwrap().value.as_slice_mut().unwrap()[i] = v;
                };
                set(&mut model, orig + FD_EPS);
                let plus = contract(&up, &model.predict(&ids, head)?);
                set(&mut model, orig - FD_EPS);
                let minus = contract(&up, &model.predict(&ids, head)?);
                set(&mut model, orig);
                let numeric = (plus - minus) / (2.0 * FD_EPS);
                let a = analytic
                    .get(&key)
                    .and_then(|g| g.as_slice().map(|s| s[i]))
                    .unwrap_or(f64::NAN);
                let err = rel_error(a, numeric);
                let slot = worst.get_mut(&group).unwrap();
                // NaN must surface as a failure
                if err.is_nan() || err > *slot {
                    *slot = if err.is_nan() { f64::INFINITY } else { err };
                }
            }
        }
    }

    Ok(GradCheckReport {
        seed,
        tolerance: GRADCHECK_TOLERANCE,
        groups: worst
            .into_iter()
            .map(|(group, max_rel_error)| GroupError {
                n_scalars: sizes[&group],
                group,
                max_rel_error,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;

    #[test]
    fn tiny_model_passes() {
        let cfg = ModelConfig::new(12, 4, 1, 3, &TaskKind::ALL);
        let report = gradcheck(&cfg, 1).unwrap();
        assert!(report.passed(), "{report:?}");
        // trunk plus four heads, each listed once
        assert_eq!(report.groups.len(), 5);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let cfg = ModelConfig::new(12, 4, 1, 3, &[TaskKind::Nli]);
        let report = gradcheck_with(&cfg, 1, |m, ids, head, up| {
            let mut g = m.gradient(ids, head, up)?;
            g.get_mut("trunk.layer0.ff.w1").unwrap().mapv_inplace(|v| v * 1.01);
            Ok(g)
        })
        .unwrap();
        assert!(!report.passed());
        let trunk = report.groups.iter().find(|g| g.group == "trunk").unwrap();
        assert!(trunk.max_rel_error > 1e-3);
    }
}
