//! JSON checkpoint container.
//!
//! A checkpoint holds the model config, every parameter array keyed by path
//! with its depth, and the seed that produced it. Training checkpoints add
//! Adam moments and the loop state (step counter, random streams, samplers,
//! loss log). Floats are written in shortest round-trip form, so loading
//! reproduces every value exactly.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArrayRecord, GradSet, Model, ModelConfig, ParamSet};
use crate::optim::OptimState;
use crate::trainer::TrainState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub depth: usize,
    pub value: ArrayRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimRecord {
    pub step: u64,
    pub first: BTreeMap<String, ArrayRecord>,
    pub second: BTreeMap<String, ArrayRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: BTreeMap<String, ParamRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptimRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainState>,
}

fn records(g: &GradSet) -> BTreeMap<String, ArrayRecord> {
    g.iter().map(|(k, a)| (k.clone(), ArrayRecord::from_array(a))).collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(k, p)| {
                let rec = ParamRecord {
                    depth: p.depth,
                    value: ArrayRecord::from_array(&p.value),
                };
                (k.clone(), rec)
            })
            .collect();
        Self {
            format: FORMAT_VERSION,
            seed,
            config: model.config().clone(),
            params,
            optim: None,
            train: None,
        }
    }

    pub fn with_training(mut self, optim: &OptimState, train: &TrainState) -> Self {
        self.optim = Some(OptimRecord {
            step: optim.step,
            first: records(&optim.first),
            second: records(&optim.second),
        });
        self.train = Some(train.clone());
        self
    }

    /// Rebuilds the model, checking the parameter layout against the config.
    pub fn model(&self) -> Result<Model> {
        let mut params = ParamSet::new();
        for (k, rec) in &self.params {
            let value = rec
                .value
                .clone()
                .into_array()
                .map_err(|e| Error::Shape(format!("{k}: {e}")))?;
            params.insert(k.clone(), value, rec.depth);
        }
        if !params.all_finite() {
            return Err(Error::Shape("checkpoint holds non-finite parameters".into()));
        }
        Model::from_params(self.config.clone(), params)
    }

    /// Adam state shaped against `params`, if the checkpoint has one.
    pub fn optim_state(&self, params: &ParamSet) -> Result<Option<OptimState>> {
        let Some(rec) = &self.optim else {
            return Ok(None);
        };
        let rebuild = |m: &BTreeMap<String, ArrayRecord>| -> Result<GradSet> {
            let entries = m
                .iter()
                .map(|(k, r)| {
                    let a = r.clone().into_array().map_err(|e| Error::Shape(format!("{k}: {e}")))?;
                    Ok((k.clone(), a))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            let g = GradSet::from_entries(entries);
            if !g.matches(params) {
                return Err(Error::KeyMismatch("optimizer moments do not match parameters".into()));
            }
            Ok(g)
        };
        Ok(Some(OptimState {
            step: rec.step,
            first: rebuild(&rec.first)?,
            second: rebuild(&rec.second)?,
        }))
    }

    /// Rejects a checkpoint whose model config differs from `expected`.
    pub fn expect_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::KeyMismatch(format!(
                "checkpoint model config {:?} differs from expected {:?}",
                self.config, expected
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self).map_err(|e| Error::Checkpoint {
            path: path.into(),
            reason: e.to_string(),
        })?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: path.into(),
            reason: e.to_string(),
        })?;
        if ck.format != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                path: path.into(),
                reason: format!("unsupported format version {}", ck.format),
            });
        }
        ck.model().map_err(|e| Error::Checkpoint {
            path: path.into(),
            reason: e.to_string(),
        })?;
        Ok(ck)
    }
}

pub fn save_checkpoint(model: &Model, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, seed).save(path)
}

/// Loads a model, rejecting it unless its config equals `expected` when given.
pub fn load_model(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    if let Some(cfg) = expected {
        ck.expect_config(cfg)?;
    }
    ck.model()
}
