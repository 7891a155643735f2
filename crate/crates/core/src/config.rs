//! TOML experiment configuration.
//!
//! ```toml
//! out_dir = "runs/pretrain"
//! init_checkpoint = "teacher.json"   # optional
//!
//! [model]
//! vocab_size = 64
//! d_model = 16
//! n_layers = 2
//! max_seq_len = 16
//!
//! [data]
//! train = ["nli.jsonl", "sa.jsonl"]
//! dev = ["nli_dev.jsonl"]
//! teachers = ["t1.soft.jsonl", "t2.soft.jsonl"]   # finetuning KD
//!
//! [data.soft_targets]                              # pretraining KD
//! nli = ["nli_teacher.soft.jsonl"]
//!
//! [pretrain]
//! step_max = 200
//! [pretrain.kd]
//! mode = "plain"
//!
//! [finetune]
//! epochs = 3
//! [finetune.optim]
//! base_lr = 1e-3
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Omitted keys take the defaults of the section they belong to, including
//! nested `optim` and `kd` tables under `[finetune]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::{DeserializeOwned, Error as _};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::losses::KdMode;
use crate::nn::ModelConfig;
use crate::trainer::{FinetuneConfig, LoopConfig};
use crate::TaskKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    #[serde(default)]
    pub d_ff: Option<usize>,
    pub n_layers: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_dropout")]
    pub attention_dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelSection {
    pub fn to_model_config(&self, heads: BTreeMap<String, TaskKind>) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            positions: true,
            heads,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub dev: Vec<PathBuf>,
    /// Soft-target files of the finetuning teacher ensemble.
    #[serde(default)]
    pub teachers: Vec<PathBuf>,
    /// Pretraining soft-target files keyed by training dataset name.
    #[serde(default)]
    pub soft_targets: BTreeMap<String, Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_answer_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_answer_len: crate::eval::DEFAULT_MAX_ANSWER_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    pub data: DataSection,
    #[serde(default, deserialize_with = "over_defaults")]
    pub pretrain: LoopConfig,
    #[serde(default, deserialize_with = "over_defaults")]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Deserializes a table as a patch over `T::default()`, recursing into
/// nested tables so partial sub-tables keep the section's own defaults.
fn over_defaults<'de, D, T>(d: D) -> std::result::Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: Default + Serialize + DeserializeOwned,
{
    let patch = toml::Table::deserialize(d)?;
    let mut table = toml::Table::try_from(T::default()).map_err(D::Error::custom)?;
    merge(&mut table, patch);
    toml::Value::Table(table).try_into().map_err(D::Error::custom)
}

/// Dataset name used throughout: the file stem.
pub fn dataset_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim_end().to_string()]))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msgs) => Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(p) = &mut self.init_checkpoint {
            fix(p);
        }
        let d = &mut self.data;
        d.train.iter_mut().chain(&mut d.dev).chain(&mut d.teachers).for_each(fix);
        d.soft_targets.values_mut().flatten().for_each(fix);
    }

    /// Checks everything the stage needs and reports every problem found.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        let mut errs = Vec::new();
        if self.out_dir.as_os_str().is_empty() {
            errs.push("out_dir must not be empty".to_string());
        }
        match (&self.model, &self.init_checkpoint) {
            (None, None) => errs.push("either [model] or init_checkpoint is required".to_string()),
            (Some(m), _) => {
                let mut probe = m.to_model_config(BTreeMap::new());
                probe.heads.insert("probe".into(), TaskKind::Nli);
                if let Err(e) = probe.validate() {
                    errs.push(format!("model: {e}"));
                }
            }
            _ => {}
        }
        if let Some(p) = &self.init_checkpoint {
            if !p.exists() {
                errs.push(format!("init_checkpoint {} does not exist", p.display()));
            }
        }
        if self.data.train.is_empty() {
            errs.push("data.train lists no datasets".to_string());
        }
        let mut paths: Vec<(&str, &PathBuf)> = Vec::new();
        paths.extend(self.data.train.iter().map(|p| ("data.train", p)));
        paths.extend(self.data.dev.iter().map(|p| ("data.dev", p)));
        match stage {
            Stage::Pretrain => {
                paths.extend(self.data.soft_targets.values().flatten().map(|p| ("data.soft_targets", p)))
            }
            Stage::Finetune => paths.extend(self.data.teachers.iter().map(|p| ("data.teachers", p))),
        }
        for (field, p) in paths {
            if !p.exists() {
                errs.push(format!("{field}: {} does not exist", p.display()));
            }
        }
        if self.eval.max_answer_len < 1 {
            errs.push("eval.max_answer_len must be at least 1".to_string());
        }

        match stage {
            Stage::Pretrain => {
                errs.extend(self.pretrain.validate().into_iter().map(|e| format!("pretrain: {e}")));
                let names: Vec<String> = self.data.train.iter().map(|p| dataset_name(p)).collect();
                if self.pretrain.kd.mode != KdMode::None {
                    for name in &names {
                        if self.data.soft_targets.get(name).is_none_or(|v| v.is_empty()) {
                            errs.push(format!(
                                "pretrain.kd.mode is {:?} but dataset `{name}` has no entry in data.soft_targets",
                                self.pretrain.kd.mode
                            ));
                        }
                    }
                }
                for key in self.data.soft_targets.keys() {
                    if !names.contains(key) {
                        errs.push(format!("data.soft_targets.{key} matches no training dataset"));
                    }
                }
            }
            Stage::Finetune => {
                errs.extend(self.finetune.validate().into_iter().map(|e| format!("finetune: {e}")));
                if self.data.train.len() > 1 {
                    errs.push(format!("finetuning takes one training dataset, got {}", self.data.train.len()));
                }
                if self.finetune.kd.mode != KdMode::None && self.data.teachers.is_empty() {
                    errs.push(format!(
                        "kd mode {:?} needs at least one teacher soft-target file",
                        self.finetune.kd.mode
                    ));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
