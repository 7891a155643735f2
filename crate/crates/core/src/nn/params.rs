//! Named parameter and gradient collections.
//!
//! Both [`ParamSet`] and [`GradSet`] are ordered maps keyed by a dotted path
//! such as `trunk.layer0.attn.wq` or `head.nli.w`. Every parameter carries a
//! depth index used by the layer-wise learning rate: the embedding is depth 0,
//! block `i` is depth `i + 1`, heads sit at depth `n_layers + 1`.

use std::collections::BTreeMap;

use ndarray::{Array, ArrayD, ArrayView1, ArrayView2, Dimension, Ix1, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRUNK_PREFIX: &str = "trunk.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: ArrayD<f64>, depth: usize) {
        self.entries.insert(path.into(), Param { value, depth });
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.entries.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn max_depth(&self) -> usize {
        self.entries.values().map(|p| p.depth).max().unwrap_or(0)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn mat(&self, path: &str) -> ArrayView2<'_, f64> {
        self.entries[path]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matrix parameter")
    }

    pub(crate) fn vector(&self, path: &str) -> ArrayView1<'_, f64> {
        self.entries[path]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("vector parameter")
    }

    /// Parameter paths grouped by owner: `"trunk"` or the head name.
    pub fn groups(&self) -> BTreeMap<String, Vec<String>> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for key in self.entries.keys() {
            groups.entry(group_of(key)).or_default().push(key.clone());
        }
        groups
    }
}

/// `"trunk"` for shared parameters, `"head.<name>"` for a head's parameters.
pub fn group_of(path: &str) -> String {
    if let Some(rest) = path.strip_prefix(HEAD_PREFIX) {
        let name = rest.split('.').next().unwrap_or(rest);
        format!("{HEAD_PREFIX}{name}")
    } else {
        "trunk".to_string()
    }
}

/// One gradient array per parameter path, shape-matched to a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradSet {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(k, p)| (k.clone(), ArrayD::zeros(p.value.raw_dim())))
            .collect();
        Self { entries }
    }

    pub fn get(&self, path: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut ArrayD<f64>> {
        self.entries.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `delta` into the gradient stored at `path`.
    pub(crate) fn add_at<D: Dimension>(&mut self, path: &str, delta: &Array<f64, D>) {
        let entry = self.entries.get_mut(path).expect("gradient path");
        *entry += &delta.view().into_dyn();
    }

    fn check_keys(&self, other: &GradSet) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self.entries.keys().zip(other.entries.keys()).any(|(a, b)| a != b)
        {
            return Err(Error::KeyMismatch("gradient sets cover different parameters".into()));
        }
        for (k, a) in &self.entries {
            if a.shape() != other.entries[k].shape() {
                return Err(Error::Shape(format!(
                    "{k}: {:?} vs {:?}",
                    a.shape(),
                    other.entries[k].shape()
                )));
            }
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &GradSet) -> Result<()> {
        self.check_keys(other)?;
        for (k, a) in self.entries.iter_mut() {
            *a += &other.entries[k];
        }
        Ok(())
    }

    /// Elementwise `self += scale * other`.
    pub fn scaled_add(&mut self, scale: f64, other: &GradSet) -> Result<()> {
        self.check_keys(other)?;
        for (k, a) in self.entries.iter_mut() {
            a.scaled_add(scale, &other.entries[k]);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.entries.values_mut() {
            a.mapv_inplace(|v| v * factor);
        }
    }

    /// L2 norm over all entries jointly.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|a| a.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// True when the key set equals the parameter set's and shapes agree.
    pub fn matches(&self, params: &ParamSet) -> bool {
        self.entries.len() == params.len()
            && self
                .entries
                .iter()
                .all(|(k, a)| params.get(k).is_some_and(|p| p.value.shape() == a.shape()))
    }

    pub(crate) fn from_entries(entries: BTreeMap<String, ArrayD<f64>>) -> Self {
        Self { entries }
    }
}

/// Serialized form of one array: shape plus row-major values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArrayRecord {
    pub fn from_array(a: &ArrayD<f64>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn into_array(self) -> std::result::Result<ArrayD<f64>, String> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data).map_err(|e| e.to_string())
    }
}
