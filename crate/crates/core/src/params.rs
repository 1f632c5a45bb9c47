//! Named parameter storage shared by every trainable module.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Optimizer group a parameter belongs to. Each group gets its own peak
/// learning rate (base rate times a multiplier).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Policy,
    QueryHead,
    Prior,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] =
        [ParamGroup::Policy, ParamGroup::QueryHead, ParamGroup::Prior, ParamGroup::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Policy => "policy",
            ParamGroup::QueryHead => "query_head",
            ParamGroup::Prior => "prior",
            ParamGroup::Decoder => "decoder",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }

    /// Groups whose parameters only receive gradient from the segmentation loss.
    pub fn is_segmentation(self) -> bool {
        !matches!(self, ParamGroup::Policy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), groups: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal));
        self.add(name, group, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn add_full(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        v: f64,
    ) -> ParamId {
        self.add(name, group, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.ids()
            .filter(|&id| group.map_or(true, |g| self.group(id) == g))
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Copy values for the parameters of `groups` from `other` (same layout).
    pub fn copy_groups_from(&mut self, other: &ParamStore, groups: &[ParamGroup]) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for i in 0..self.values.len() {
            if groups.contains(&self.groups[i]) {
                self.values[i] = other.values[i].clone();
            }
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.names.iter().cloned().zip(self.values.iter().map(|v| v.shape().to_vec())).collect()
    }

    /// All values concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`]; panics if the length is wrong.
    pub fn unflatten(&mut self, flat: &[f64]) {
        let total: usize = self.values.iter().map(Tensor::len).sum();
        assert_eq!(total, flat.len(), "flat parameter length mismatch");
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `scale * other` into `self` in parameter order.
    pub fn merge_scaled(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                let mut g = g.clone();
                g.scale_assign(scale);
                self.accumulate(ParamId(i), &g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum()
    }

    /// Squared norm over the parameters of one group.
    pub fn group_sq_norm(&self, store: &ParamStore, group: ParamGroup) -> f64 {
        store
            .ids()
            .filter(|&id| store.group(id) == group)
            .filter_map(|id| self.get(id))
            .map(Tensor::sq_norm)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
