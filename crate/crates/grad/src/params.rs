//! Named parameter storage outside any single graph.

use std::collections::BTreeMap;

use crate::error::GradError;
use crate::graph::{Graph, ParamGroup, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, StoredParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor) {
        self.entries.insert(name.to_string(), StoredParam { group, value });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, GradError> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| GradError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, GradError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| GradError::UnknownParameter(name.to_string()))
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|p| p.group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredParam)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut StoredParam)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Keeps only the parameters whose group satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(ParamGroup) -> bool) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter(|(_, p)| keep(p.group))
            .map(|(n, p)| (n.clone(), p.clone()))
            .collect();
        ParamStore { entries }
    }

    /// Adds every entry of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: &ParamStore) {
        for (n, p) in &other.entries {
            self.entries.insert(n.clone(), p.clone());
        }
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Result<Bound, GradError> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.entries {
            vars.insert(name.clone(), graph.param(name, p.group, p.value.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Registers every parameter as a gradient-free constant.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), graph.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.value.shape() == b.value.shape())
    }
}

/// Graph handles for the parameters of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, GradError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GradError::UnknownParameter(name.to_string()))
    }
}
