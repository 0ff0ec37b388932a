//! Named parameter groups with per-group trainability.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One named parameter tensor. Frozen groups must stay bitwise identical
/// across any number of optimizer steps.
#[derive(Debug, Clone)]
pub struct ParameterGroup<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

/// Registry of parameter groups in a fixed, deterministic order.
///
/// Iteration order is registration order; lookups go through a name index.
/// All training state (initialization, optimizer steps, checkpoints) walks
/// groups in this order so runs are reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry<S: Scalar> {
    groups: Vec<ParameterGroup<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamRegistry<S> {
    pub fn new() -> Self {
        ParamRegistry { groups: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, mut tensor: Tensor<S>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(CoreError::DuplicateGroup(name.to_string()));
        }
        tensor.requires_grad = trainable;
        self.index.insert(name.to_string(), self.groups.len());
        self.groups.push(ParameterGroup { name: name.to_string(), tensor, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParameterGroup<S>> {
        self.index
            .get(name)
            .map(|&i| &self.groups[i])
            .ok_or_else(|| CoreError::UnknownGroup(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParameterGroup<S>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.groups[i]),
            None => Err(CoreError::UnknownGroup(name.to_string())),
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let g = self.get_mut(name)?;
        g.trainable = trainable;
        g.tensor.requires_grad = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParameterGroup<S>> {
        self.groups.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParameterGroup<S>> {
        self.groups.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.name.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.groups.iter().filter(|g| g.trainable).map(|g| g.name.clone()).collect()
    }

    pub fn total_count(&self) -> usize {
        self.groups.iter().map(|g| g.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.groups.iter().filter(|g| g.trainable).map(|g| g.tensor.numel()).sum()
    }

    /// Snapshot of every group's raw values, for bitwise freeze checks.
    pub fn snapshot(&self) -> Vec<(String, Tensor<S>)> {
        self.groups.iter().map(|g| (g.name.clone(), g.tensor.clone())).collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamRegistry<T> {
        let mut out = ParamRegistry::new();
        for g in &self.groups {
            out.register(&g.name, g.tensor.cast::<T>(), g.trainable).unwrap();
        }
        out
    }
}

/// Per-forward-pass cache binding registry groups to tape leaves.
///
/// Each group becomes exactly one leaf per pass, so parameters used in
/// several places (the context generator shared across layers, prompt
/// blocks reused per frame) accumulate gradients on a single node.
#[derive(Default)]
pub struct Binder {
    cache: HashMap<String, crate::tape::Var>,
}

impl Binder {
    pub fn new() -> Self {
        Binder { cache: HashMap::new() }
    }

    pub fn var<S: Scalar>(
        &mut self,
        tape: &mut crate::tape::Tape<S>,
        params: &ParamRegistry<S>,
        name: &str,
    ) -> Result<crate::tape::Var> {
        if let Some(&v) = self.cache.get(name) {
            return Ok(v);
        }
        let g = params.get(name)?;
        let v = tape.leaf(&g.tensor, g.trainable);
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }

    /// Tape node already bound for a group, if any.
    pub fn bound(&self, name: &str) -> Option<crate::tape::Var> {
        self.cache.get(name).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, crate::tape::Var)> {
        self.cache.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut reg = ParamRegistry::<f32>::new();
        reg.register("a.weight", Tensor::zeros(vec![2]), true).unwrap();
        assert!(matches!(
            reg.register("a.weight", Tensor::zeros(vec![2]), true),
            Err(CoreError::DuplicateGroup(_))
        ));
    }

    #[test]
    fn counts_follow_trainability() {
        let mut reg = ParamRegistry::<f32>::new();
        reg.register("a", Tensor::zeros(vec![2, 3]), true).unwrap();
        reg.register("b", Tensor::zeros(vec![4]), false).unwrap();
        assert_eq!(reg.total_count(), 10);
        assert_eq!(reg.trainable_count(), 6);
        reg.set_trainable("b", true).unwrap();
        assert_eq!(reg.trainable_count(), 10);
    }
}
