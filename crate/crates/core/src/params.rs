//! Named-layer parameter trees and gradient trees.

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Scalar};
use crate::tensor::{sum_tensors, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S: Scalar = f64> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub frozen: bool,
}

impl<S: Scalar> Layer<S> {
    pub fn dim(&self) -> usize {
        self.tensor.len()
    }
}

/// Ordered model state. Each entry is one freezable "layer" in the sense of
/// layer freezing: a weight matrix, a bias vector, a norm scale, etc.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTree<S: Scalar = f64> {
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> ParamTree<S> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate layer name `{name}`")));
        }
        self.layers.push(Layer { name, tensor, frozen });
        Ok(())
    }

    pub fn with_layer(mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<Self> {
        self.push(name, tensor, false)?;
        Ok(self)
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Layer<S>> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).map(|l| &l.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.layers
            .iter_mut()
            .find(|l| l.name == name)
            .map(|l| &mut l.tensor)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        self.layers[idx].frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        self.layers.iter_mut().for_each(|l| l.frozen = frozen);
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Layer<S>> {
        self.layers.iter().filter(|l| !l.frozen)
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.frozen)
            .map(|l| l.name.as_str())
            .collect()
    }

    /// M: number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(Layer::dim).sum()
    }

    pub fn total_count(&self) -> usize {
        self.layers.iter().map(Layer::dim).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.tensor.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ParamTree<T> {
        ParamTree {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    tensor: l.tensor.cast(),
                    frozen: l.frozen,
                })
                .collect(),
        }
    }

    /// Zero gradient covering every trainable layer.
    pub fn zero_grad(&self) -> GradTree<S> {
        GradTree {
            entries: self
                .trainable()
                .map(|l| (l.name.clone(), Tensor::zeros(l.tensor.shape())))
                .collect(),
        }
    }
}

/// Gradient over the trainable layers of a [`ParamTree`], in tree order.
/// Frozen layers have no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTree<S: Scalar = f64> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> GradTree<S> {
    pub fn from_entries(entries: Vec<(String, Tensor<S>)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<S>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn dim(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn layer_norms(&self) -> Vec<S> {
        self.entries.iter().map(|(_, t)| t.norm()).collect()
    }

    /// L2 norm of the flattened concatenation of all entries.
    pub fn norm(&self) -> S {
        let sq: Vec<S> = self.entries.iter().map(|(_, t)| t.norm_sq()).collect();
        pairwise_sum(&sq).sqrt()
    }

    pub fn scale(&mut self, k: S) {
        self.entries.iter_mut().for_each(|(_, t)| t.scale(k));
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.same_shape(y))
    }

    /// Element-wise sum with a fixed pairwise reduction tree.
    pub fn sum(grads: &[GradTree<S>]) -> Result<Self> {
        let first = grads
            .first()
            .ok_or_else(|| Error::DegenerateBatch("no gradients to sum".into()))?;
        if let Some(bad) = grads.iter().find(|g| !first.same_layout(g)) {
            return Err(Error::Dimension(format!(
                "gradient layouts differ: {:?} vs {:?}",
                first.names().collect::<Vec<_>>(),
                bad.names().collect::<Vec<_>>()
            )));
        }
        let entries = first
            .entries
            .iter()
            .enumerate()
            .map(|(i, (name, _))| {
                let parts: Vec<&Tensor<S>> = grads.iter().map(|g| &g.entries[i].1).collect();
                Ok((name.clone(), sum_tensors(&parts)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn mean(grads: &[GradTree<S>]) -> Result<Self> {
        let mut s = Self::sum(grads)?;
        s.scale(S::one() / S::of(grads.len() as f64));
        Ok(s)
    }

    /// Flattened coordinates in entry order.
    pub fn flatten(&self) -> Vec<S> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.values().iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.push("a", Tensor::zeros(&[2, 3]), false).unwrap();
        t.push("b", Tensor::zeros(&[4]), true).unwrap();
        t.push("c", Tensor::zeros(&[5]), false).unwrap();
        t
    }

    #[test]
    fn trainable_count_skips_frozen() {
        let t = tree();
        assert_eq!(t.trainable_count(), 11);
        assert_eq!(t.total_count(), 15);
        assert_eq!(t.frozen_names(), vec!["b"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut t = tree();
        assert!(t.push("a", Tensor::zeros(&[1]), false).is_err());
    }

    #[test]
    fn zero_grad_has_no_frozen_entry() {
        let g = tree().zero_grad();
        assert_eq!(g.names().collect::<Vec<_>>(), vec!["a", "c"]);
        assert_eq!(g.dim(), 11);
    }

    #[test]
    fn global_norm_is_flattened_norm() {
        let g = GradTree::from_entries(vec![
            ("x".into(), Tensor::new(vec![2], vec![3.0, 0.0]).unwrap()),
            ("y".into(), Tensor::new(vec![1], vec![4.0]).unwrap()),
        ]);
        assert_eq!(g.norm(), 5.0);
        assert_eq!(g.layer_norms(), vec![3.0, 4.0]);
    }

    #[test]
    fn unknown_layer_lookup_fails() {
        assert!(matches!(tree().get("zz"), Err(Error::UnknownLayer(_))));
    }
}
