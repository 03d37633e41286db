//! Gradient-based layer freezing.
//!
//! During the public warm-start the squared minibatch gradients are summed
//! per coordinate. Each layer is then scored by its accumulated mass divided
//! by its size, layers are walked in descending score order and appended
//! while the running parameter count stays within `p·M`. The walk stops at
//! the first layer that does not fit. Either the selected layers or their
//! complement are frozen for DP training.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradTree, ParamTree};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SqGradAccumulator<S: Scalar = f64> {
    u: GradTree<S>,
    steps_seen: u64,
}

impl<S: Scalar> SqGradAccumulator<S> {
    /// Zero accumulator over every layer of `tree`, frozen or not.
    pub fn new(tree: &ParamTree<S>) -> Self {
        let mut all = tree.clone();
        all.freeze_all(false);
        Self {
            u: all.zero_grad(),
            steps_seen: 0,
        }
    }

    pub fn from_parts(u: GradTree<S>, steps_seen: u64) -> Result<Self> {
        if u.entries()
            .iter()
            .any(|(_, t)| t.values().iter().any(|v| *v < S::zero() || !v.is_finite()))
        {
            return Err(Error::Config(
                "accumulator entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { u, steps_seen })
    }

    pub fn sums(&self) -> &GradTree<S> {
        &self.u
    }

    pub fn steps_seen(&self) -> u64 {
        self.steps_seen
    }

    /// `u += g²` element-wise.
    pub fn accumulate(&mut self, g: &GradTree<S>) -> Result<()> {
        if !g.same_layout(&self.u) {
            return Err(Error::Dimension(format!(
                "gradient layers {:?} do not match accumulator {:?}",
                g.names().collect::<Vec<_>>(),
                self.u.names().collect::<Vec<_>>()
            )));
        }
        for ((_, u), (_, g)) in self.u.entries_mut().iter_mut().zip(g.entries()) {
            for (ui, &gi) in u.values_mut().iter_mut().zip(g.values()) {
                *ui += gi * gi;
            }
        }
        self.steps_seen += 1;
        Ok(())
    }

    /// Multiplies every entry by a positive constant.
    pub fn rescale(&mut self, k: S) {
        self.u.scale(k);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub name: String,
    pub dim: usize,
    pub score: f64,
}

/// `Σ u / dim` for every layer of `tree`, in tree order.
pub fn layer_scores<S: Scalar>(acc: &SqGradAccumulator<S>, tree: &ParamTree<S>) -> Result<Vec<LayerScore>> {
    if acc.steps_seen == 0 {
        return Err(Error::Config("accumulator has seen no steps".into()));
    }
    tree.layers()
        .iter()
        .map(|l| {
            let u = acc.u.get(&l.name).ok_or_else(|| Error::UnknownLayer(l.name.clone()))?;
            if u.shape() != l.tensor.shape() {
                return Err(Error::Dimension(format!("accumulator shape mismatch for `{}`", l.name)));
            }
            if l.dim() == 0 {
                return Err(Error::Config(format!("empty layer `{}`", l.name)));
            }
            Ok(LayerScore {
                name: l.name.clone(),
                dim: l.dim(),
                score: u.sum().as_f64() / l.dim() as f64,
            })
        })
        .collect()
}

/// Layer indices ordered by descending score; equal scores keep ascending
/// index order.
pub fn rank_layers(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Prefix-greedy selection: walks layers in rank order and stops at the first
/// one whose addition would push the selected size above `p·m`.
pub fn select_layers(scores: &[f64], dims: &[usize], p: f64, m: usize) -> Result<Vec<usize>> {
    if scores.len() != dims.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} layers",
            scores.len(),
            dims.len()
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("p must be in (0, 1], got {p}")));
    }
    let budget = p * m as f64;
    let mut used = 0usize;
    let mut selected = Vec::new();
    for idx in rank_layers(scores) {
        if (used + dims[idx]) as f64 <= budget {
            used += dims[idx];
            selected.push(idx);
        } else {
            break;
        }
    }
    Ok(selected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePlan {
    /// Scores in tree order.
    pub scores: Vec<LayerScore>,
    /// Selected layer names in rank order.
    pub top_layers: Vec<String>,
    pub freeze_top: bool,
    pub p: f64,
    /// Layers to freeze, in tree order.
    pub frozen_set: Vec<String>,
}

impl FreezePlan {
    pub fn build(scores: Vec<LayerScore>, p: f64, freeze_top: bool) -> Result<Self> {
        let vals: Vec<f64> = scores.iter().map(|s| s.score).collect();
        let dims: Vec<usize> = scores.iter().map(|s| s.dim).collect();
        let m = dims.iter().sum();
        let sel = select_layers(&vals, &dims, p, m)?;
        let top_layers: Vec<String> = sel.iter().map(|&i| scores[i].name.clone()).collect();
        let frozen_set = scores
            .iter()
            .filter(|s| top_layers.contains(&s.name) == freeze_top)
            .map(|s| s.name.clone())
            .collect();
        Ok(Self {
            scores,
            top_layers,
            freeze_top,
            p,
            frozen_set,
        })
    }

    /// Scores the accumulator against `tree` and builds the plan.
    pub fn from_accumulator<S: Scalar>(
        acc: &SqGradAccumulator<S>,
        tree: &ParamTree<S>,
        p: f64,
        freeze_top: bool,
    ) -> Result<Self> {
        Self::build(layer_scores(acc, tree)?, p, freeze_top)
    }

    pub fn selected_dim(&self) -> usize {
        self.scores
            .iter()
            .filter(|s| self.top_layers.contains(&s.name))
            .map(|s| s.dim)
            .sum()
    }

    /// CSV report: `layer,dim,score,rank,selected,frozen`, one row per layer
    /// in tree order. Rank is 1-based.
    pub fn report_csv(&self) -> String {
        let vals: Vec<f64> = self.scores.iter().map(|s| s.score).collect();
        let mut rank = vec![0; vals.len()];
        for (r, idx) in rank_layers(&vals).into_iter().enumerate() {
            rank[idx] = r + 1;
        }
        let mut out = String::from("layer,dim,score,rank,selected,frozen\n");
        for (i, s) in self.scores.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{:e},{},{},{}",
                s.name,
                s.dim,
                s.score,
                rank[i],
                self.top_layers.contains(&s.name),
                self.frozen_set.contains(&s.name)
            );
        }
        out
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.report_csv())?;
        Ok(())
    }
}

/// Sets the frozen flag on exactly the plan's frozen set.
pub fn apply_freeze<S: Scalar>(tree: &ParamTree<S>, plan: &FreezePlan) -> Result<ParamTree<S>> {
    if let Some(missing) = plan.frozen_set.iter().find(|n| tree.index_of(n).is_none()) {
        return Err(Error::UnknownLayer(missing.clone()));
    }
    let mut out = tree.clone();
    for layer in out.layers_mut() {
        layer.frozen = plan.frozen_set.contains(&layer.name);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tree(dims: &[usize]) -> ParamTree {
        let mut t = ParamTree::new();
        for (i, &d) in dims.iter().enumerate() {
            t.push(format!("l{i}"), Tensor::zeros(&[d]), false).unwrap();
        }
        t
    }

    fn grad(vals: &[&[f64]]) -> GradTree {
        GradTree::from_entries(
            vals.iter()
                .enumerate()
                .map(|(i, v)| (format!("l{i}"), Tensor::new(vec![v.len()], v.to_vec()).unwrap()))
                .collect(),
        )
    }

    #[test]
    fn zero_gradient_leaves_accumulator() {
        let t = tree(&[2, 1]);
        let mut acc = SqGradAccumulator::new(&t);
        acc.accumulate(&t.zero_grad()).unwrap();
        assert_eq!(acc.sums(), &t.zero_grad());
        assert_eq!(acc.steps_seen(), 1);
    }

    #[test]
    fn sign_flip_accumulates_twice() {
        let t = tree(&[2]);
        let mut acc = SqGradAccumulator::new(&t);
        acc.accumulate(&grad(&[&[1.5, -2.0]])).unwrap();
        acc.accumulate(&grad(&[&[-1.5, 2.0]])).unwrap();
        assert_eq!(acc.sums().flatten(), vec![4.5, 8.0]);
    }

    #[test]
    fn accumulate_shape_mismatch() {
        let mut acc = SqGradAccumulator::new(&tree(&[2]));
        assert!(acc.accumulate(&grad(&[&[1.0]])).is_err());
    }

    #[test]
    fn score_is_mean_of_sums() {
        let t = tree(&[2]);
        let acc = SqGradAccumulator::from_parts(grad(&[&[4.0, 6.0]]), 1).unwrap();
        assert_eq!(layer_scores(&acc, &t).unwrap()[0].score, 5.0);
    }

    #[test]
    fn zero_accumulator_scores_zero() {
        let t = tree(&[3, 2]);
        let mut acc = SqGradAccumulator::new(&t);
        acc.accumulate(&t.zero_grad()).unwrap();
        assert!(layer_scores(&acc, &t).unwrap().iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn scoring_requires_steps() {
        let t = tree(&[3]);
        assert!(layer_scores(&SqGradAccumulator::new(&t), &t).is_err());
    }

    #[test]
    fn full_budget_selects_everything() {
        let sel = select_layers(&[0.3, 0.9, 0.1], &[5, 7, 2], 1.0, 14).unwrap();
        assert_eq!(sel, vec![1, 0, 2]);
    }

    #[test]
    fn oversize_first_layer_gives_empty() {
        let sel = select_layers(&[0.3, 0.9, 0.1], &[1, 50, 1], 0.1, 52).unwrap();
        assert!(sel.is_empty());
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(rank_layers(&[1.0, 2.0, 2.0, 1.0]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn invalid_p_rejected() {
        assert!(select_layers(&[1.0], &[1], 0.0, 1).is_err());
        assert!(select_layers(&[1.0], &[1], 1.5, 1).is_err());
    }

    fn plan(p: f64, freeze_top: bool) -> FreezePlan {
        let scores = vec![
            LayerScore {
                name: "l0".into(),
                dim: 100,
                score: 0.5,
            },
            LayerScore {
                name: "l1".into(),
                dim: 2,
                score: 3.0,
            },
            LayerScore {
                name: "l2".into(),
                dim: 5,
                score: 1.0,
            },
        ];
        FreezePlan::build(scores, p, freeze_top).unwrap()
    }

    #[test]
    fn freeze_top_empty_freezes_nothing() {
        let p = plan(0.001, true);
        assert!(p.top_layers.is_empty());
        let t = apply_freeze(&tree(&[100, 2, 5]), &p).unwrap();
        assert!(t.frozen_names().is_empty());
    }

    #[test]
    fn freeze_rest_empty_freezes_everything() {
        let p = plan(0.001, false);
        let t = apply_freeze(&tree(&[100, 2, 5]), &p).unwrap();
        assert_eq!(t.frozen_names(), vec!["l0", "l1", "l2"]);
    }

    #[test]
    fn freeze_top_selects_high_scores() {
        let p = plan(0.1, true);
        assert_eq!(p.top_layers, vec!["l1", "l2"]);
        assert_eq!(p.selected_dim(), 7);
        let t = apply_freeze(&tree(&[100, 2, 5]), &p).unwrap();
        assert_eq!(t.frozen_names(), vec!["l1", "l2"]);
        assert_eq!(apply_freeze(&t, &p).unwrap(), t);
    }

    #[test]
    fn unknown_layer_rejected() {
        let p = plan(0.1, true);
        assert!(matches!(apply_freeze(&tree(&[100]), &p), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn report_lists_every_layer() {
        let csv = plan(0.1, true).report_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,dim,score,rank,selected,frozen");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("l1,2,") && lines[2].ends_with(",1,true,true"));
    }
}
