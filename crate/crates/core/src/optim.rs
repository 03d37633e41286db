//! Adam over the trainable layers of a [`ParamTree`].
//!
//! The same state drives the non-private warm-start and DP pre-training; in
//! the DP case the gradient handed to [`AdamState::step`] is already the
//! clipped, noised minibatch mean.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradTree, ParamTree};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Moment estimates mirroring the trainable layers of a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar = f64> {
    pub config: AdamConfig,
    first: GradTree<S>,
    second: GradTree<S>,
    steps: u64,
}

/// Optimizer state used for DP pre-training.
pub type DpAdamState<S = f64> = AdamState<S>;

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, tree: &ParamTree<S>) -> Self {
        Self {
            config,
            first: tree.zero_grad(),
            second: tree.zero_grad(),
            steps: 0,
        }
    }

    /// Drops all moments and re-shapes them to the tree's current trainable
    /// layers. Used when the frozen set changes.
    pub fn reset(&mut self, tree: &ParamTree<S>) {
        *self = Self::new(self.config, tree);
    }

    /// Keeps the moments of layers that remain trainable and drops the rest.
    pub fn retain_trainable(&mut self, tree: &ParamTree<S>) {
        let keep = |g: &GradTree<S>| {
            GradTree::from_entries(
                tree.trainable()
                    .map(|l| {
                        let t = g
                            .get(&l.name)
                            .cloned()
                            .unwrap_or_else(|| crate::tensor::Tensor::zeros(l.tensor.shape()));
                        (l.name.clone(), t)
                    })
                    .collect(),
            )
        };
        self.first = keep(&self.first);
        self.second = keep(&self.second);
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self) -> &GradTree<S> {
        &self.first
    }

    pub fn second_moment(&self) -> &GradTree<S> {
        &self.second
    }

    /// One bias-corrected Adam update. Frozen layers are never touched.
    pub fn step(&mut self, tree: &mut ParamTree<S>, grad: &GradTree<S>) -> Result<()> {
        if !grad.same_layout(&self.first) {
            return Err(Error::State(format!(
                "gradient layers {:?} do not match optimizer layers {:?}",
                grad.names().collect::<Vec<_>>(),
                self.first.names().collect::<Vec<_>>()
            )));
        }
        let trainable: Vec<&str> = tree.trainable().map(|l| l.name.as_str()).collect();
        if !trainable.iter().copied().eq(grad.names()) {
            return Err(Error::State(format!(
                "tree trainable layers {trainable:?} do not match optimizer state"
            )));
        }
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::one() - S::of(c.beta1.powi(self.steps as i32));
        let bc2 = S::one() - S::of(c.beta2.powi(self.steps as i32));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        for (((name, g), (_, m)), (_, v)) in grad
            .entries()
            .iter()
            .zip(self.first.entries_mut())
            .zip(self.second.entries_mut())
        {
            let p = tree.tensor_mut(name)?;
            for (((pi, &gi), mi), vi) in p
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(m.values_mut())
                .zip(v.values_mut())
            {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one DP-Adam update with an already clipped and noised gradient.
pub fn dp_adam_step<S: Scalar>(
    state: &mut DpAdamState<S>,
    tree: &mut ParamTree<S>,
    noisy_grad: &GradTree<S>,
) -> Result<()> {
    state.step(tree, noisy_grad)
}
