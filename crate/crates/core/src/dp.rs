//! Per-example clipping and Gaussian noising.
//!
//! Three clipping modes are supported. `Global` scales each example's whole
//! gradient to L2 norm at most `C`. The per-layer modes give every trainable
//! layer its own bound `c_l` with `Σ c_l² = C²`, so the flattened clipped
//! gradient still has norm at most `C`:
//!
//! * `PerLayerUniform`: `c_l = C / √L`
//! * `PerLayerDim`: `c_l = C · √(dim(l) / Σ dim)`
//!
//! Noise is added once per step to the sum of clipped gradients, with
//! standard deviation `z · C` per coordinate.

use rand::Rng;
use rand_distr::StandardNormal;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradTree, ParamTree};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default global clipping bound.
pub const DEFAULT_GLOBAL_CLIP: f64 = 1.5;
/// Default total bound for per-layer clipping (dimension-proportional).
pub const DEFAULT_PER_LAYER_CLIP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    Global,
    PerLayerUniform,
    PerLayerDim,
}

impl ClipMode {
    pub fn label(&self) -> &'static str {
        match self {
            ClipMode::Global => "global",
            ClipMode::PerLayerUniform => "per_layer_uniform",
            ClipMode::PerLayerDim => "per_layer_dim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub mode: ClipMode,
    pub bound: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self::global(DEFAULT_GLOBAL_CLIP)
    }
}

impl ClipSpec {
    pub fn global(bound: f64) -> Self {
        Self {
            mode: ClipMode::Global,
            bound,
        }
    }

    pub fn per_layer_dim(bound: f64) -> Self {
        Self {
            mode: ClipMode::PerLayerDim,
            bound,
        }
    }

    pub fn per_layer_uniform(bound: f64) -> Self {
        Self {
            mode: ClipMode::PerLayerUniform,
            bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bound > 0.0 && self.bound.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "clip bound must be positive and finite, got {}",
                self.bound
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Noise multiplier z; noise std is z·C.
    pub multiplier: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.multiplier >= 0.0 && self.multiplier.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "noise multiplier must be finite and >= 0, got {}",
                self.multiplier
            )))
        }
    }
}

/// Per-layer bounds for layers of the given sizes, in order.
pub fn per_layer_bounds_for_dims(dims: &[usize], spec: &ClipSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if dims.is_empty() {
        return Err(Error::Config(
            "per-layer clipping needs at least one trainable layer".into(),
        ));
    }
    let c = spec.bound;
    match spec.mode {
        ClipMode::Global => Err(Error::Config("global clipping has no per-layer bounds".into())),
        ClipMode::PerLayerUniform => {
            let each = c / (dims.len() as f64).sqrt();
            Ok(vec![each; dims.len()])
        }
        ClipMode::PerLayerDim => {
            let total: usize = dims.iter().sum();
            Ok(dims.iter().map(|&d| c * (d as f64 / total as f64).sqrt()).collect())
        }
    }
}

/// Per-layer bounds for the trainable layers of `tree`, in tree order.
pub fn per_layer_bounds<S: Scalar>(tree: &ParamTree<S>, spec: &ClipSpec) -> Result<Vec<f64>> {
    let dims: Vec<usize> = tree.trainable().map(|l| l.dim()).collect();
    per_layer_bounds_for_dims(&dims, spec)
}

/// `g · min(1, C/‖g‖)` over the flattened gradient. Returns the clipped
/// gradient and the pre-clip norm.
pub fn clip_global<S: Scalar>(g: &GradTree<S>, bound: f64) -> (GradTree<S>, f64) {
    let norm = g.norm().as_f64();
    let mut out = g.clone();
    if norm > bound {
        out.scale(S::of(bound / norm));
    }
    (out, norm)
}

/// Scales each layer independently by `min(1, c_l/‖g_l‖)`. Returns the
/// clipped gradient and the pre-clip layer norms.
pub fn clip_per_layer<S: Scalar>(g: &GradTree<S>, bounds: &[f64]) -> Result<(GradTree<S>, Vec<f64>)> {
    if bounds.len() != g.len() {
        return Err(Error::Dimension(format!(
            "{} bounds for {} gradient layers",
            bounds.len(),
            g.len()
        )));
    }
    let mut out = g.clone();
    let mut norms = Vec::with_capacity(bounds.len());
    for ((_, t), &c) in out.entries_mut().iter_mut().zip(bounds) {
        let n = t.norm().as_f64();
        if n > c {
            t.scale(S::of(c / n));
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// A clipping rule bound to the trainable layout of a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Clipper {
    spec: ClipSpec,
    layer_bounds: Option<Vec<f64>>,
}

/// Result of clipping one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Clipped<S: Scalar = f64> {
    pub grad: GradTree<S>,
    /// Pre-clip norms: one entry in global mode, one per layer otherwise.
    pub norms: Vec<f64>,
    /// Pre-clip norm of the flattened gradient.
    pub total_norm: f64,
}

impl Clipper {
    pub fn new<S: Scalar>(spec: ClipSpec, tree: &ParamTree<S>) -> Result<Self> {
        spec.validate()?;
        if tree.trainable().next().is_none() {
            return Err(Error::Config("no trainable layers to clip".into()));
        }
        let layer_bounds = match spec.mode {
            ClipMode::Global => None,
            _ => Some(per_layer_bounds(tree, &spec)?),
        };
        Ok(Self { spec, layer_bounds })
    }

    pub fn spec(&self) -> &ClipSpec {
        &self.spec
    }

    /// Total L2 sensitivity of one clipped example.
    pub fn bound(&self) -> f64 {
        self.spec.bound
    }

    /// Bounds compared against [`Clipped::norms`].
    pub fn bounds(&self) -> Vec<f64> {
        self.layer_bounds.clone().unwrap_or_else(|| vec![self.spec.bound])
    }

    pub fn clip<S: Scalar>(&self, g: &GradTree<S>) -> Result<Clipped<S>> {
        let total_norm = g.norm().as_f64();
        match &self.layer_bounds {
            None => {
                let (grad, n) = clip_global(g, self.spec.bound);
                Ok(Clipped {
                    grad,
                    norms: vec![n],
                    total_norm,
                })
            }
            Some(b) => {
                let (grad, norms) = clip_per_layer(g, b)?;
                Ok(Clipped {
                    grad,
                    norms,
                    total_norm,
                })
            }
        }
    }
}

/// Fraction of norms strictly above their bound. Each entry of `norms`
/// is one example's norms, aligned with `bounds`.
pub fn clip_fraction(norms: &[Vec<f64>], bounds: &[f64]) -> Result<f64> {
    if norms.is_empty() {
        return Err(Error::DegenerateBatch("clip_fraction of zero examples".into()));
    }
    let mut over = 0usize;
    let mut total = 0usize;
    for ex in norms {
        if ex.len() != bounds.len() {
            return Err(Error::Dimension(format!(
                "{} norms for {} bounds",
                ex.len(),
                bounds.len()
            )));
        }
        over += ex.iter().zip(bounds).filter(|(n, b)| n > b).count();
        total += ex.len();
    }
    Ok(over as f64 / total as f64)
}

/// Standard deviation `std` Gaussian noise shaped like `layout`, drawn from
/// the stream keyed by `(seed, step)` in layer order.
pub fn gaussian_noise<S: Scalar>(layout: &GradTree<S>, std: f64, seed: u64, step: u64) -> GradTree<S> {
    let mut rng = stream(seed, Domain::Noise, step, 0);
    GradTree::from_entries(
        layout
            .entries()
            .iter()
            .map(|(name, t)| {
                let noise = Tensor::from_fn(t.shape(), |_| {
                    let z: f64 = rng.sample(StandardNormal);
                    S::of(z * std)
                });
                (name.clone(), noise)
            })
            .collect(),
    )
}

/// Sum of clipped gradients with the sensitivity guard applied.
pub fn clipped_sum<S: Scalar>(clipped: &[GradTree<S>], bound: f64) -> Result<GradTree<S>> {
    let tol = bound * 1e-9;
    for (index, g) in clipped.iter().enumerate() {
        let norm = g.norm().as_f64();
        if norm > bound + tol {
            return Err(Error::Sensitivity { index, norm, bound });
        }
    }
    GradTree::sum(clipped)
}

/// `(Σ g_i + N(0, (z·C)² I)) / B`. The noise is one draw per step keyed by
/// `(noise.seed, step)`; with `z = 0` no noise is sampled.
pub fn aggregate_and_noise<S: Scalar>(
    clipped: &[GradTree<S>],
    bound: f64,
    noise: &NoiseSpec,
    step: u64,
    batch_size: usize,
) -> Result<GradTree<S>> {
    noise.validate()?;
    if batch_size == 0 {
        return Err(Error::DegenerateBatch("batch size must be positive".into()));
    }
    let mut sum = clipped_sum(clipped, bound)?;
    if noise.multiplier > 0.0 {
        let n = gaussian_noise(&sum, noise.multiplier * bound, noise.seed, step);
        for ((_, a), (_, b)) in sum.entries_mut().iter_mut().zip(n.entries()) {
            a.add_assign(b)?;
        }
    }
    sum.scale(S::one() / S::of(batch_size as f64));
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(parts: &[&[f64]]) -> GradTree {
        GradTree::from_entries(
            parts
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("l{i}"), Tensor::new(vec![v.len()], v.to_vec()).unwrap()))
                .collect(),
        )
    }

    #[test]
    fn below_bound_unchanged() {
        let g = grad(&[&[0.6, 0.8]]);
        let (c, n) = clip_global(&g, 1.5);
        assert_eq!(c, g);
        assert!((n - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_stays_zero() {
        let g = grad(&[&[0.0, 0.0], &[0.0]]);
        assert_eq!(clip_global(&g, 1.5).0, g);
    }

    #[test]
    fn norm_three_halved_at_one_and_a_half() {
        let g = grad(&[&[1.0, 2.0], &[2.0]]);
        let (c, _) = clip_global(&g, 1.5);
        assert_eq!(c.flatten(), vec![0.5, 1.0, 1.0]);
    }

    #[test]
    fn equal_layers_give_half_bound() {
        for spec in [ClipSpec::per_layer_uniform(3.0), ClipSpec::per_layer_dim(3.0)] {
            let b = per_layer_bounds_for_dims(&[5, 5, 5, 5], &spec).unwrap();
            assert_eq!(b, vec![1.5; 4]);
        }
    }

    #[test]
    fn dim_bounds_closed_form() {
        let b = per_layer_bounds_for_dims(&[1, 3], &ClipSpec::per_layer_dim(2.0)).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-15);
        assert!((b[1] - 3f64.sqrt()).abs() < 1e-15);
        assert!((b.iter().map(|c| c * c).sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn default_bounds() {
        assert_eq!(ClipSpec::default(), ClipSpec::global(1.5));
        assert_eq!(DEFAULT_PER_LAYER_CLIP, 0.1);
    }

    #[test]
    fn no_trainable_layers_is_config_error() {
        assert!(matches!(
            per_layer_bounds_for_dims(&[], &ClipSpec::per_layer_dim(1.0)),
            Err(Error::Config(_))
        ));
        let mut tree = ParamTree::<f64>::new().with_layer("a", Tensor::zeros(&[2])).unwrap();
        tree.freeze_all(true);
        assert!(Clipper::new(ClipSpec::per_layer_dim(1.0), &tree).is_err());
    }

    #[test]
    fn per_layer_independence() {
        let g = grad(&[&[0.2], &[2.0, 0.0], &[0.0, 0.5]]);
        let (c, norms) = clip_per_layer(&g, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c.flatten(), vec![0.2, 1.0, 0.0, 0.0, 0.5]);
        assert_eq!(norms, vec![0.2, 2.0, 0.5]);
        let small = grad(&[&[0.1], &[0.2]]);
        assert_eq!(clip_per_layer(&small, &[1.0, 1.0]).unwrap().0, small);
    }

    #[test]
    fn clip_fraction_counts() {
        assert_eq!(clip_fraction(&[vec![0.0], vec![0.0]], &[1.0]).unwrap(), 0.0);
        assert_eq!(clip_fraction(&[vec![2.0], vec![2.0]], &[1.0]).unwrap(), 1.0);
        // Exactly at the bound is not clipped.
        let norms = vec![vec![0.5, 1.0], vec![1.5, 0.1], vec![3.0, 2.0]];
        let expect = norms
            .iter()
            .flatten()
            .zip([1.0, 1.0].iter().cycle())
            .filter(|(n, b)| n > b)
            .count() as f64
            / 6.0;
        assert_eq!(clip_fraction(&norms, &[1.0, 1.0]).unwrap(), expect);
        assert_eq!(expect, 0.5);
    }

    #[test]
    fn zero_noise_gives_exact_mean() {
        let gs = vec![grad(&[&[0.1, 0.2]]), grad(&[&[0.3, -0.2]])];
        let out = aggregate_and_noise(
            &gs,
            1.0,
            &NoiseSpec {
                multiplier: 0.0,
                seed: 1,
            },
            0,
            2,
        )
        .unwrap();
        let v = out.flatten();
        assert!((v[0] - 0.2).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn sensitivity_guard_rejects_unclipped() {
        let gs = vec![grad(&[&[3.0, 4.0]])];
        assert!(matches!(
            aggregate_and_noise(
                &gs,
                1.0,
                &NoiseSpec {
                    multiplier: 0.0,
                    seed: 0
                },
                0,
                1
            ),
            Err(Error::Sensitivity { .. })
        ));
    }

    #[test]
    fn noise_is_reproducible_per_step() {
        let gs = vec![grad(&[&[0.0; 16]])];
        let spec = NoiseSpec {
            multiplier: 1.0,
            seed: 9,
        };
        let a = aggregate_and_noise(&gs, 1.5, &spec, 4, 1).unwrap();
        let b = aggregate_and_noise(&gs, 1.5, &spec, 4, 1).unwrap();
        let c = aggregate_and_noise(&gs, 1.5, &spec, 5, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
