//! Masked-prediction pre-training task with random-projection quantizer
//! targets.
//!
//! A frozen random projection followed by a nearest-neighbour lookup in a
//! frozen, row-normalised codebook turns each clean feature frame into a
//! discrete code. The encoder sees span-masked features and is trained to
//! predict the codes of the masked frames.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::params::{GradTree, ParamTree};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tape::{value_and_grad, Tape};
use crate::tensor::Tensor;

/// Frozen quantizer. Never part of a [`ParamTree`], so it can never receive
/// a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    projection: Tensor<f64>,
    entries: Tensor<f64>,
    seed: u64,
}

impl Codebook {
    /// Projection entries ~ N(0, 1/d_feat); codebook rows ~ N(0, 1) then
    /// L2-normalised.
    pub fn random(d_feat: usize, d_code: usize, k: usize, seed: u64) -> Result<Self> {
        if d_feat == 0 || d_code == 0 || k == 0 {
            return Err(Error::Config("codebook dimensions must be positive".into()));
        }
        let mut rng = stream(seed, Domain::Codebook, 0, 0);
        let projection = Tensor::randn(&[d_feat, d_code], (1.0 / d_feat as f64).sqrt(), &mut rng);
        let entries = Tensor::randn(&[k, d_code], 1.0, &mut rng);
        Self::from_parts(projection, entries, seed)
    }

    /// Builds a codebook from explicit tensors, normalising the entry rows.
    pub fn from_parts(projection: Tensor<f64>, mut entries: Tensor<f64>, seed: u64) -> Result<Self> {
        if projection.rank() != 2 || entries.rank() != 2 || projection.shape()[1] != entries.shape()[1] {
            return Err(Error::Dimension(format!(
                "projection {:?} incompatible with entries {:?}",
                projection.shape(),
                entries.shape()
            )));
        }
        let d = entries.shape()[1];
        for row in entries.values_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Config("zero codebook entry".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            projection,
            entries,
            seed,
        })
    }

    pub fn projection(&self) -> &Tensor<f64> {
        &self.projection
    }

    pub fn entries(&self) -> &Tensor<f64> {
        &self.entries
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_feat(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    /// Code of a single frame.
    pub fn code_of<S: Scalar>(&self, frame: &[S]) -> usize {
        let (d_feat, d_code) = (self.projection.shape()[0], self.projection.shape()[1]);
        let p = self.projection.values();
        let mut z = vec![0.0; d_code];
        for (i, &x) in frame.iter().enumerate().take(d_feat) {
            let x = x.as_f64();
            for (zj, &pij) in z.iter_mut().zip(&p[i * d_code..(i + 1) * d_code]) {
                *zj += x * pij;
            }
        }
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            z.iter_mut().for_each(|v| *v /= n);
        }
        let mut best = (0, f64::INFINITY);
        for (k, e) in self.entries.values().chunks(d_code).enumerate() {
            let d: f64 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

/// Nearest-codebook-entry code for every frame of `[B, T, d_feat]`
/// features, flattened to `B·T`. Ties go to the lowest index.
pub fn quantize_targets<S: Scalar>(features: &Tensor<S>, cb: &Codebook) -> Result<Vec<usize>> {
    let d = *features.shape().last().unwrap_or(&0);
    if features.rank() != 3 || d != cb.d_feat() {
        return Err(Error::Dimension(format!(
            "features {:?} do not match codebook input width {}",
            features.shape(),
            cb.d_feat()
        )));
    }
    Ok(features.values().chunks(d).map(|f| cb.code_of(f)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    /// Seeded standard-normal noise frames.
    Noise,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    /// Probability that a frame starts a masked span.
    pub mask_prob: f64,
    pub span_len: usize,
    #[serde(default = "default_fill")]
    pub fill: MaskFill,
}

fn default_fill() -> MaskFill {
    MaskFill::Noise
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            mask_prob: 0.05,
            span_len: 3,
            fill: MaskFill::Noise,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!(
                "mask_prob must be in (0, 1), got {}",
                self.mask_prob
            )));
        }
        if self.span_len == 0 {
            return Err(Error::Config("span_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Seeded synthetic dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_examples: usize,
    pub frames: usize,
    pub d_feat: usize,
    /// Lag-one autocorrelation of each feature channel.
    #[serde(default = "default_ar")]
    pub ar_coef: f64,
}

fn default_ar() -> f64 {
    0.9
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_examples: 2000,
            frames: 24,
            d_feat: 16,
            ar_coef: default_ar(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_examples == 0 || self.frames == 0 || self.d_feat == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if !(self.ar_coef.abs() < 1.0) {
            return Err(Error::Config("ar_coef must be in (-1, 1)".into()));
        }
        Ok(())
    }

    /// One example as a `[T, d_feat]` frame sequence: independent stationary
    /// Gaussian AR(1) channels.
    pub fn example<S: Scalar>(&self, id: u64) -> Vec<S> {
        let mut rng = stream(self.seed, Domain::Data, id, 0);
        let rho = self.ar_coef;
        let innov = (1.0 - rho * rho).sqrt();
        let mut prev: Vec<f64> = (0..self.d_feat).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = Vec::with_capacity(self.frames * self.d_feat);
        for t in 0..self.frames {
            if t > 0 {
                for p in prev.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *p = rho * *p + innov * e;
                }
            }
            out.extend(prev.iter().map(|&v| S::of(v)));
        }
        out
    }

    pub fn batch<S: Scalar>(&self, ids: &[u64]) -> Result<SynthBatch<S>> {
        let mut values = Vec::with_capacity(ids.len() * self.frames * self.d_feat);
        for &id in ids {
            values.extend(self.example::<S>(id));
        }
        Ok(SynthBatch {
            features: Tensor::new(vec![ids.len(), self.frames, self.d_feat], values)?,
            ids: ids.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBatch<S: Scalar = f64> {
    /// `[B, T, d_feat]`
    pub features: Tensor<S>,
    pub ids: Vec<u64>,
}

impl<S: Scalar> SynthBatch<S> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Masked<S: Scalar = f64> {
    pub features: Tensor<S>,
    /// Flattened `[B, T]`; true where a frame was replaced.
    pub mask: Vec<bool>,
}

/// Span masking. Each example draws from its own stream keyed by
/// `(stream_seed, example id)`, so masks do not depend on batch composition.
/// An example that ends up with no masked frame gets exactly one span at a
/// uniformly drawn start.
pub fn apply_mask<S: Scalar>(batch: &SynthBatch<S>, spec: &MaskSpec, stream_seed: u64) -> Result<Masked<S>> {
    spec.validate()?;
    let shape = batch.features.shape();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if t <= spec.span_len {
        return Err(Error::Config(format!(
            "span_len {} must be shorter than {t} frames",
            spec.span_len
        )));
    }
    let mut features = batch.features.clone();
    let mut mask = vec![false; b * t];
    let last_start = t - spec.span_len;
    for (ex, &id) in batch.ids.iter().enumerate() {
        let mut rng = stream(stream_seed, Domain::Mask, id, 0);
        let m = &mut mask[ex * t..(ex + 1) * t];
        for start in 0..=last_start {
            if rng.gen::<f64>() < spec.mask_prob {
                m[start..start + spec.span_len].iter_mut().for_each(|x| *x = true);
            }
        }
        if !m.iter().any(|&x| x) {
            let start = rng.gen_range(0..=last_start);
            m[start..start + spec.span_len].iter_mut().for_each(|x| *x = true);
        }
        let vals = features.values_mut();
        for (ti, _) in m.iter().enumerate().filter(|(_, &x)| x) {
            let frame = &mut vals[(ex * t + ti) * d..(ex * t + ti + 1) * d];
            for v in frame {
                *v = match spec.fill {
                    MaskFill::Noise => S::of(rng.sample(StandardNormal)),
                    MaskFill::Zero => S::zero(),
                };
            }
        }
    }
    Ok(Masked { features, mask })
}

/// One prepared training example: masked input, clean-frame targets and the
/// mask selecting which frames count toward the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SslExample<S: Scalar = f64> {
    /// `[1, T, d_feat]`
    pub input: Tensor<S>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Quantizes clean features, masks them and splits the batch into
/// single-example microbatches.
pub fn prepare_examples<S: Scalar>(
    batch: &SynthBatch<S>,
    cb: &Codebook,
    spec: &MaskSpec,
    stream_seed: u64,
) -> Result<Vec<SslExample<S>>> {
    let codes = quantize_targets(&batch.features, cb)?;
    let masked = apply_mask(batch, spec, stream_seed)?;
    let shape = batch.features.shape();
    let (t, d) = (shape[1], shape[2]);
    (0..batch.len())
        .map(|ex| {
            Ok(SslExample {
                input: Tensor::new(
                    vec![1, t, d],
                    masked.features.values()[ex * t * d..(ex + 1) * t * d].to_vec(),
                )?,
                targets: codes[ex * t..(ex + 1) * t].to_vec(),
                mask: masked.mask[ex * t..(ex + 1) * t].to_vec(),
            })
        })
        .collect()
}

/// Masked-prediction loss and gradient for a single example.
pub fn example_grad<S: Scalar>(
    tree: &ParamTree<S>,
    model: &EncoderConfig,
    ex: &SslExample<S>,
) -> Result<(S, GradTree<S>)> {
    value_and_grad(tree, |tape, p| {
        let x = tape.constant(ex.input.clone());
        let logits = model.logits(tape, p, x)?;
        tape.softmax_xent(logits, &ex.targets, &ex.mask)
    })
}

pub fn example_loss<S: Scalar>(tree: &ParamTree<S>, model: &EncoderConfig, ex: &SslExample<S>) -> Result<S> {
    let mut tape = Tape::new();
    let p = tape.bind(tree);
    let x = tape.constant(ex.input.clone());
    let logits = model.logits(&mut tape, &p, x)?;
    let loss = tape.softmax_xent(logits, &ex.targets, &ex.mask)?;
    Ok(tape.value(loss).values()[0])
}

/// Per-example losses and gradients. Examples are evaluated in parallel and
/// returned in input order.
pub fn per_example_grads<S: Scalar>(
    tree: &ParamTree<S>,
    model: &EncoderConfig,
    examples: &[SslExample<S>],
) -> Result<Vec<(S, GradTree<S>)>> {
    examples.par_iter().map(|ex| example_grad(tree, model, ex)).collect()
}

/// Mean masked-prediction loss over the examples of a batch, each example
/// weighted equally.
pub fn ssl_loss<S: Scalar>(
    tree: &ParamTree<S>,
    model: &EncoderConfig,
    batch: &SynthBatch<S>,
    cb: &Codebook,
    spec: &MaskSpec,
    stream_seed: u64,
) -> Result<S> {
    model.check_tree(tree)?;
    let examples = prepare_examples(batch, cb, spec, stream_seed)?;
    let losses: Vec<S> = examples
        .par_iter()
        .map(|ex| example_loss(tree, model, ex))
        .collect::<Result<_>>()?;
    Ok(losses.iter().copied().sum::<S>() / S::of(losses.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            seed: 3,
            num_examples: 8,
            frames: 10,
            d_feat: 4,
            ar_coef: 0.9,
        }
    }

    #[test]
    fn exact_entry_preimage_maps_to_entry() {
        let proj = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let entries = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let cb = Codebook::from_parts(proj, entries, 0).unwrap();
        let feats = Tensor::new(vec![1, 3, 3], vec![0., 0., 2., 0., 5., 0., 3., 0., 0.]).unwrap();
        assert_eq!(quantize_targets(&feats, &cb).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn single_entry_codebook_gives_zero() {
        let cb = Codebook::random(4, 3, 1, 9).unwrap();
        let batch = small_spec().batch::<f64>(&[0, 1]).unwrap();
        assert!(quantize_targets(&batch.features, &cb).unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn quantize_matches_exhaustive_oracle() {
        let cb = Codebook::random(4, 3, 8, 11).unwrap();
        let spec = SynthSpec {
            frames: 4,
            ..small_spec()
        };
        let batch = spec.batch::<f64>(&[5]).unwrap();
        let got = quantize_targets(&batch.features, &cb).unwrap();
        let p = cb.projection().values();
        let e = cb.entries().values();
        for (t, frame) in batch.features.values().chunks(4).enumerate() {
            let z: Vec<f64> = (0..3).map(|j| (0..4).map(|i| frame[i] * p[i * 3 + j]).sum()).collect();
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let z: Vec<f64> = z.iter().map(|v| v / n).collect();
            let dists: Vec<f64> = (0..8)
                .map(|k| (0..3).map(|j| (z[j] - e[k * 3 + j]).powi(2)).sum())
                .collect();
            let best = (0..8).fold(0, |b, k| if dists[k] < dists[b] { k } else { b });
            assert_eq!(got[t], best);
        }
    }

    #[test]
    fn quantize_is_batch_invariant() {
        let cb = Codebook::random(4, 3, 8, 11).unwrap();
        let spec = small_spec();
        let both = quantize_targets(&spec.batch::<f64>(&[1, 2]).unwrap().features, &cb).unwrap();
        let second = quantize_targets(&spec.batch::<f64>(&[2]).unwrap().features, &cb).unwrap();
        assert_eq!(&both[10..], &second[..]);
    }

    #[test]
    fn tiny_mask_prob_falls_back_to_one_span() {
        let spec = MaskSpec {
            mask_prob: 1e-12,
            span_len: 3,
            fill: MaskFill::Noise,
        };
        let batch = small_spec().batch::<f64>(&[0, 1, 2, 3]).unwrap();
        let m = apply_mask(&batch, &spec, 1).unwrap();
        for ex in m.mask.chunks(10) {
            assert_eq!(ex.iter().filter(|&&x| x).count(), 3);
        }
    }

    #[test]
    fn long_span_bounded_by_frames() {
        let spec = MaskSpec {
            mask_prob: 0.5,
            span_len: 9,
            fill: MaskFill::Zero,
        };
        let batch = small_spec().batch::<f64>(&[0, 1]).unwrap();
        let m = apply_mask(&batch, &spec, 1).unwrap();
        for ex in m.mask.chunks(10) {
            let c = ex.iter().filter(|&&x| x).count();
            assert!((9..=10).contains(&c));
        }
    }

    #[test]
    fn mask_is_reproducible() {
        let spec = MaskSpec::default();
        let batch = small_spec().batch::<f64>(&[0, 1, 2]).unwrap();
        let a = apply_mask(&batch, &spec, 42).unwrap();
        let b = apply_mask(&batch, &spec, 42).unwrap();
        assert_eq!(a, b);
        let bytes = |m: &Masked| {
            m.features
                .values()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<_>>()
        };
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn span_not_shorter_than_sequence_rejected() {
        let spec = MaskSpec {
            span_len: 10,
            ..Default::default()
        };
        let batch = small_spec().batch::<f64>(&[0]).unwrap();
        assert!(apply_mask(&batch, &spec, 0).is_err());
    }

    #[test]
    fn masked_frames_are_replaced() {
        let spec = MaskSpec {
            fill: MaskFill::Zero,
            ..Default::default()
        };
        let batch = small_spec().batch::<f64>(&[4]).unwrap();
        let m = apply_mask(&batch, &spec, 0).unwrap();
        for (t, &masked) in m.mask.iter().enumerate() {
            let got = &m.features.values()[t * 4..t * 4 + 4];
            let orig = &batch.features.values()[t * 4..t * 4 + 4];
            if masked {
                assert!(got.iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(got, orig);
            }
        }
    }

    #[test]
    fn synthetic_data_is_seeded_and_finite() {
        let spec = small_spec();
        let a = spec.example::<f64>(3);
        assert_eq!(a, spec.example::<f64>(3));
        assert_ne!(a, spec.example::<f64>(4));
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn untrained_loss_near_chance() {
        let model = EncoderConfig {
            d_feat: 4,
            hidden: 16,
            blocks: 2,
            context_radius: 1,
            num_codes: 8,
            ..Default::default()
        };
        let tree: ParamTree = model.init(1).unwrap();
        let cb = Codebook::random(4, 3, 8, 2).unwrap();
        let batch = small_spec().batch::<f64>(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let loss = ssl_loss(&tree, &model, &batch, &cb, &MaskSpec::default(), 0).unwrap();
        let lnk = 8f64.ln();
        assert!((loss - lnk).abs() < 0.1 * lnk, "{loss} vs {lnk}");
    }
}
