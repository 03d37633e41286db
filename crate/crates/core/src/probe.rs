//! Public fine-tuning probe: frame classification on a labeled synthetic
//! task, trained non-privately on top of a (pre-trained or random) encoder.
//!
//! Labels are the codes of clean frames under a separate random-projection
//! quantizer; inputs have a fraction of frames replaced with noise, so
//! frames must partly be recognised from their context.

use rand::Rng;
use rand_distr::StandardNormal;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::bestrq::{quantize_targets, Codebook, SynthSpec};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamTree;
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "probe.weight";
pub const HEAD_BIAS: &str = "probe.bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
    pub num_classes: usize,
    #[serde(default = "default_code_dim")]
    pub code_dim: usize,
    /// Probability that an input frame is replaced with noise.
    #[serde(default = "default_corrupt")]
    pub corrupt_prob: f64,
    pub steps: usize,
    pub lr: f64,
    /// Train the encoder together with the head.
    #[serde(default)]
    pub full_finetune: bool,
}

fn default_code_dim() -> usize {
    8
}

fn default_corrupt() -> f64 {
    0.3
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            seed: 1_000,
            num_train: 64,
            num_test: 64,
            num_classes: 8,
            code_dim: default_code_dim(),
            corrupt_prob: default_corrupt(),
            steps: 300,
            lr: 0.02,
            full_finetune: false,
        }
    }
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_train == 0 || self.num_test == 0 || self.num_classes < 2 || self.code_dim == 0 {
            return Err(Error::Config("probe sizes must be positive with >= 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.corrupt_prob) {
            return Err(Error::Config("corrupt_prob must be in [0, 1)".into()));
        }
        if self.steps == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe needs positive steps and lr".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrames<S: Scalar = f64> {
    /// `[N, T, d_feat]`, corrupted.
    pub features: Tensor<S>,
    /// Flattened `[N, T]`.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask<S: Scalar = f64> {
    pub train: LabeledFrames<S>,
    pub test: LabeledFrames<S>,
    pub num_classes: usize,
}

impl<S: Scalar> ProbeTask<S> {
    /// Builds the task from the same feature process as pre-training, with
    /// its own seed so no pre-training example is reused.
    pub fn synthetic(spec: &ProbeSpec, data: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let data = SynthSpec {
            seed: spec.seed,
            num_examples: spec.num_train + spec.num_test,
            ..data.clone()
        };
        data.validate()?;
        let cb = Codebook::random(data.d_feat, spec.code_dim, spec.num_classes, spec.seed)?;
        let split = |ids: std::ops::Range<u64>| -> Result<LabeledFrames<S>> {
            let ids: Vec<u64> = ids.collect();
            let batch = data.batch::<S>(&ids)?;
            let labels = quantize_targets(&batch.features, &cb)?;
            let mut features = batch.features;
            let (t, d) = (data.frames, data.d_feat);
            for (ex, &id) in ids.iter().enumerate() {
                let mut rng = stream(spec.seed, Domain::Probe, id, 0);
                for ti in 0..t {
                    if rng.gen::<f64>() < spec.corrupt_prob {
                        let off = (ex * t + ti) * d;
                        for v in &mut features.values_mut()[off..off + d] {
                            *v = S::of(rng.sample(StandardNormal));
                        }
                    }
                }
            }
            Ok(LabeledFrames { features, labels })
        };
        let n_train = spec.num_train as u64;
        Ok(Self {
            train: split(0..n_train)?,
            test: split(n_train..n_train + spec.num_test as u64)?,
            num_classes: spec.num_classes,
        })
    }

    /// Replaces every label with a uniformly random class.
    pub fn with_random_labels(mut self, seed: u64) -> Self {
        let mut rng = stream(seed, Domain::Probe, u64::MAX, 1);
        let k = self.num_classes;
        for l in self.train.labels.iter_mut().chain(self.test.labels.iter_mut()) {
            *l = rng.gen_range(0..k);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out frame accuracy.
    pub accuracy: f64,
    /// Held-out mean cross-entropy.
    pub test_loss: f64,
    pub train_loss: f64,
}

fn head_tree<S: Scalar>(hidden: usize, classes: usize) -> Result<ParamTree<S>> {
    ParamTree::new()
        .with_layer(HEAD_WEIGHT, Tensor::zeros(&[hidden, classes]))?
        .with_layer(HEAD_BIAS, Tensor::zeros(&[classes]))
}

fn hidden_of<S: Scalar>(tree: &ParamTree<S>, model: &EncoderConfig, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut frozen = tree.clone();
    frozen.freeze_all(true);
    let mut tape = Tape::new();
    let p = tape.bind(&frozen);
    let xv = tape.constant(x.clone());
    let h = model.encode(&mut tape, &p, xv)?;
    Ok(tape.value(h).clone())
}

fn accuracy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> f64 {
    let k = *logits.shape().last().expect("rank >= 1");
    let hits = logits
        .values()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains a fresh linear head (and the encoder too with `full_finetune`) with
/// full-batch Adam on the training split and reports held-out accuracy.
pub fn finetune_probe<S: Scalar>(
    tree: &ParamTree<S>,
    model: &EncoderConfig,
    task: &ProbeTask<S>,
    spec: &ProbeSpec,
) -> Result<ProbeReport> {
    Ok(train_probe(tree, model, task, spec)?.0)
}

/// Like [`finetune_probe`], also returning the encoder with the trained head
/// appended. In head-only mode the encoder layers come back frozen.
pub fn train_probe<S: Scalar>(
    tree: &ParamTree<S>,
    model: &EncoderConfig,
    task: &ProbeTask<S>,
    spec: &ProbeSpec,
) -> Result<(ProbeReport, ParamTree<S>)> {
    spec.validate()?;
    model.check_tree(tree)?;
    let adam = AdamConfig {
        lr: spec.lr,
        ..Default::default()
    };
    let all_mask = |n: usize| vec![true; n];
    if !spec.full_finetune {
        let h_train = hidden_of(tree, model, &task.train.features)?;
        let h_test = hidden_of(tree, model, &task.test.features)?;
        let mut head = head_tree::<S>(model.hidden, task.num_classes)?;
        let mut opt = AdamState::new(adam, &head);
        let mask = all_mask(task.train.labels.len());
        let mut train_loss = S::zero();
        for _ in 0..spec.steps {
            let mut tape = Tape::new();
            let p = tape.bind(&head);
            let x = tape.constant(h_train.clone());
            let logits = tape.dense(x, p.var(HEAD_WEIGHT)?, p.var(HEAD_BIAS)?)?;
            let loss = tape.softmax_xent(logits, &task.train.labels, &mask)?;
            train_loss = tape.value(loss).values()[0];
            let g = tape.gradients(loss, &head, &p)?;
            opt.step(&mut head, &g)?;
        }
        let mut tape = Tape::new();
        let p = tape.bind(&head);
        let x = tape.constant(h_test);
        let logits = tape.dense(x, p.var(HEAD_WEIGHT)?, p.var(HEAD_BIAS)?)?;
        let loss = tape.softmax_xent(logits, &task.test.labels, &all_mask(task.test.labels.len()))?;
        let report = ProbeReport {
            accuracy: accuracy(tape.value(logits), &task.test.labels),
            test_loss: tape.value(loss).values()[0].as_f64(),
            train_loss: train_loss.as_f64(),
        };
        let mut out = tree.clone();
        out.freeze_all(true);
        for l in head.layers() {
            out.push(l.name.clone(), l.tensor.clone(), false)?;
        }
        return Ok((report, out));
    }

    let mut full = tree.clone();
    full.freeze_all(false);
    for l in head_tree::<S>(model.hidden, task.num_classes)?.layers() {
        full.push(l.name.clone(), l.tensor.clone(), false)?;
    }
    let forward = |tape: &mut Tape<S>, t: &ParamTree<S>, x: &Tensor<S>| -> Result<(Var, crate::tape::Bound)> {
        let p = tape.bind(t);
        let xv = tape.constant(x.clone());
        let h = model.encode(tape, &p, xv)?;
        let logits = tape.dense(h, p.var(HEAD_WEIGHT)?, p.var(HEAD_BIAS)?)?;
        Ok((logits, p))
    };
    let mut opt = AdamState::new(adam, &full);
    let mask = all_mask(task.train.labels.len());
    let mut train_loss = S::zero();
    for _ in 0..spec.steps {
        let mut tape = Tape::new();
        let (logits, p) = forward(&mut tape, &full, &task.train.features)?;
        let loss = tape.softmax_xent(logits, &task.train.labels, &mask)?;
        train_loss = tape.value(loss).values()[0];
        let g = tape.gradients(loss, &full, &p)?;
        opt.step(&mut full, &g)?;
    }
    let mut tape = Tape::new();
    let (logits, _) = forward(&mut tape, &full, &task.test.features)?;
    let loss = tape.softmax_xent(logits, &task.test.labels, &all_mask(task.test.labels.len()))?;
    let report = ProbeReport {
        accuracy: accuracy(tape.value(logits), &task.test.labels),
        test_loss: tape.value(loss).values()[0].as_f64(),
        train_loss: train_loss.as_f64(),
    };
    Ok((report, full))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (EncoderConfig, SynthSpec, ProbeSpec) {
        let model = EncoderConfig {
            d_feat: 6,
            hidden: 16,
            blocks: 1,
            context_radius: 1,
            num_codes: 8,
            ..Default::default()
        };
        let data = SynthSpec {
            seed: 0,
            num_examples: 10,
            frames: 12,
            d_feat: 6,
            ar_coef: 0.9,
        };
        let probe = ProbeSpec {
            num_train: 32,
            num_test: 32,
            num_classes: 4,
            steps: 150,
            ..Default::default()
        };
        (model, data, probe)
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let (model, data, probe) = setup();
        let tree: ParamTree = model.init(3).unwrap();
        let task = ProbeTask::synthetic(&probe, &data).unwrap().with_random_labels(5);
        let r = finetune_probe(&tree, &model, &task, &probe).unwrap();
        assert!((r.accuracy - 0.25).abs() < 0.08, "{r:?}");
    }

    #[test]
    fn random_encoder_beats_chance_on_real_labels() {
        let (model, data, probe) = setup();
        let tree: ParamTree = model.init(3).unwrap();
        let task = ProbeTask::synthetic(&probe, &data).unwrap();
        let r = finetune_probe(&tree, &model, &task, &probe).unwrap();
        assert!(r.accuracy > 0.4, "{r:?}");
    }

    #[test]
    fn full_finetune_runs_and_learns() {
        let (model, data, mut probe) = setup();
        probe.full_finetune = true;
        probe.steps = 60;
        let tree: ParamTree = model.init(3).unwrap();
        let task = ProbeTask::synthetic(&probe, &data).unwrap();
        let r = finetune_probe(&tree, &model, &task, &probe).unwrap();
        assert!(r.train_loss < (4f64).ln(), "{r:?}");
    }

    #[test]
    fn task_is_deterministic() {
        let (_, data, probe) = setup();
        let a = ProbeTask::<f64>::synthetic(&probe, &data).unwrap();
        let b = ProbeTask::<f64>::synthetic(&probe, &data).unwrap();
        assert_eq!(a, b);
    }
}
