//! Small dense encoder used as the pre-training network.
//!
//! Frames are stacked with their neighbours, projected to the hidden width,
//! then passed through residual blocks of `dense → group norm → GELU`. A
//! final dense layer produces per-frame code logits.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tape::{Bound, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_feat: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Frames of context on each side fed to the input projection.
    pub context_radius: usize,
    /// Output classes (codebook size K).
    pub num_codes: usize,
    #[serde(default = "default_groups")]
    pub norm_groups: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_groups() -> usize {
    1
}

fn default_norm_eps() -> f64 {
    1e-4
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_feat: 16,
            hidden: 128,
            blocks: 2,
            context_radius: 2,
            num_codes: 32,
            norm_groups: default_groups(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 || self.hidden == 0 || self.num_codes == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.norm_groups == 0 || self.hidden % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible into {} norm groups",
                self.hidden, self.norm_groups
            )));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be > 0".into()));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        (2 * self.context_radius + 1) * self.d_feat
    }

    /// Layer names in tree order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["input.weight".to_string(), "input.bias".to_string()];
        for i in 0..self.blocks {
            names.push(format!("block{i}.weight"));
            names.push(format!("block{i}.bias"));
            names.push(format!("block{i}.norm.gamma"));
            names.push(format!("block{i}.norm.beta"));
        }
        names.push("output.weight".into());
        names.push("output.bias".into());
        names
    }

    /// Fresh parameters: weights ~ N(0, 1/fan_in), zero biases, unit norm
    /// scale. The output projection starts small so initial predictions are
    /// close to uniform over codes.
    pub fn init<S: Scalar>(&self, seed: u64) -> Result<ParamTree<S>> {
        self.validate()?;
        let mut rng = stream(seed, Domain::Init, 0, 0);
        let mut tree = ParamTree::new();
        let d_in = self.input_width();
        let h = self.hidden;
        tree.push(
            "input.weight",
            Tensor::randn(&[d_in, h], (1.0 / d_in as f64).sqrt(), &mut rng),
            false,
        )?;
        tree.push("input.bias", Tensor::zeros(&[h]), false)?;
        for i in 0..self.blocks {
            tree.push(
                format!("block{i}.weight"),
                Tensor::randn(&[h, h], (1.0 / h as f64).sqrt(), &mut rng),
                false,
            )?;
            tree.push(format!("block{i}.bias"), Tensor::zeros(&[h]), false)?;
            tree.push(format!("block{i}.norm.gamma"), Tensor::filled(&[h], S::one()), false)?;
            tree.push(format!("block{i}.norm.beta"), Tensor::zeros(&[h]), false)?;
        }
        tree.push(
            "output.weight",
            Tensor::randn(&[h, self.num_codes], 0.1 / (h as f64).sqrt(), &mut rng),
            false,
        )?;
        tree.push("output.bias", Tensor::zeros(&[self.num_codes]), false)?;
        Ok(tree)
    }

    /// Checks that `tree` has exactly this architecture's layers and shapes.
    pub fn check_tree<S: Scalar>(&self, tree: &ParamTree<S>) -> Result<()> {
        let reference: ParamTree<S> = self.init(0)?;
        if tree.len() != reference.len() {
            return Err(Error::Dimension(format!(
                "expected {} layers, tree has {}",
                reference.len(),
                tree.len()
            )));
        }
        for (a, b) in tree.layers().iter().zip(reference.layers()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Dimension(format!(
                    "layer `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Hidden representation `[B, T, hidden]` of `[B, T, d_feat]` features.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let ctx = tape.context_stack(x, self.context_radius)?;
        let h = tape.dense(ctx, p.var("input.weight")?, p.var("input.bias")?)?;
        let mut h = tape.gelu(h);
        for i in 0..self.blocks {
            let z = tape.dense(
                h,
                p.var(&format!("block{i}.weight"))?,
                p.var(&format!("block{i}.bias"))?,
            )?;
            let z = tape.group_norm(
                z,
                self.norm_groups,
                self.norm_eps,
                p.var(&format!("block{i}.norm.gamma"))?,
                p.var(&format!("block{i}.norm.beta"))?,
            )?;
            let z = tape.gelu(z);
            h = tape.add(h, z)?;
        }
        Ok(h)
    }

    /// Code logits `[B, T, num_codes]`.
    pub fn logits<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.encode(tape, p, x)?;
        tape.dense(h, p.var("output.weight")?, p.var("output.bias")?)
    }
}
