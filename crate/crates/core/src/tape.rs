//! Reverse-mode differentiation over a flat operation tape.
//!
//! Nodes are appended in evaluation order, so every node only refers to
//! earlier nodes and walking the tape backwards is a reverse topological
//! order. Leaves bound to frozen layers never require a gradient, and nodes
//! whose inputs all lack one are skipped during the backward sweep.

use crate::error::{Error, Result};
use crate::params::{GradTree, ParamTree};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// sqrt(2/pi), the GELU tanh-approximation constant.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the GELU tanh approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf {
        param: Option<String>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Gelu {
        x: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Add {
        a: Var,
        b: Var,
    },
    ContextStack {
        x: Var,
        radius: usize,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<S>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    HalfSumSquares {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

/// Tape variables for every layer of a bound [`ParamTree`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }
}

fn dense_dims(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    let d_in = *x.last().unwrap_or(&0);
    if w.len() != 2 || w[0] != d_in || b != [w[1]] {
        return Err(Error::Dimension(format!(
            "dense: input {x:?}, weight {w:?}, bias {b:?}"
        )));
    }
    let rows = x.iter().product::<usize>() / d_in;
    Ok((rows, d_in, w[1]))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Leaf that always receives a gradient (used for input sensitivity checks).
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    /// Binds every layer of `tree` as a leaf. Frozen layers are constants.
    pub fn bind(&mut self, tree: &ParamTree<S>) -> Bound {
        let vars = tree
            .layers()
            .iter()
            .map(|l| {
                let v = self.push(
                    l.tensor.clone(),
                    Op::Leaf {
                        param: Some(l.name.clone()),
                    },
                    !l.frozen,
                );
                (l.name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Affine map over the last axis: `x · w + b` with `w: [d_in, d_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (rows, d_in, d_out) = dense_dims(xv.shape(), wv.shape(), bv.shape())?;
        let (xs, ws, bs) = (xv.values(), wv.values(), bv.values());
        let mut out = Vec::with_capacity(rows * d_out);
        for r in 0..rows {
            let row = &xs[r * d_in..(r + 1) * d_in];
            let start = out.len();
            out.extend_from_slice(bs);
            let acc = &mut out[start..];
            for (i, &xi) in row.iter().enumerate() {
                let wrow = &ws[i * d_out..(i + 1) * d_out];
                for (a, &wij) in acc.iter_mut().zip(wrow) {
                    *a += xi * wij;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = d_out;
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Dense { x, w, b }, needs))
    }

    /// Element-wise GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    /// Group normalization over a `[B, T, C]` input. Statistics are taken per
    /// example and per channel group over all frames; examples never mix.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("group_norm expects rank 3, got {shape:?}")));
        }
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!("group_norm eps must be > 0, got {eps}")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Dimension(format!("group_norm scale/shift must be [{c}]")));
        }
        let cg = c / groups;
        let n = S::of((t * cg) as f64);
        let eps = S::of(eps);
        let xs = xv.values();
        let (gs, bs) = (self.value(gamma).values(), self.value(beta).values());
        let mut xhat = vec![S::zero(); xs.len()];
        let mut inv_std = Vec::with_capacity(b * groups);
        let mut out = vec![S::zero(); xs.len()];
        for ex in 0..b {
            for g in 0..groups {
                let idx = |ti: usize, k: usize| ex * t * c + ti * c + g * cg + k;
                let mut mean = S::zero();
                for ti in 0..t {
                    for k in 0..cg {
                        mean += xs[idx(ti, k)];
                    }
                }
                mean /= n;
                let mut var = S::zero();
                for ti in 0..t {
                    for k in 0..cg {
                        let d = xs[idx(ti, k)] - mean;
                        var += d * d;
                    }
                }
                var /= n;
                let is = S::one() / (var + eps).sqrt();
                inv_std.push(is);
                for ti in 0..t {
                    for k in 0..cg {
                        let i = idx(ti, k);
                        let h = (xs[i] - mean) * is;
                        xhat[i] = h;
                        out[i] = h * gs[g * cg + k] + bs[g * cg + k];
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// Concatenates each frame of a `[B, T, D]` input with its `radius`
    /// neighbours on either side (zero padded), giving `[B, T, (2r+1)·D]`.
    pub fn context_stack(&mut self, x: Var, radius: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("context_stack expects rank 3, got {shape:?}")));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let w = 2 * radius + 1;
        let xs = xv.values();
        let mut out = vec![S::zero(); b * t * w * d];
        for ex in 0..b {
            for ti in 0..t {
                for j in 0..w {
                    let src = ti as isize + j as isize - radius as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let s = ex * t * d + src as usize * d;
                    let o = (ex * t + ti) * w * d + j * d;
                    out[o..o + d].copy_from_slice(&xs[s..s + d]);
                }
            }
        }
        let value = Tensor::new(vec![b, t, w * d], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::ContextStack { x, radius }, needs))
    }

    /// Mean cross-entropy over masked positions of `[.., K]` logits.
    /// `targets` and `mask` are flattened over the leading axes.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let k = *lv.shape().last().unwrap_or(&0);
        let rows = lv.len() / k.max(1);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Dimension(format!(
                "softmax_xent: {rows} rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::Dimension(format!("target {bad} outside [0, {k})")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("no masked positions".into()));
        }
        let ls = lv.values();
        let mut probs = vec![S::zero(); ls.len()];
        let mut total = S::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &ls[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (p, &l) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (l - m).exp();
                z += *p;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            total += m + z.ln() - row[targets[r]];
        }
        let loss = total / S::of(count as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            needs,
        ))
    }

    /// `½‖x‖²` as a scalar node.
    pub fn half_sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).norm_sq() * S::of(0.5);
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::HalfSumSquares { x }, needs)
    }

    /// Runs the reverse sweep from scalar `loss` and returns the gradient of
    /// every node (None where no gradient flows).
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor<S>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<S>, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, d_in, d_out) = dense_dims(xv.shape(), wv.shape(), self.value(*b).shape())?;
                let (xs, ws, dys) = (xv.values(), wv.values(), dy.values());
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); xs.len()];
                    for r in 0..rows {
                        let dyr = &dys[r * d_out..(r + 1) * d_out];
                        for i in 0..d_in {
                            let wrow = &ws[i * d_out..(i + 1) * d_out];
                            dx[r * d_in + i] = wrow.iter().zip(dyr).fold(S::zero(), |a, (&w, &g)| a + w * g);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![S::zero(); ws.len()];
                    for r in 0..rows {
                        let dyr = &dys[r * d_out..(r + 1) * d_out];
                        for i in 0..d_in {
                            let xi = xs[r * d_in + i];
                            for (a, &g) in dw[i * d_out..(i + 1) * d_out].iter_mut().zip(dyr) {
                                *a += xi * g;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?)?;
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); d_out];
                    for r in 0..rows {
                        for (a, &g) in db.iter_mut().zip(&dys[r * d_out..(r + 1) * d_out]) {
                            *a += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![d_out], db)?)?;
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let dx = Tensor::new(
                    xv.shape().to_vec(),
                    xv.values()
                        .iter()
                        .zip(dy.values())
                        .map(|(&v, &g)| g * gelu_derivative(v))
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let shape = self.value(*x).shape();
                let (b, t, c) = (shape[0], shape[1], shape[2]);
                let cg = c / groups;
                let n = S::of((t * cg) as f64);
                let gs = self.value(*gamma).values();
                let dys = dy.values();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx = vec![S::zero(); dys.len()];
                for ex in 0..b {
                    for g in 0..*groups {
                        let idx = |ti: usize, k: usize| ex * t * c + ti * c + g * cg + k;
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for ti in 0..t {
                            for k in 0..cg {
                                let i = idx(ti, k);
                                let ch = g * cg + k;
                                dgamma[ch] += dys[i] * xhat[i];
                                dbeta[ch] += dys[i];
                                let dh = dys[i] * gs[ch];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat[i];
                            }
                        }
                        let is = inv_std[ex * groups + g];
                        for ti in 0..t {
                            for k in 0..cg {
                                let i = idx(ti, k);
                                let dh = dys[i] * gs[g * cg + k];
                                dx[i] = is / n * (n * dh - sum_dh - xhat[i] * sum_dh_h);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape.to_vec(), dx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?)?;
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::ContextStack { x, radius } => {
                let shape = self.value(*x).shape();
                let (b, t, d) = (shape[0], shape[1], shape[2]);
                let w = 2 * radius + 1;
                let dys = dy.values();
                let mut dx = vec![S::zero(); b * t * d];
                for ex in 0..b {
                    for ti in 0..t {
                        for j in 0..w {
                            let src = ti as isize + j as isize - *radius as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let s = ex * t * d + src as usize * d;
                            let o = (ex * t + ti) * w * d + j * d;
                            for (a, &g) in dx[s..s + d].iter_mut().zip(&dys[o..o + d]) {
                                *a += g;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape.to_vec(), dx)?)?;
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
                mask,
                count,
            } => {
                let lv = self.value(*logits);
                let k = *lv.shape().last().expect("rank >= 1");
                let scale = dy.values()[0] / S::of(*count as f64);
                let mut dl = vec![S::zero(); lv.len()];
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..k {
                        dl[r * k + j] = probs[r * k + j] * scale;
                    }
                    dl[r * k + targets[r]] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?)?;
            }
            Op::HalfSumSquares { x } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, xv.scaled(dy.values()[0]))?;
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every trainable layer of the tree
    /// bound via [`Tape::bind`], in tree order. Trainable layers the loss does
    /// not reach get zeros; frozen layers get no entry.
    pub fn gradients(&self, loss: Var, tree: &ParamTree<S>, bound: &Bound) -> Result<GradTree<S>> {
        let mut grads = self.backward(loss)?;
        let mut entries = Vec::new();
        for layer in tree.trainable() {
            let v = bound.var(&layer.name)?;
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(layer.tensor.shape()));
            if !g.is_finite() {
                return Err(Error::Numeric {
                    layer: layer.name.clone(),
                });
            }
            entries.push((layer.name.clone(), g));
        }
        Ok(GradTree::from_entries(entries))
    }

    /// Name of the parameter a leaf was bound to, if any.
    pub fn param_name(&self, v: Var) -> Option<&str> {
        match &self.nodes[v.0].op {
            Op::Leaf { param } => param.as_deref(),
            _ => None,
        }
    }
}

pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_SQRT_2_OVER_PI);
    let a = S::of(GELU_CUBIC);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_SQRT_2_OVER_PI);
    let a = S::of(GELU_CUBIC);
    let half = S::of(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + S::of(3.0) * a * x * x)
}

/// Evaluates `f` on a fresh tape with `tree` bound and returns the loss and
/// its gradient over the trainable layers.
pub fn value_and_grad<S, F>(tree: &ParamTree<S>, f: F) -> Result<(S, GradTree<S>)>
where
    S: Scalar,
    F: FnOnce(&mut Tape<S>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(tree);
    let loss = f(&mut tape, &bound)?;
    let value = tape.value(loss).values()[0];
    if !value.is_finite() {
        return Err(Error::Numeric { layer: "loss".into() });
    }
    let grads = tape.gradients(loss, tree, &bound)?;
    Ok((value, grads))
}
