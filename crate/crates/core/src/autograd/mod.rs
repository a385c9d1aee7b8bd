//! Tape-based reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! accumulates gradients into every node that (transitively) depends on a
//! trainable leaf. Parameters are registered by name, so a network applied
//! several times inside one graph shares a single leaf per tensor and its
//! gradients sum across uses.

pub mod conv;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use conv::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Upsample2(Var),
    Mean(Var),
    MeanPerSample(Var),
    GradX(Var),
    GradY(Var),
    ChannelMix(Var, Vec<T>),
    Bce {
        pred: Var,
        target: Tensor<T>,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item().as_f64()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the current value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Registers (once per graph) a named parameter tensor.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a registered parameter after [`Graph::backward`].
    pub fn param_grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_var(name).and_then(|v| self.grad(v))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a: [N, C, H, W]` times `b: [N, 1, H, W]`, broadcasting `b` over channels.
    pub fn mul_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4();
        if self.value(b).shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "channel broadcast: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for s in 0..n {
            let bp = &bv[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for (i, o) in out.data_mut()[off..off + hw].iter_mut().enumerate() {
                    *o = av[off + i] * bp[i];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MulChannel(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = T::lit(k);
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let k = T::lit(k);
        let v = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (_, c_in, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv weight {ws:?} incompatible with input {:?}",
                self.value(x).shape()
            )));
        }
        let geom = ConvGeom::new(c_in, h, wd, ws[2], stride, pad).ok_or_else(|| {
            Error::Shape(format!("{h}x{wd} input too small for {}x{} kernel", ws[2], ws[2]))
        })?;
        let out = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    /// Leaky ReLU; `slope = 0` gives a plain ReLU.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()).sqrt());
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance (no affine).
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let hw = h * w;
        let eps = T::lit(eps);
        let inv_hw = T::one() / T::lit(hw as f64);
        let x = self.value(a).data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut inv_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let xs = &x[p * hw..(p + 1) * hw];
            let mean = xs.iter().copied().sum::<T>() * inv_hw;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in out.data_mut()[p * hw..(p + 1) * hw].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::InstanceNorm { x: a, inv_std }, rg)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut c_total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.value(p).shape(),
                    self.value(parts[0]).shape()
                )));
            }
            c_total += pc;
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        for s in 0..n {
            let mut c0 = 0;
            for &p in parts {
                let pc = self.value(p).shape()[1];
                let src = &self.value(p).data()[s * pc * hw..(s + 1) * pc * hw];
                let off = (s * c_total + c0) * hw;
                out.data_mut()[off..off + pc * hw].copy_from_slice(src);
                c0 += pc;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len`.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4();
        if start + len > c {
            return Err(Error::Shape(format!("narrow {start}+{len} exceeds {c} channels")));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, len, h, w]);
        for s in 0..n {
            let src = &self.value(a).data()[(s * c + start) * hw..(s * c + start + len) * hw];
            out.data_mut()[s * len * hw..(s + 1) * len * hw].copy_from_slice(src);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Narrow { x: a, start }, rg))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let x = self.value(a).data();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let od = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    od[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Upsample2(a), rg)
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean over all but the batch axis, giving `[N]`.
    pub fn mean_per_sample(&mut self, a: Var) -> Var {
        let n = self.value(a).shape()[0];
        let per = self.value(a).len() / n.max(1);
        let inv = T::one() / T::lit(per as f64);
        let d = self.value(a).data();
        let out = Tensor::from_fn(&[n], |s| d[s * per..(s + 1) * per].iter().copied().sum::<T>() * inv);
        let rg = self.rg(a);
        self.push(out, Op::MeanPerSample(a), rg)
    }

    /// Horizontal forward difference `x[.., j+1] - x[.., j]`, zero in the last column.
    pub fn grad_x(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let x = self.value(a).data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let od = out.data_mut();
        for row in 0..n * c * h {
            for j in 0..w.saturating_sub(1) {
                od[row * w + j] = x[row * w + j + 1] - x[row * w + j];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GradX(a), rg)
    }

    /// Vertical forward difference `x[.., i+1, :] - x[.., i, :]`, zero in the last row.
    pub fn grad_y(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let x = self.value(a).data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let od = out.data_mut();
        for p in 0..n * c {
            for i in 0..h.saturating_sub(1) {
                for j in 0..w {
                    let at = (p * h + i) * w + j;
                    od[at] = x[at + w] - x[at];
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GradY(a), rg)
    }

    /// Weighted channel sum `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mix(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4();
        if weights.len() != c {
            return Err(Error::Shape(format!("{} mix weights for {c} channels", weights.len())));
        }
        let wt: Vec<T> = weights.iter().map(|&v| T::lit(v)).collect();
        let hw = h * w;
        let x = self.value(a).data();
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        for s in 0..n {
            for (ch, &k) in wt.iter().enumerate() {
                let src = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (o, &v) in out.data_mut()[s * hw..(s + 1) * hw].iter_mut().zip(src) {
                    *o += k * v;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ChannelMix(a, wt), rg))
    }

    /// Mean binary cross-entropy of `pred` against a fixed `target`, with `pred`
    /// clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: Tensor<T>, eps: f64) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "bce: prediction {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let eps = T::lit(eps);
        let hi = T::one() - eps;
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.max(eps).min(hi);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum();
        let m = total / T::lit(target.len().max(1) as f64);
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(m), Op::Bce { pred, target, eps }, rg))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().expect("checked");
            self.backprop_node(i, g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Tensor<T>) {
        // Each arm computes parent gradients from immutable views first, then accumulates.
        let mut out: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
        {
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if rg(*a) {
                        out.push((*a, g.clone()));
                    }
                    if rg(*b) {
                        out.push((*b, g.clone()));
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        out.push((*a, g.clone()));
                    }
                    if rg(*b) {
                        out.push((*b, g.map(|x| -x)));
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        out.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                    }
                    if rg(*b) {
                        out.push((*b, g.zip_map(val(*a), |x, y| x * y)));
                    }
                }
                Op::MulChannel(a, b) => {
                    let (n, c, h, w) = val(*a).dims4();
                    let hw = h * w;
                    if rg(*a) {
                        let bv = val(*b).data();
                        let mut ga = g.clone();
                        for s in 0..n {
                            for ch in 0..c {
                                let off = (s * c + ch) * hw;
                                for (k, v) in ga.data_mut()[off..off + hw].iter_mut().enumerate() {
                                    *v *= bv[s * hw + k];
                                }
                            }
                        }
                        out.push((*a, ga));
                    }
                    if rg(*b) {
                        let av = val(*a).data();
                        let mut gb = Tensor::zeros(&[n, 1, h, w]);
                        for s in 0..n {
                            for ch in 0..c {
                                let off = (s * c + ch) * hw;
                                for k in 0..hw {
                                    gb.data_mut()[s * hw + k] += g.data()[off + k] * av[off + k];
                                }
                            }
                        }
                        out.push((*b, gb));
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    out.push((*a, g.map(|x| x * k)));
                }
                Op::AddScalar(a) => out.push((*a, g)),
                Op::Conv { x, w, b, geom } => {
                    let grads = conv::backward(
                        val(*x),
                        val(*w),
                        &g,
                        geom,
                        rg(*x),
                        rg(*w),
                        b.is_some_and(&rg),
                    );
                    if let Some(dx) = grads.dx {
                        out.push((*x, dx));
                    }
                    if let Some(dw) = grads.dw {
                        out.push((*w, dw));
                    }
                    if let (Some(b), Some(db)) = (b, grads.db) {
                        out.push((*b, db));
                    }
                }
                Op::LeakyRelu(a, s) => {
                    let s = *s;
                    out.push((*a, g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { gv * s })));
                }
                Op::Sigmoid(a) => {
                    out.push((*a, g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))));
                }
                Op::Exp(a) => out.push((*a, g.zip_map(&node.value, |gv, y| gv * y))),
                Op::Abs(a) => {
                    out.push((*a, g.zip_map(val(*a), |gv, x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })));
                }
                Op::Sqrt(a) => {
                    let half = T::lit(0.5);
                    out.push((*a, g.zip_map(&node.value, |gv, y| {
                        if y > T::zero() {
                            gv * half / y
                        } else {
                            T::zero()
                        }
                    })));
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    out.push((*a, g.zip_map(val(*a), |gv, x| gv * two * x)));
                }
                Op::InstanceNorm { x, inv_std } => {
                    let (n, c, h, w) = node.value.dims4();
                    let hw = h * w;
                    let m = T::lit(hw as f64);
                    let xhat = node.value.data();
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for (p, &is) in inv_std.iter().enumerate().take(n * c) {
                        let gs = &g.data()[p * hw..(p + 1) * hw];
                        let xs = &xhat[p * hw..(p + 1) * hw];
                        let sum_g: T = gs.iter().copied().sum();
                        let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                        for k in 0..hw {
                            gx.data_mut()[p * hw + k] = is / m * (m * gs[k] - sum_g - xs[k] * sum_gx);
                        }
                    }
                    out.push((*x, gx));
                }
                Op::Concat(parts) => {
                    let (n, c_total, h, w) = node.value.dims4();
                    let hw = h * w;
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = val(p).shape()[1];
                        if rg(p) {
                            let mut gp = Tensor::zeros(val(p).shape());
                            for s in 0..n {
                                let off = (s * c_total + c0) * hw;
                                gp.data_mut()[s * pc * hw..(s + 1) * pc * hw]
                                    .copy_from_slice(&g.data()[off..off + pc * hw]);
                            }
                            out.push((p, gp));
                        }
                        c0 += pc;
                    }
                }
                Op::Narrow { x, start } => {
                    let (n, c, h, w) = val(*x).dims4();
                    let len = node.value.shape()[1];
                    let hw = h * w;
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for s in 0..n {
                        let off = (s * c + start) * hw;
                        gx.data_mut()[off..off + len * hw]
                            .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
                    }
                    out.push((*x, gx));
                }
                Op::Upsample2(a) => {
                    let (n, c, h, w) = val(*a).dims4();
                    let mut ga = Tensor::zeros(&[n, c, h, w]);
                    let gd = g.data();
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                ga.data_mut()[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    out.push((*a, ga));
                }
                Op::Mean(a) => {
                    let len = val(*a).len();
                    let k = g.item() / T::lit(len as f64);
                    out.push((*a, Tensor::full(val(*a).shape(), k)));
                }
                Op::MeanPerSample(a) => {
                    let n = val(*a).shape()[0];
                    let per = val(*a).len() / n.max(1);
                    let inv = T::one() / T::lit(per as f64);
                    let gd = g.data();
                    out.push((*a, Tensor::from_fn(val(*a).shape(), |i| gd[i / per] * inv)));
                }
                Op::GradX(a) => {
                    let (n, c, h, w) = val(*a).dims4();
                    let mut ga = Tensor::zeros(&[n, c, h, w]);
                    for row in 0..n * c * h {
                        for j in 0..w.saturating_sub(1) {
                            let gv = g.data()[row * w + j];
                            ga.data_mut()[row * w + j + 1] += gv;
                            ga.data_mut()[row * w + j] -= gv;
                        }
                    }
                    out.push((*a, ga));
                }
                Op::GradY(a) => {
                    let (n, c, h, w) = val(*a).dims4();
                    let mut ga = Tensor::zeros(&[n, c, h, w]);
                    for p in 0..n * c {
                        for i in 0..h.saturating_sub(1) {
                            for j in 0..w {
                                let at = (p * h + i) * w + j;
                                let gv = g.data()[at];
                                ga.data_mut()[at + w] += gv;
                                ga.data_mut()[at] -= gv;
                            }
                        }
                    }
                    out.push((*a, ga));
                }
                Op::ChannelMix(a, wt) => {
                    let (n, c, h, w) = val(*a).dims4();
                    let hw = h * w;
                    let mut ga = Tensor::zeros(&[n, c, h, w]);
                    for s in 0..n {
                        for (ch, &k) in wt.iter().enumerate() {
                            for t in 0..hw {
                                ga.data_mut()[(s * c + ch) * hw + t] = k * g.data()[s * hw + t];
                            }
                        }
                    }
                    out.push((*a, ga));
                }
                Op::Bce { pred, target, eps } => {
                    let eps = *eps;
                    let hi = T::one() - eps;
                    let scale = g.item() / T::lit(target.len().max(1) as f64);
                    let gp = val(*pred).zip_map(target, |p, t| {
                        if p <= eps || p >= hi {
                            T::zero()
                        } else {
                            scale * ((T::one() - t) / (T::one() - p) - t / p)
                        }
                    });
                    out.push((*pred, gp));
                }
            }
        }
        for (v, gv) in out {
            self.accumulate(v, gv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x`, element by element.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-6;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn check(x: Tensor<f64>, build: &dyn Fn(&mut Graph<f64>, Var) -> Var) {
        let f = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        g.backward(out).unwrap();
        let analytic = g.grad(v).unwrap().clone();
        let numeric = numeric_grad(&x, &f);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "max abs error {err}");
    }

    fn rand_x(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 0.05, 0.95, &mut rng)
    }

    #[test]
    fn elementwise_ops_gradients() {
        check(rand_x(&[2, 3, 4, 4], 1), &|g, v| {
            let s = g.sigmoid(v);
            let e = g.exp(s);
            let l = g.leaky_relu(e, 0.2);
            let c = g.add_scalar(l, -1.5);
            let a = g.abs(c);
            let q = g.sqrt(a);
            let sq = g.square(q);
            let k = g.scale(sq, 3.0);
            g.mean(k)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        check(rand_x(&[2, 4, 4, 6], 2), &|g, v| {
            let r = g.narrow(v, 0, 3).unwrap();
            let i = g.narrow(v, 3, 1).unwrap();
            let m = g.mul_channel(r, i).unwrap();
            let c = g.concat(&[m, i]).unwrap();
            let u = g.upsample2(c);
            let gx = g.grad_x(u);
            let gy = g.grad_y(u);
            let p = g.mul(gx, gy).unwrap();
            let mix = g.channel_mix(p, &[0.3, -0.2, 0.5, 1.0]).unwrap();
            let n = g.instance_norm(mix, 1e-5);
            let w = g.sub(n, mix).unwrap();
            let sq = g.square(w);
            let ps = g.mean_per_sample(sq);
            let ps2 = g.square(ps);
            g.mean(ps2)
        });
    }

    #[test]
    fn conv_and_bce_gradients() {
        let w0 = rand_x(&[3, 2, 3, 3], 4).map(|v| v - 0.5);
        check(rand_x(&[2, 2, 6, 6], 3), &move |g, v| {
            let w = g.constant(w0.clone());
            let y = g.conv2d(v, w, None, 2, 1).unwrap();
            let s = g.sigmoid(y);
            let target = Tensor::from_fn(g.value(s).shape(), |i| (i % 2) as f64);
            g.bce(s, target, 1e-7).unwrap()
        });
    }

    #[test]
    fn shared_parameter_accumulates_across_uses() {
        let mut g = Graph::<f64>::new();
        let w = Tensor::full(&[1], 2.0);
        let a = g.param("w", &w, true);
        let b = g.param("w", &w, true);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.param_grad("w").unwrap().item(), 4.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[1], 3.0));
        let x = g.input(Tensor::full(&[1], 2.0));
        let d = g.detach(x);
        let p = g.mul(c, d).unwrap();
        let q = g.mul(p, x).unwrap();
        g.backward(q).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(d).is_none());
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }
}
