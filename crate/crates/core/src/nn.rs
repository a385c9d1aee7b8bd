//! Named parameter storage, convolution layers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from fully-qualified tensor name (`g2.enc1.weight`) to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar weight count.
    pub fn weight_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Combined checksum over names and values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.tensors {
            for b in name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
            h = (h ^ t.checksum()).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    /// Overwrites every tensor of `self` with the same-named tensor of `source`.
    pub fn load_from(&mut self, source: &ParamSet<T>) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let src = source
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn extend(&mut self, other: &ParamSet<T>) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }
}

/// One convolution: weight `[out, in, k, k]` plus optional bias.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvLayer {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Gaussian init with std `gain / sqrt(fan_in)`; zero bias.
    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, gain: f64, rng: &mut impl Rng) {
        let fan_in = (self.c_in * self.kernel * self.kernel) as f64;
        params.insert(
            self.weight_name(),
            Tensor::randn(&[self.c_out, self.c_in, self.kernel, self.kernel], gain / fan_in.sqrt(), rng),
        );
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.c_out]));
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        trainable: bool,
        x: Var,
    ) -> Result<Var> {
        let wname = self.weight_name();
        let w = params
            .get(&wname)
            .ok_or_else(|| Error::Config(format!("missing parameter `{wname}`")))?;
        let w = g.param(&wname, w, trainable);
        let b = if self.bias {
            let bname = self.bias_name();
            let b = params
                .get(&bname)
                .ok_or_else(|| Error::Config(format!("missing parameter `{bname}`")))?;
            Some(g.param(&bname, b, trainable))
        } else {
            None
        };
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of `params` that received a gradient in `g`.
    pub fn step(&mut self, params: &mut ParamSet<T>, g: &Graph<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(grad) = g.param_grad(&name) else {
                continue;
            };
            let p = params.get_mut(&name).expect("listed");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::<f64>::new();
        params.insert("x", Tensor::full(&[2], 3.0));
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param("x", params.get("x").unwrap(), true);
            let sq = g.square(x);
            let loss = g.mean(sq);
            g.backward(loss).unwrap();
            opt.step(&mut params, &g);
        }
        assert!(params.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn adam_with_zero_lr_leaves_parameters_untouched() {
        let mut params = ParamSet::<f32>::new();
        params.insert("x", Tensor::full(&[3], 0.7));
        let before = params.checksum();
        let mut opt = Adam::new(0.0, 0.9, 0.999);
        let mut g = Graph::new();
        let x = g.param("x", params.get("x").unwrap(), true);
        let loss = g.mean(x);
        g.backward(loss).unwrap();
        opt.step(&mut params, &g);
        assert_eq!(before, params.checksum());
    }

    #[test]
    fn output_size_arithmetic() {
        let l = ConvLayer {
            name: "c".into(),
            c_in: 3,
            c_out: 8,
            kernel: 4,
            stride: 2,
            pad: 1,
            bias: true,
        };
        assert_eq!(l.output_size(256), Some(128));
        assert_eq!(l.output_size(1), None);
    }
}
