//! U-Net illumination enhancer and the composite generators.
//!
//! Encoder stage `k` (1-based) is a stride-2 3×3 convolution to
//! `channel_plan[k]` channels with instance norm and leaky ReLU (0.2).
//! Decoder stage `j` upsamples 2× (nearest), applies a 3×3 convolution to
//! `channel_plan[n - j]` channels with instance norm and ReLU, then
//! concatenates the output of encoder stage `n - j` (stage 0 is the network
//! input). A 3×3 head with sigmoid produces the output map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decomposition::DecompNet;
use crate::error::{Error, Result};
use crate::imaging::{recompose, ImageTensor};
use crate::nn::{ConvLayer, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub input_size: usize,
    pub num_down: usize,
    pub num_up: usize,
    /// Input channels followed by the width of every encoder stage.
    pub channel_plan: Vec<usize>,
    pub kernel: usize,
    pub out_channels: usize,
}

impl UNetSpec {
    /// 256×256 input, 7 stages each way, widths 4,128,256,512,512,512,512,512.
    pub fn paper() -> Self {
        Self {
            input_size: 256,
            num_down: 7,
            num_up: 7,
            channel_plan: vec![4, 128, 256, 512, 512, 512, 512, 512],
            kernel: 3,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_down != self.num_up {
            return Err(Error::Config(format!(
                "U-Net needs matching down/up stages, got {} and {}",
                self.num_down, self.num_up
            )));
        }
        if self.channel_plan.len() != self.num_down + 1 {
            return Err(Error::Config(format!(
                "channel plan has {} entries, expected {}",
                self.channel_plan.len(),
                self.num_down + 1
            )));
        }
        if self.channel_plan.contains(&0) || self.out_channels == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid U-Net spec {self:?}")));
        }
        if self.num_down >= usize::BITS as usize || !self.input_size.is_multiple_of(1 << self.num_down) || self.input_size == 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.num_down
            )));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.channel_plan[0]
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.num_down
    }
}

/// Which translation an enhancer serves; fixes its tensor-name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `G2`: low-light to well-lit.
    LowToHigh,
    /// `F2`: well-lit to low-light.
    HighToLow,
}

impl Direction {
    pub fn prefix(self) -> &'static str {
        match self {
            Direction::LowToHigh => "g2",
            Direction::HighToLow => "f2",
        }
    }
}

/// Graph handles recorded by one U-Net forward pass.
#[derive(Clone, Debug)]
pub struct UNetTrace {
    /// Encoder outputs; index 0 is the network input.
    pub encoder: Vec<Var>,
    /// Decoder outputs after skip concatenation.
    pub decoder: Vec<Var>,
    pub output: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceNet<T> {
    spec: UNetSpec,
    prefix: String,
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
    head: ConvLayer,
    params: ParamSet<T>,
}

/// Builds a seeded U-Net whose tensors are named `<prefix>.*`.
pub fn build_unet<T: Scalar>(spec: &UNetSpec, prefix: &str, seed: u64) -> Result<EnhanceNet<T>> {
    spec.validate()?;
    let n = spec.num_down;
    let plan = &spec.channel_plan;
    let k = spec.kernel;
    let encoder: Vec<ConvLayer> = (1..=n)
        .map(|s| ConvLayer {
            name: format!("{prefix}.enc{s}"),
            c_in: plan[s - 1],
            c_out: plan[s],
            kernel: k,
            stride: 2,
            pad: k / 2,
            bias: false,
        })
        .collect();
    let decoder: Vec<ConvLayer> = (1..=n)
        .map(|j| ConvLayer {
            name: format!("{prefix}.dec{j}"),
            c_in: if j == 1 { plan[n] } else { 2 * plan[n - j + 1] },
            c_out: plan[n - j],
            kernel: k,
            stride: 1,
            pad: k / 2,
            bias: false,
        })
        .collect();
    let head = ConvLayer {
        name: format!("{prefix}.head"),
        c_in: 2 * plan[0],
        c_out: spec.out_channels,
        kernel: k,
        stride: 1,
        pad: k / 2,
        bias: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for l in encoder.iter().chain(&decoder) {
        l.init(&mut params, 2f64.sqrt(), &mut rng);
    }
    head.init(&mut params, 1.0, &mut rng);
    Ok(EnhanceNet {
        spec: spec.clone(),
        prefix: prefix.to_string(),
        encoder,
        decoder,
        head,
        params,
    })
}

impl<T: Scalar> EnhanceNet<T> {
    pub fn new(spec: &UNetSpec, direction: Direction, seed: u64) -> Result<Self> {
        build_unet(spec, direction.prefix(), seed)
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn weight_count(&self) -> usize {
        self.params.weight_count()
    }

    /// Encoder stage consumed by each decoder stage (decoder stage `j` at index `j - 1`).
    pub fn skip_sources(&self) -> Vec<usize> {
        let n = self.spec.num_down;
        (1..=n).map(|j| n - j).collect()
    }

    pub fn forward_traced(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Result<UNetTrace> {
        let (_, c, h, w) = g.value(x).dims4();
        let size = self.spec.input_size;
        if c != self.spec.in_channels() || h != size || w != size {
            return Err(Error::Shape(format!(
                "U-Net expects {}x{size}x{size} input, got {c}x{h}x{w}",
                self.spec.in_channels()
            )));
        }
        let mut encoder = vec![x];
        let mut cur = x;
        for layer in &self.encoder {
            cur = layer.apply(g, &self.params, trainable, cur)?;
            cur = g.instance_norm(cur, NORM_EPS);
            cur = g.leaky_relu(cur, 0.2);
            encoder.push(cur);
        }
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (layer, src) in self.decoder.iter().zip(self.skip_sources()) {
            let up = g.upsample2(cur);
            let y = layer.apply(g, &self.params, trainable, up)?;
            let y = g.instance_norm(y, NORM_EPS);
            let y = g.relu(y);
            cur = g.concat(&[y, encoder[src]])?;
            decoder.push(cur);
        }
        let out = self.head.apply(g, &self.params, trainable, cur)?;
        let output = g.sigmoid(out);
        Ok(UNetTrace {
            encoder,
            decoder,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Result<Var> {
        Ok(self.forward_traced(g, x, trainable)?.output)
    }

    /// Enhances illumination `[N,1,H,W]` given reflectance `[N,3,H,W]`.
    pub fn forward_ri(&self, g: &mut Graph<T>, r: Var, i: Var, trainable: bool) -> Result<Var> {
        let x = g.concat(&[r, i])?;
        self.forward(g, x, trainable)
    }

    pub fn enhance_illumination(&self, r: &ImageTensor<T>, i: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        if r.channels() != 3 || i.channels() != 1 {
            return Err(Error::Shape("enhancer expects 3-channel R and 1-channel I".into()));
        }
        let mut g = Graph::new();
        let rv = g.constant(r.to_nchw());
        let iv = g.constant(i.to_nchw());
        let out = self.forward_ri(&mut g, rv, iv, false)?;
        ImageTensor::from_nchw(g.value(out), 0)
    }

    /// Direct image-to-image inference (plain generator with 3-channel plan).
    pub fn translate(&self, s: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(s.to_nchw());
        let out = self.forward(&mut g, x, false)?;
        ImageTensor::from_nchw(g.value(out), 0)
    }
}

/// Intermediate tensors of one generator application.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateIntermediates<T> {
    pub reflectance: ImageTensor<T>,
    pub illumination: ImageTensor<T>,
    pub enhanced_illumination: ImageTensor<T>,
}

/// Graph handles of one generator application.
#[derive(Clone, Copy, Debug)]
pub struct GenerateVars {
    pub reflectance: Var,
    pub illumination: Var,
    pub enhanced_illumination: Var,
    pub output: Var,
}

/// `G = G3 ∘ G2 ∘ G1` (or `F`), borrowing the shared decomposition network.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorBundle<'a, T> {
    pub decomp: &'a DecompNet<T>,
    pub enhance: &'a EnhanceNet<T>,
}

impl<'a, T: Scalar> GeneratorBundle<'a, T> {
    pub fn new(decomp: &'a DecompNet<T>, enhance: &'a EnhanceNet<T>) -> Self {
        Self { decomp, enhance }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        s: Var,
        decomp_trainable: bool,
        enhance_trainable: bool,
    ) -> Result<GenerateVars> {
        let (r, i) = self.decomp.forward(g, s, decomp_trainable)?;
        let enhanced = self.enhance.forward_ri(g, r, i, enhance_trainable)?;
        let output = g.mul_channel(r, enhanced)?;
        Ok(GenerateVars {
            reflectance: r,
            illumination: i,
            enhanced_illumination: enhanced,
            output,
        })
    }

    pub fn generate(&self, s: &ImageTensor<T>) -> Result<(ImageTensor<T>, GenerateIntermediates<T>)> {
        if s.channels() != 3 {
            return Err(Error::Shape("generator expects a 3-channel image".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(s.to_nchw());
        let v = self.forward(&mut g, x, false, false)?;
        let img = |t: &Tensor<T>| ImageTensor::from_nchw(t, 0);
        let inter = GenerateIntermediates {
            reflectance: img(g.value(v.reflectance))?,
            illumination: img(g.value(v.illumination))?,
            enhanced_illumination: img(g.value(v.enhanced_illumination))?,
        };
        let out = recompose(&inter.reflectance, &inter.enhanced_illumination)?;
        Ok((out, inter))
    }
}
