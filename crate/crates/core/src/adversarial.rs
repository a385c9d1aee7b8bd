//! Patch discriminators, binary cross-entropy and the cycle-consistent
//! adversarial losses.
//!
//! Loss conventions: L1 and L2 distances are normalized by element count
//! (mean absolute error and root-mean-square error per sample, averaged over
//! the batch), so magnitudes do not depend on resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decomposition::DecompNet;
use crate::enhancement::EnhanceNet;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{ConvLayer, ParamSet};
use crate::report::LossReport;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp applied to predictions before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;
const NORM_EPS: f64 = 1e-5;

/// Multipliers of the two generator loss terms; both 1 unless configured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLossWeights {
    pub cycle: f64,
    pub adversarial: f64,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        Self {
            cycle: 1.0,
            adversarial: 1.0,
        }
    }
}

impl GanLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.cycle >= 0.0 && self.adversarial >= 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Fully-convolutional patch classifier layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscSpec {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub pad: usize,
}

impl Default for DiscSpec {
    /// 64-128-256-512-1 with 4×4 kernels and strides 2,2,2,1,1: a 30×30 score
    /// grid on 256×256 inputs, each score seeing a 70×70 patch.
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 512, 1],
            strides: vec![2, 2, 2, 1, 1],
            kernel: 4,
            pad: 1,
        }
    }
}

impl DiscSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty()
            || self.widths.len() != self.strides.len()
            || self.widths.last() != Some(&1)
            || self.strides.contains(&0)
            || self.widths.contains(&0)
        {
            return Err(Error::Config(format!("invalid discriminator spec {self:?}")));
        }
        Ok(())
    }

    /// Side of the score grid for a square `input` image.
    pub fn grid_size(&self, input: usize) -> Option<usize> {
        self.strides.iter().try_fold(input, |size, &s| {
            let padded = size + 2 * self.pad;
            (padded >= self.kernel).then(|| (padded - self.kernel) / s + 1)
        })
    }

    /// Input window seen by one score.
    pub fn receptive_field(&self) -> usize {
        self.strides
            .iter()
            .rev()
            .fold(1, |rf, &s| (rf - 1) * s + self.kernel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminator<T> {
    spec: DiscSpec,
    prefix: String,
    layers: Vec<ConvLayer>,
    params: ParamSet<T>,
}

impl<T: Scalar> PatchDiscriminator<T> {
    /// Tensors are named `<prefix>.*` (`d_high` or `d_low` in the pipeline).
    pub fn new(spec: &DiscSpec, prefix: &str, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut c_in = 3;
        let layers: Vec<ConvLayer> = spec
            .widths
            .iter()
            .zip(&spec.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let l = ConvLayer {
                    name: format!("{prefix}.conv{i}"),
                    c_in,
                    c_out: w,
                    kernel: spec.kernel,
                    stride: s,
                    pad: spec.pad,
                    bias: true,
                };
                c_in = w;
                l
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            l.init(&mut params, if i == last { 1.0 } else { 2f64.sqrt() }, &mut rng);
        }
        Ok(Self {
            spec: spec.clone(),
            prefix: prefix.to_string(),
            layers,
            params,
        })
    }

    pub fn spec(&self) -> &DiscSpec {
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

    /// Score grid `[N, 1, g, g]` with every entry in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4();
        if c != 3 {
            return Err(Error::Shape(format!("discriminator expects 3 channels, got {c}")));
        }
        let last = self.layers.len() - 1;
        let mut cur = x;
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.apply(g, &self.params, trainable, cur)?;
            if i == last {
                break;
            }
            if i > 0 {
                cur = g.instance_norm(cur, NORM_EPS);
            }
            cur = g.leaky_relu(cur, 0.2);
        }
        Ok(g.sigmoid(cur))
    }

    /// Score grid of one image and its arithmetic mean.
    pub fn discriminate(&self, s: &ImageTensor<T>) -> Result<(Tensor<T>, f64)> {
        let mut g = Graph::new();
        let x = g.constant(s.to_nchw());
        let out = self.forward(&mut g, x, false)?;
        let grid = g.value(out).clone();
        let mean = grid.mean().as_f64();
        Ok((grid, mean))
    }
}

/// Mean binary cross-entropy with predictions clamped to `[ε, 1 − ε]`.
pub fn bce<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = g.bce(p, target.clone(), BCE_EPS)?;
    Ok(g.scalar(l))
}

/// `H(pred, c)` against a constant target.
pub fn bce_const<T: Scalar>(g: &mut Graph<T>, pred: Var, target: f64) -> Result<Var> {
    let t = Tensor::full(g.value(pred).shape(), T::lit(target));
    g.bce(pred, t, BCE_EPS)
}

/// Low → high' → low'' tensors, all `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardChain<T> {
    pub s_low: Tensor<T>,
    pub r_low: Tensor<T>,
    pub i_low: Tensor<T>,
    pub i_high_p: Tensor<T>,
    pub s_high_p: Tensor<T>,
    pub r_high_p: Tensor<T>,
    pub i_low_pp: Tensor<T>,
    pub s_low_pp: Tensor<T>,
}

/// High → low' → high'' tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardChain<T> {
    pub s_high: Tensor<T>,
    pub r_high: Tensor<T>,
    pub i_high: Tensor<T>,
    pub i_low_p: Tensor<T>,
    pub s_low_p: Tensor<T>,
    pub r_low_p: Tensor<T>,
    pub i_high_pp: Tensor<T>,
    pub s_high_pp: Tensor<T>,
}

/// Every intermediate of one forward + backward cycle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CycleState<T> {
    pub forward: Option<ForwardChain<T>>,
    pub backward: Option<BackwardChain<T>>,
}

impl<T: Scalar> CycleState<T> {
    fn chains(&self) -> Result<(&ForwardChain<T>, &BackwardChain<T>)> {
        match (&self.forward, &self.backward) {
            (Some(f), Some(b)) => Ok((f, b)),
            (None, _) => Err(Error::State("forward chain missing".into())),
            (_, None) => Err(Error::State("backward chain missing".into())),
        }
    }
}

/// Graph handles mirroring [`CycleState`].
#[derive(Clone, Copy, Debug)]
pub struct CycleVars {
    pub s_low: Var,
    pub r_low: Var,
    pub i_low: Var,
    pub i_high_p: Var,
    pub s_high_p: Var,
    pub r_high_p: Var,
    pub i_low_pp: Var,
    pub s_low_pp: Var,
    pub s_high: Var,
    pub r_high: Var,
    pub i_high: Var,
    pub i_low_p: Var,
    pub s_low_p: Var,
    pub r_low_p: Var,
    pub i_high_pp: Var,
    pub s_high_pp: Var,
}

impl CycleVars {
    /// Places every tensor of a populated state on `g` as a constant.
    pub fn from_state<T: Scalar>(g: &mut Graph<T>, st: &CycleState<T>) -> Result<Self> {
        let (f, b) = st.chains()?;
        Ok(Self {
            s_low: g.constant(f.s_low.clone()),
            r_low: g.constant(f.r_low.clone()),
            i_low: g.constant(f.i_low.clone()),
            i_high_p: g.constant(f.i_high_p.clone()),
            s_high_p: g.constant(f.s_high_p.clone()),
            r_high_p: g.constant(f.r_high_p.clone()),
            i_low_pp: g.constant(f.i_low_pp.clone()),
            s_low_pp: g.constant(f.s_low_pp.clone()),
            s_high: g.constant(b.s_high.clone()),
            r_high: g.constant(b.r_high.clone()),
            i_high: g.constant(b.i_high.clone()),
            i_low_p: g.constant(b.i_low_p.clone()),
            s_low_p: g.constant(b.s_low_p.clone()),
            r_low_p: g.constant(b.r_low_p.clone()),
            i_high_pp: g.constant(b.i_high_pp.clone()),
            s_high_pp: g.constant(b.s_high_pp.clone()),
        })
    }

    pub fn to_state<T: Scalar>(&self, g: &Graph<T>) -> CycleState<T> {
        let v = |x: Var| g.value(x).clone();
        CycleState {
            forward: Some(ForwardChain {
                s_low: v(self.s_low),
                r_low: v(self.r_low),
                i_low: v(self.i_low),
                i_high_p: v(self.i_high_p),
                s_high_p: v(self.s_high_p),
                r_high_p: v(self.r_high_p),
                i_low_pp: v(self.i_low_pp),
                s_low_pp: v(self.s_low_pp),
            }),
            backward: Some(BackwardChain {
                s_high: v(self.s_high),
                r_high: v(self.r_high),
                i_high: v(self.i_high),
                i_low_p: v(self.i_low_p),
                s_low_p: v(self.s_low_p),
                r_low_p: v(self.r_low_p),
                i_high_pp: v(self.i_high_pp),
                s_high_pp: v(self.s_high_pp),
            }),
        }
    }
}

/// Networks taking part in a cycle; the decomposition is shared by both directions.
#[derive(Clone, Copy)]
pub struct CycleNets<'a, T> {
    pub decomp: &'a DecompNet<T>,
    pub g2: &'a EnhanceNet<T>,
    pub f2: &'a EnhanceNet<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub decomp: bool,
    pub enhancers: bool,
}

/// Records both cycles on `g`.
///
/// Forward: `(R_low, I_low) = G1(S_low)`, `I_high' = G2(R_low, I_low)`,
/// `S_high' = R_low ∘ I_high'`, `R_high' = G1(S_high').R`,
/// `I_low'' = F2(R_high', I_high')`, `S_low'' = R_high' ∘ I_low''`.
/// The backward chain mirrors it starting from `S_high`.
pub fn run_cycle<T: Scalar>(
    g: &mut Graph<T>,
    nets: CycleNets<'_, T>,
    s_low: Var,
    s_high: Var,
    trainable: Trainable,
) -> Result<CycleVars> {
    let d = trainable.decomp;
    let e = trainable.enhancers;
    let (r_low, i_low) = nets.decomp.forward(g, s_low, d)?;
    let i_high_p = nets.g2.forward_ri(g, r_low, i_low, e)?;
    let s_high_p = g.mul_channel(r_low, i_high_p)?;
    let (r_high_p, _) = nets.decomp.forward(g, s_high_p, d)?;
    let i_low_pp = nets.f2.forward_ri(g, r_high_p, i_high_p, e)?;
    let s_low_pp = g.mul_channel(r_high_p, i_low_pp)?;

    let (r_high, i_high) = nets.decomp.forward(g, s_high, d)?;
    let i_low_p = nets.f2.forward_ri(g, r_high, i_high, e)?;
    let s_low_p = g.mul_channel(r_high, i_low_p)?;
    let (r_low_p, _) = nets.decomp.forward(g, s_low_p, d)?;
    let i_high_pp = nets.g2.forward_ri(g, r_low_p, i_low_p, e)?;
    let s_high_pp = g.mul_channel(r_low_p, i_high_pp)?;
    Ok(CycleVars {
        s_low,
        r_low,
        i_low,
        i_high_p,
        s_high_p,
        r_high_p,
        i_low_pp,
        s_low_pp,
        s_high,
        r_high,
        i_high,
        i_low_p,
        s_low_p,
        r_low_p,
        i_high_pp,
        s_high_pp,
    })
}

/// Mean absolute difference.
pub fn mean_l1<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Root-mean-square difference per sample, averaged over the batch.
pub fn mean_l2<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let per = g.mean_per_sample(sq);
    let rms = g.sqrt(per);
    Ok(g.mean(rms))
}

pub fn cycle_loss_s_graph<T: Scalar>(g: &mut Graph<T>, v: &CycleVars) -> Result<Var> {
    let a = mean_l1(g, v.s_low_pp, v.s_low)?;
    let b = mean_l1(g, v.s_high_pp, v.s_high)?;
    g.add(a, b)
}

pub fn cycle_loss_r_graph<T: Scalar>(g: &mut Graph<T>, v: &CycleVars) -> Result<Var> {
    let a = mean_l2(g, v.r_low, v.r_high_p)?;
    let b = mean_l2(g, v.r_high, v.r_low_p)?;
    g.add(a, b)
}

/// Graph handles of the generator-side losses.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLossVars {
    pub cyc_s: Var,
    pub cyc_r: Var,
    pub cyc_total: Var,
    pub adv_g: Var,
    pub adv_f: Var,
    pub gen_g: Var,
    pub gen_f: Var,
}

/// `L_G = L_cyc + H(D_high(S_high'), 1)`, `L_F = L_cyc + H(D_low(S_low'), 1)`,
/// each term scaled by `w`. Discriminator weights enter as constants.
pub fn generator_losses_graph<T: Scalar>(
    g: &mut Graph<T>,
    v: &CycleVars,
    d_high: &PatchDiscriminator<T>,
    d_low: &PatchDiscriminator<T>,
    w: &GanLossWeights,
) -> Result<GeneratorLossVars> {
    let cyc_s = cycle_loss_s_graph(g, v)?;
    let cyc_r = cycle_loss_r_graph(g, v)?;
    let cyc_total = g.add(cyc_s, cyc_r)?;
    let score_g = d_high.forward(g, v.s_high_p, false)?;
    let adv_g = bce_const(g, score_g, 1.0)?;
    let score_f = d_low.forward(g, v.s_low_p, false)?;
    let adv_f = bce_const(g, score_f, 1.0)?;
    let cyc_w = g.scale(cyc_total, w.cycle);
    let adv_gw = g.scale(adv_g, w.adversarial);
    let adv_fw = g.scale(adv_f, w.adversarial);
    let gen_g = g.add(cyc_w, adv_gw)?;
    let gen_f = g.add(cyc_w, adv_fw)?;
    Ok(GeneratorLossVars {
        cyc_s,
        cyc_r,
        cyc_total,
        adv_g,
        adv_f,
        gen_g,
        gen_f,
    })
}

/// `H(D(fake), 0) + H(D(real), 1)`; `fake` is detached from its producers.
pub fn discriminator_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    d: &PatchDiscriminator<T>,
    fake: Var,
    real: Var,
    trainable: bool,
) -> Result<Var> {
    let fake = g.detach(fake);
    let sf = d.forward(g, fake, trainable)?;
    let lf = bce_const(g, sf, 0.0)?;
    let sr = d.forward(g, real, trainable)?;
    let lr = bce_const(g, sr, 1.0)?;
    g.add(lf, lr)
}

pub fn cycle_loss_s<T: Scalar>(st: &CycleState<T>) -> Result<f64> {
    let mut g = Graph::new();
    let v = CycleVars::from_state(&mut g, st)?;
    let l = cycle_loss_s_graph(&mut g, &v)?;
    Ok(g.scalar(l))
}

pub fn cycle_loss_r<T: Scalar>(st: &CycleState<T>) -> Result<f64> {
    let mut g = Graph::new();
    let v = CycleVars::from_state(&mut g, st)?;
    let l = cycle_loss_r_graph(&mut g, &v)?;
    Ok(g.scalar(l))
}

/// `(L_G, L_F)` for a populated cycle state.
pub fn generator_losses<T: Scalar>(
    st: &CycleState<T>,
    d_high: &PatchDiscriminator<T>,
    d_low: &PatchDiscriminator<T>,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let v = CycleVars::from_state(&mut g, st)?;
    let l = generator_losses_graph(&mut g, &v, d_high, d_low, &GanLossWeights::default())?;
    Ok((g.scalar(l.gen_g), g.scalar(l.gen_f)))
}

/// `(L_D_high, L_D_low)`: generated samples from `st` against target 0, real samples against 1.
pub fn discriminator_losses<T: Scalar>(
    st: &CycleState<T>,
    d_high: &PatchDiscriminator<T>,
    d_low: &PatchDiscriminator<T>,
    s_high_real: &Tensor<T>,
    s_low_real: &Tensor<T>,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let v = CycleVars::from_state(&mut g, st)?;
    let rh = g.constant(s_high_real.clone());
    let rl = g.constant(s_low_real.clone());
    let lh = discriminator_loss_graph(&mut g, d_high, v.s_high_p, rh, false)?;
    let ll = discriminator_loss_graph(&mut g, d_low, v.s_low_p, rl, false)?;
    Ok((g.scalar(lh), g.scalar(ll)))
}

/// Full generator/discriminator report for a state.
pub fn loss_report<T: Scalar>(
    st: &CycleState<T>,
    d_high: &PatchDiscriminator<T>,
    d_low: &PatchDiscriminator<T>,
) -> Result<LossReport> {
    let (f, b) = st.chains()?;
    let mut g = Graph::new();
    let v = CycleVars::from_state(&mut g, st)?;
    let gl = generator_losses_graph(&mut g, &v, d_high, d_low, &GanLossWeights::default())?;
    let rh = g.constant(b.s_high.clone());
    let rl = g.constant(f.s_low.clone());
    let dh = discriminator_loss_graph(&mut g, d_high, v.s_high_p, rh, false)?;
    let dl = discriminator_loss_graph(&mut g, d_low, v.s_low_p, rl, false)?;
    let mut r = LossReport::new();
    r.set("cyc_S", g.scalar(gl.cyc_s));
    r.set("cyc_R", g.scalar(gl.cyc_r));
    r.set("cyc_total", g.scalar(gl.cyc_total));
    r.set("gen_G", g.scalar(gl.gen_g));
    r.set("gen_F", g.scalar(gl.gen_f));
    r.set("disc_high", g.scalar(dh));
    r.set("disc_low", g.scalar(dl));
    Ok(r)
}
