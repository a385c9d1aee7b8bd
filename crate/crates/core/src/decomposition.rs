//! Retinex decomposition network and its paired-data training.
//!
//! A single [`DecompNet`] serves both the low-light and the well-lit branch:
//! there is exactly one decomposition parameter set in the whole pipeline.
//! The network is a 9×9 input convolution, a stack of 3×3 convolutions with
//! ReLU, and a 3×3 convolution to four channels squashed by a sigmoid and
//! split into reflectance (3 channels) and illumination (1 channel).
//!
//! The training loss combines
//!
//! * reconstruction: L1 between `R_i ∘ I_j` and `S_j` for all four
//!   `(i, j)` pairings, cross pairings down-weighted;
//! * reflectance invariance: L1 between `R_low` and `R_high`;
//! * illumination smoothness: `|∇I| · exp(-10 |∇ gray(R)|)` for both images,
//!   with forward differences that vanish on the last row/column.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::imaging::{load_image, patch_offsets, ImageTensor, PatchSpec, LUMA_WEIGHTS};
use crate::nn::{Adam, ConvLayer, ParamSet};
use crate::report::LossReport;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DECOMP_PREFIX: &str = "decomp";
pub const DECOMP_ARCHITECTURE: &str = "retinex-decomp-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompSpec {
    /// Feature width of every hidden layer.
    pub width: usize,
    /// Number of 3×3 conv + ReLU layers.
    pub hidden_layers: usize,
    pub input_kernel: usize,
}

impl Default for DecompSpec {
    fn default() -> Self {
        Self {
            width: 64,
            hidden_layers: 5,
            input_kernel: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionResult<T> {
    pub reflectance: ImageTensor<T>,
    pub illumination: ImageTensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompNet<T> {
    spec: DecompSpec,
    layers: Vec<ConvLayer>,
    params: ParamSet<T>,
    seed: u64,
}

impl<T: Scalar> DecompNet<T> {
    pub fn new(spec: DecompSpec, seed: u64) -> Result<Self> {
        if spec.width == 0 || spec.input_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid decomposition spec {spec:?}")));
        }
        let mut layers = vec![ConvLayer {
            name: format!("{DECOMP_PREFIX}.conv_in"),
            c_in: 3,
            c_out: spec.width,
            kernel: spec.input_kernel,
            stride: 1,
            pad: spec.input_kernel / 2,
            bias: true,
        }];
        for i in 0..spec.hidden_layers {
            layers.push(ConvLayer {
                name: format!("{DECOMP_PREFIX}.conv{}", i + 1),
                c_in: spec.width,
                c_out: spec.width,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: true,
            });
        }
        layers.push(ConvLayer {
            name: format!("{DECOMP_PREFIX}.conv_out"),
            c_in: spec.width,
            c_out: 4,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: true,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            let gain = if i == 0 || i == last { 1.0 } else { 2f64.sqrt() };
            l.init(&mut params, gain, &mut rng);
        }
        Ok(Self {
            spec,
            layers,
            params,
            seed,
        })
    }

    pub fn spec(&self) -> &DecompSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
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

    /// Records the network on `g`; returns `(R, I)` as `[N,3,H,W]` and `[N,1,H,W]`.
    pub fn forward(&self, g: &mut Graph<T>, s: Var, trainable: bool) -> Result<(Var, Var)> {
        let (_, c, _, _) = g.value(s).dims4();
        if c != 3 {
            return Err(Error::Shape(format!("decomposition expects 3 channels, got {c}")));
        }
        let last = self.layers.len() - 1;
        let mut x = s;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(g, &self.params, trainable, x)?;
            if i != 0 && i != last {
                x = g.relu(x);
            }
        }
        let out = g.sigmoid(x);
        let r = g.narrow(out, 0, 3)?;
        let i = g.narrow(out, 3, 1)?;
        Ok((r, i))
    }

    /// Batched inference on an `[N,3,H,W]` tensor.
    pub fn decompose_tensor(&self, s: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let x = g.constant(s.clone());
        let (r, i) = self.forward(&mut g, x, false)?;
        Ok((g.value(r).clone(), g.value(i).clone()))
    }

    pub fn decompose(&self, s: &ImageTensor<T>) -> Result<DecompositionResult<T>> {
        if s.channels() != 3 {
            return Err(Error::Shape(format!("decomposition expects 3 channels, got {}", s.channels())));
        }
        let (r, i) = self.decompose_tensor(&s.to_nchw())?;
        Ok(DecompositionResult {
            reflectance: ImageTensor::from_nchw(&r, 0)?,
            illumination: ImageTensor::from_nchw(&i, 0)?,
        })
    }

    /// Checkpoint whose metadata config records the [`DecompSpec`] under `decomp_spec`.
    pub fn to_checkpoint(&self, iterations: u64, mut config: serde_json::Value) -> Checkpoint<T> {
        if let serde_json::Value::Object(m) = &mut config {
            m.insert("decomp_spec".into(), serde_json::to_value(&self.spec).expect("spec serializes"));
        } else {
            config = serde_json::json!({ "decomp_spec": self.spec });
        }
        Checkpoint::new(
            CheckpointMeta {
                architecture: DECOMP_ARCHITECTURE.into(),
                seed: self.seed,
                iterations,
                config,
            },
            self.params.clone(),
        )
    }

    /// Rebuilds the network from the `decomp.*` tensors of any checkpoint
    /// carrying a `decomp_spec` entry.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let spec: DecompSpec = ckpt
            .meta
            .config
            .get("decomp_spec")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::Checkpoint(format!("bad decomp_spec: {e}")))?
            .ok_or_else(|| Error::Checkpoint("checkpoint has no decomposition network".into()))?;
        let mut net = Self::new(spec, ckpt.meta.seed)?;
        let stored = ckpt.subset(&format!("{DECOMP_PREFIX}."));
        if stored.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} decomposition tensors, found {}",
                net.params.len(),
                stored.len()
            )));
        }
        net.params.load_from(&stored)?;
        Ok(net)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompLossWeights {
    pub w_recon: f64,
    /// Weight of the two cross pairings inside the reconstruction term.
    pub w_cross: f64,
    pub w_invariant_reflectance: f64,
    pub w_illum_smoothness: f64,
}

impl Default for DecompLossWeights {
    fn default() -> Self {
        Self {
            w_recon: 1.0,
            w_cross: 0.001,
            w_invariant_reflectance: 0.01,
            w_illum_smoothness: 0.1,
        }
    }
}

impl DecompLossWeights {
    fn validate(&self) -> Result<()> {
        let all = [self.w_recon, self.w_cross, self.w_invariant_reflectance, self.w_illum_smoothness];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Graph handles of the decomposition loss terms.
#[derive(Clone, Copy, Debug)]
pub struct DecompLossVars {
    pub recon: Var,
    pub invariant_reflectance: Var,
    pub illum_smooth: Var,
    pub total: Var,
}

fn mean_l1<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn smoothness<T: Scalar>(g: &mut Graph<T>, r: Var, i: Var) -> Result<Var> {
    let gray = g.channel_mix(r, &LUMA_WEIGHTS)?;
    let mut total = None;
    for dir in 0..2 {
        let (gi, gr) = if dir == 0 {
            (g.grad_x(i), g.grad_x(gray))
        } else {
            (g.grad_y(i), g.grad_y(gray))
        };
        let gi = g.abs(gi);
        let gr = g.abs(gr);
        let gr = g.scale(gr, -10.0);
        let weight = g.exp(gr);
        let term = g.mul(gi, weight)?;
        let term = g.mean(term);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("two directions"))
}

/// Records the decomposition loss on `g`.
pub fn decomp_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    low: (Var, Var),
    high: (Var, Var),
    s_low: Var,
    s_high: Var,
    w: &DecompLossWeights,
) -> Result<DecompLossVars> {
    w.validate()?;
    let (r_low, i_low) = low;
    let (r_high, i_high) = high;
    for (a, b) in [(r_low, s_low), (r_high, s_high), (r_low, r_high)] {
        if g.value(a).shape() != g.value(b).shape() {
            return Err(Error::Shape(format!(
                "decomposition loss inputs {:?} vs {:?}",
                g.value(a).shape(),
                g.value(b).shape()
            )));
        }
    }
    let rec_ll = g.mul_channel(r_low, i_low)?;
    let rec_hh = g.mul_channel(r_high, i_high)?;
    let rec_hl = g.mul_channel(r_high, i_low)?;
    let rec_lh = g.mul_channel(r_low, i_high)?;
    let ll = mean_l1(g, rec_ll, s_low)?;
    let hh = mean_l1(g, rec_hh, s_high)?;
    let hl = mean_l1(g, rec_hl, s_low)?;
    let lh = mean_l1(g, rec_lh, s_high)?;
    let direct = g.add(ll, hh)?;
    let cross = g.add(hl, lh)?;
    let cross = g.scale(cross, w.w_cross);
    let recon = g.add(direct, cross)?;
    let invariant = mean_l1(g, r_low, r_high)?;
    let sm_low = smoothness(g, r_low, i_low)?;
    let sm_high = smoothness(g, r_high, i_high)?;
    let smooth = g.add(sm_low, sm_high)?;
    let a = g.scale(recon, w.w_recon);
    let b = g.scale(invariant, w.w_invariant_reflectance);
    let c = g.scale(smooth, w.w_illum_smoothness);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(DecompLossVars {
        recon,
        invariant_reflectance: invariant,
        illum_smooth: smooth,
        total,
    })
}

fn report_of<T: Scalar>(g: &Graph<T>, v: &DecompLossVars) -> LossReport {
    let mut r = LossReport::new();
    r.set("recon", g.scalar(v.recon));
    r.set("invariant_reflectance", g.scalar(v.invariant_reflectance));
    r.set("illum_smooth", g.scalar(v.illum_smooth));
    r.set("total", g.scalar(v.total));
    r
}

/// Evaluates the decomposition loss on concrete decompositions.
pub fn decomp_loss<T: Scalar>(
    low: &DecompositionResult<T>,
    high: &DecompositionResult<T>,
    s_low: &ImageTensor<T>,
    s_high: &ImageTensor<T>,
    w: &DecompLossWeights,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let rl = g.constant(low.reflectance.to_nchw());
    let il = g.constant(low.illumination.to_nchw());
    let rh = g.constant(high.reflectance.to_nchw());
    let ih = g.constant(high.illumination.to_nchw());
    let sl = g.constant(s_low.to_nchw());
    let sh = g.constant(s_high.to_nchw());
    let vars = decomp_loss_graph(&mut g, (rl, il), (rh, ih), sl, sh, w)?;
    Ok(report_of(&g, &vars))
}

/// Aligned low/well-lit image pairs.
#[derive(Clone, Debug)]
pub struct PairedDataset<T> {
    pub pairs: Vec<(String, ImageTensor<T>, ImageTensor<T>)>,
}

impl<T: Scalar> PairedDataset<T> {
    pub fn new(pairs: Vec<(String, ImageTensor<T>, ImageTensor<T>)>) -> Result<Self> {
        for (name, lo, hi) in &pairs {
            if (lo.height(), lo.width()) != (hi.height(), hi.width()) || lo.channels() != 3 || hi.channels() != 3 {
                return Err(Error::Config(format!("pair `{name}` has mismatched or non-RGB images")));
            }
        }
        Ok(Self { pairs })
    }

    /// Loads `<dir>/low/*.png` and `<dir>/high/*.png`, paired by file name.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let names = crate::dataset::png_names(&dir.join("low"))?;
        let mut pairs = Vec::new();
        for name in names {
            let hi = dir.join("high").join(&name);
            if !hi.exists() {
                return Err(Error::Config(format!("no well-lit counterpart for {name}")));
            }
            pairs.push((name.clone(), load_image(dir.join("low").join(&name))?, load_image(hi)?));
        }
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompTrainConfig {
    pub lr: f64,
    /// Learning-rate multiplier applied every `decay_every` iterations.
    pub decay: f64,
    pub decay_every: usize,
    pub iterations: usize,
    pub patch_count: usize,
    pub patch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub weights: DecompLossWeights,
}

impl Default for DecompTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            decay: 0.9,
            decay_every: 20,
            iterations: 100,
            patch_count: 16,
            patch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            weights: DecompLossWeights::default(),
        }
    }
}

impl DecompTrainConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.decay.powi((iteration / self.decay_every.max(1)) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompLogRow {
    pub iteration: usize,
    pub report: LossReport,
    pub lr: f64,
}

impl DecompLogRow {
    pub const CSV_HEADER: &'static str = "iteration,recon,invariant_reflectance,illum_smooth,total,lr";

    pub fn csv_line(&self) -> String {
        let g = |k| self.report.get(k).unwrap_or(f64::NAN);
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            g("recon"),
            g("invariant_reflectance"),
            g("illum_smooth"),
            g("total"),
            self.lr
        )
    }
}

/// Batches `count` aligned random patches from one randomly chosen pair.
fn paired_batch<T: Scalar>(
    data: &PairedDataset<T>,
    cfg: &DecompTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, lo, hi) = &data.pairs[rng.random_range(0..data.len())];
    let spec = PatchSpec {
        count: cfg.patch_count,
        size: cfg.patch_size,
        seed: 0,
    };
    let offsets = patch_offsets(lo.height(), lo.width(), &spec, rng)?;
    let mut lows = Vec::with_capacity(offsets.len());
    let mut highs = Vec::with_capacity(offsets.len());
    for (y, x) in offsets {
        lows.push(lo.crop(y, x, cfg.patch_size, cfg.patch_size)?);
        highs.push(hi.crop(y, x, cfg.patch_size, cfg.patch_size)?);
    }
    Ok((ImageTensor::batch(&lows)?, ImageTensor::batch(&highs)?))
}

/// Trains `net` in place on aligned patches; returns one log row per iteration.
pub fn train_decomposition<T: Scalar>(
    net: &mut DecompNet<T>,
    cfg: &DecompTrainConfig,
    data: &PairedDataset<T>,
) -> Result<Vec<DecompLogRow>> {
    if data.is_empty() {
        return Err(Error::Config("paired dataset is empty".into()));
    }
    if cfg.patch_count == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Config(format!("invalid decomposition training config {cfg:?}")));
    }
    cfg.weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let lr = cfg.lr_at(it);
        opt.lr = lr;
        let (lo, hi) = paired_batch(data, cfg, &mut rng)?;
        let mut g = Graph::new();
        let sl = g.constant(lo);
        let sh = g.constant(hi);
        let low = net.forward(&mut g, sl, true)?;
        let high = net.forward(&mut g, sh, true)?;
        let vars = decomp_loss_graph(&mut g, low, high, sl, sh, &cfg.weights)?;
        let report = report_of(&g, &vars);
        if let Some((name, v)) = report.first_invalid() {
            return Err(Error::NonFinite {
                name: name.to_string(),
                epoch: 0,
                step: it + 1,
                dump: format!("{report} (value {v})"),
            });
        }
        g.backward(vars.total)?;
        opt.step(net.params_mut(), &g);
        log::debug!("decomp iteration {}: {report}", it + 1);
        log.push(DecompLogRow {
            iteration: it + 1,
            report,
            lr,
        });
    }
    Ok(log)
}

/// Mean decomposition loss of `net` over the full images of every pair.
pub fn evaluate_decomposition<T: Scalar>(
    net: &DecompNet<T>,
    data: &PairedDataset<T>,
    w: &DecompLossWeights,
) -> Result<LossReport> {
    let mut acc = LossReport::new();
    for (_, lo, hi) in &data.pairs {
        let r = decomp_loss(&net.decompose(lo)?, &net.decompose(hi)?, lo, hi, w)?;
        for (k, v) in r.iter() {
            acc.set(k, acc.get(k).unwrap_or(0.0) + v / data.len() as f64);
        }
    }
    Ok(acc)
}
