//! Unpaired cycle-consistent adversarial training.
//!
//! One step runs both cycles, updates `G2` and `F2` jointly on `L_G + L_F`,
//! then `D_high` and `D_low` on their own losses with the generated images
//! detached. The decomposition network is frozen unless configured otherwise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    discriminator_loss_graph, generator_losses_graph, run_cycle, CycleNets, CycleState, CycleVars, DiscSpec,
    GanLossWeights, PatchDiscriminator, Trainable,
};
use crate::autograd::Graph;
use crate::checkpoint::{write_atomic, Checkpoint, CheckpointMeta};
use crate::dataset::UnpairedDataset;
use crate::decomposition::{DecompNet, DECOMP_ARCHITECTURE};
use crate::enhancement::{Direction, EnhanceNet, GeneratorBundle, UNetSpec};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{Adam, ParamSet};
use crate::report::LossReport;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GAN_ARCHITECTURE: &str = "retinex-cyclegan-v1";

/// Loss columns of the full cycle model, in log order.
pub const CYCLE_COLUMNS: [&str; 7] = ["cyc_S", "cyc_R", "cyc_total", "gen_G", "gen_F", "disc_high", "disc_low"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_gen: f64,
    pub lr_disc: f64,
    /// Learning-rate multiplier applied once at the midpoint epoch.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_decomp: bool,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub unet: UNetSpec,
    pub disc: DiscSpec,
    pub weights: GanLossWeights,
    /// Checksum the networks around every update and fail on cross-talk.
    pub verify_isolation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_gen: 0.0002,
            lr_disc: 0.0002,
            decay: 0.5,
            epochs: 500,
            batch_size: 8,
            seed: 0,
            freeze_decomp: true,
            checkpoint_every: 50,
            beta1: 0.5,
            beta2: 0.999,
            unet: UNetSpec::paper(),
            disc: DiscSpec::default(),
            weights: GanLossWeights::default(),
            verify_isolation: false,
        }
    }
}

impl TrainConfig {
    /// Reduced networks on 32×32 images for single-core runs.
    pub fn desk() -> Self {
        Self {
            unet: UNetSpec {
                input_size: 32,
                num_down: 4,
                num_up: 4,
                channel_plan: vec![4, 16, 32, 32, 32],
                kernel: 3,
                out_channels: 1,
            },
            disc: DiscSpec {
                widths: vec![16, 32, 32, 1],
                strides: vec![2, 2, 1, 1],
                kernel: 4,
                pad: 1,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_gen >= 0.0 && self.lr_disc >= 0.0 && self.decay > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be nonnegative and decay positive (lr_gen {}, lr_disc {}, decay {})",
                self.lr_gen, self.lr_disc, self.decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.unet.validate()?;
        self.disc.validate()?;
        self.weights.validate()?;
        if self.disc.grid_size(self.unet.input_size).is_none() {
            return Err(Error::Config(format!(
                "discriminator produces no scores on {} px images",
                self.unet.input_size
            )));
        }
        Ok(())
    }

    /// Epochs between decays: the midpoint of the run.
    pub fn decay_every(&self) -> usize {
        self.epochs.div_ceil(2).max(1)
    }

    /// Multiplier on both base learning rates during 0-based `epoch`.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        self.decay.powi((epoch / self.decay_every()) as i32)
    }

    pub fn lr_gen_at(&self, epoch: usize) -> f64 {
        self.lr_gen * self.lr_factor(epoch)
    }

    pub fn lr_disc_at(&self, epoch: usize) -> f64 {
        self.lr_disc * self.lr_factor(epoch)
    }

    /// Stable hash of every field; variants trained from one config share it.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        json.iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
    }
}

/// Independent seed for sub-component `tag` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

/// Seed tags; stable so checkpoints and logs stay reproducible.
pub(crate) mod seed_tag {
    pub const GEN: u64 = 1;
    pub const INV: u64 = 2;
    pub const D_HIGH: u64 = 3;
    pub const D_LOW: u64 = 4;
    pub const BATCHES: u64 = 5;
}

/// Per-epoch batch plan: both pools are shuffled independently and walked
/// with wrap-around, so every batch holds exactly `batch` images of each kind.
pub fn epoch_batches(
    n_low: usize,
    n_high: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut low: Vec<usize> = (0..n_low).collect();
    let mut high: Vec<usize> = (0..n_high).collect();
    low.shuffle(rng);
    high.shuffle(rng);
    let steps = n_low.max(n_high).div_ceil(batch);
    (0..steps)
        .map(|s| {
            let pick = |perm: &[usize]| (0..batch).map(|k| perm[(s * batch + k) % perm.len()]).collect();
            (pick(&low), pick(&high))
        })
        .collect()
}

pub(crate) fn gather<T: Scalar>(pool: &[ImageTensor<T>], idx: &[usize]) -> Result<Tensor<T>> {
    let imgs: Vec<ImageTensor<T>> = idx.iter().map(|&i| pool[i].clone()).collect();
    ImageTensor::batch(&imgs)
}

/// One training-log row.
#[derive(Clone, Debug, PartialEq)]
pub struct GanLogRow {
    /// 1-based epoch.
    pub epoch: usize,
    /// 1-based step counted across the whole run.
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

impl GanLogRow {
    pub fn csv_header(columns: &[&str]) -> String {
        format!("epoch,step,{},lr", columns.join(","))
    }

    pub fn csv_line(&self, columns: &[&str]) -> String {
        let mut out = format!("{},{}", self.epoch, self.step);
        for c in columns {
            out.push_str(&format!(",{}", self.report.get(c).unwrap_or(f64::NAN)));
        }
        out.push_str(&format!(",{}", self.lr));
        out
    }
}

/// Whole CSV log, header included.
pub fn log_csv(rows: &[GanLogRow], columns: &[&str]) -> String {
    let mut s = GanLogRow::csv_header(columns);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line(columns));
        s.push('\n');
    }
    s
}

/// Mean of `key` over each epoch's rows, in epoch order.
pub fn epoch_means(rows: &[GanLogRow], key: &str) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        let v = r.report.get(key).unwrap_or(f64::NAN);
        match out.last_mut() {
            Some(last) if last.0 == r.epoch => {
                last.1 += v;
                last.2 += 1;
            }
            _ => out.push((r.epoch, v, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

pub(crate) fn check_finite(report: &LossReport) -> Result<()> {
    if let Some((name, v)) = report.first_invalid() {
        return Err(Error::NonFinite {
            name: name.to_string(),
            epoch: 0,
            step: 0,
            dump: format!("{report} (offending value {v})"),
        });
    }
    Ok(())
}

pub(crate) fn locate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { name, dump, .. } => Error::NonFinite {
            name,
            epoch,
            step,
            dump,
        },
        other => other,
    }
}

pub(crate) fn ensure_unchanged(label: &str, before: u64, after: u64) -> Result<()> {
    if before != after {
        return Err(Error::State(format!("{label} parameters changed during another network's update")));
    }
    Ok(())
}

/// The four trainable networks plus the shared decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleGan<T> {
    pub decomp: DecompNet<T>,
    pub g2: EnhanceNet<T>,
    pub f2: EnhanceNet<T>,
    pub d_high: PatchDiscriminator<T>,
    pub d_low: PatchDiscriminator<T>,
}

impl<T: Scalar> CycleGan<T> {
    /// Fresh enhancers and discriminators seeded from `cfg.seed`.
    pub fn init(decomp: DecompNet<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut unet = cfg.unet.clone();
        unet.channel_plan[0] = 4;
        unet.out_channels = 1;
        Ok(Self {
            decomp,
            g2: EnhanceNet::new(&unet, Direction::LowToHigh, derive_seed(cfg.seed, seed_tag::GEN))?,
            f2: EnhanceNet::new(&unet, Direction::HighToLow, derive_seed(cfg.seed, seed_tag::INV))?,
            d_high: PatchDiscriminator::new(&cfg.disc, "d_high", derive_seed(cfg.seed, seed_tag::D_HIGH))?,
            d_low: PatchDiscriminator::new(&cfg.disc, "d_low", derive_seed(cfg.seed, seed_tag::D_LOW))?,
        })
    }

    pub fn nets(&self) -> CycleNets<'_, T> {
        CycleNets {
            decomp: &self.decomp,
            g2: &self.g2,
            f2: &self.f2,
        }
    }

    /// `G = G3 ∘ G2 ∘ G1`.
    pub fn generator(&self) -> GeneratorBundle<'_, T> {
        GeneratorBundle::new(&self.decomp, &self.g2)
    }

    /// `F = F3 ∘ F2 ∘ G1`.
    pub fn inverse_generator(&self) -> GeneratorBundle<'_, T> {
        GeneratorBundle::new(&self.decomp, &self.f2)
    }

    /// Every tensor of every network.
    pub fn all_params(&self) -> ParamSet<T> {
        let mut p = self.decomp.params().clone();
        for set in [self.g2.params(), self.f2.params(), self.d_high.params(), self.d_low.params()] {
            p.extend(set);
        }
        p
    }

    /// Runs both cycles without recording gradients.
    pub fn cycle(&self, s_low: &Tensor<T>, s_high: &Tensor<T>) -> Result<CycleState<T>> {
        let mut g = Graph::new();
        let sl = g.constant(s_low.clone());
        let sh = g.constant(s_high.clone());
        let no = Trainable {
            decomp: false,
            enhancers: false,
        };
        let v = run_cycle(&mut g, self.nets(), sl, sh, no)?;
        Ok(v.to_state(&g))
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig, epochs_done: u64) -> Checkpoint<T> {
        Checkpoint::new(
            CheckpointMeta {
                architecture: GAN_ARCHITECTURE.into(),
                seed: cfg.seed,
                iterations: epochs_done,
                config: serde_json::json!({
                    "variant": "retinex_cyclegan",
                    "train": cfg,
                    "decomp_spec": self.decomp.spec(),
                }),
            },
            self.all_params(),
        )
    }

    /// Restores a checkpoint written by [`CycleGan::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<(Self, TrainConfig)> {
        if ckpt.meta.architecture != GAN_ARCHITECTURE {
            return Err(Error::Checkpoint(format!(
                "expected a `{GAN_ARCHITECTURE}` checkpoint, found `{}`",
                ckpt.meta.architecture
            )));
        }
        let cfg = stored_train_config(ckpt)?;
        let decomp = DecompNet::from_checkpoint(ckpt)?;
        let mut nets = Self::init(decomp, &cfg)?;
        nets.g2.params_mut().load_from(&ckpt.params)?;
        nets.f2.params_mut().load_from(&ckpt.params)?;
        nets.d_high.params_mut().load_from(&ckpt.params)?;
        nets.d_low.params_mut().load_from(&ckpt.params)?;
        Ok((nets, cfg))
    }

    /// Starting point of a run: a decomposition-only checkpoint gets fresh
    /// enhancers and discriminators from `cfg.seed`; a full checkpoint resumes.
    pub fn from_start_checkpoint(ckpt: &Checkpoint<T>, cfg: &TrainConfig) -> Result<Self> {
        match ckpt.meta.architecture.as_str() {
            GAN_ARCHITECTURE => Ok(Self::from_checkpoint(ckpt)?.0),
            DECOMP_ARCHITECTURE => Self::init(DecompNet::from_checkpoint(ckpt)?, cfg),
            other => Err(Error::Config(format!("cannot start GAN training from a `{other}` checkpoint"))),
        }
    }
}

pub(crate) fn stored_train_config<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<TrainConfig> {
    let v = ckpt
        .meta
        .config
        .get("train")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no training config".into()))?;
    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("bad training config: {e}")))
}

/// One Adam instance per network.
#[derive(Clone, Debug)]
pub struct Optimizers<T> {
    pub g2: Adam<T>,
    pub f2: Adam<T>,
    pub d_high: Adam<T>,
    pub d_low: Adam<T>,
    pub decomp: Adam<T>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        let gen = || Adam::new(cfg.lr_gen, cfg.beta1, cfg.beta2);
        let disc = || Adam::new(cfg.lr_disc, cfg.beta1, cfg.beta2);
        Self {
            g2: gen(),
            f2: gen(),
            d_high: disc(),
            d_low: disc(),
            decomp: gen(),
        }
    }

    pub fn set_epoch(&mut self, cfg: &TrainConfig, epoch: usize) {
        let (g, d) = (cfg.lr_gen_at(epoch), cfg.lr_disc_at(epoch));
        self.g2.lr = g;
        self.f2.lr = g;
        self.decomp.lr = g;
        self.d_high.lr = d;
        self.d_low.lr = d;
    }
}

/// One optimization step on a batch pair; losses are those before the updates.
pub fn train_step<T: Scalar>(
    nets: &mut CycleGan<T>,
    opt: &mut Optimizers<T>,
    s_low: &Tensor<T>,
    s_high: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if s_low.shape() != s_high.shape() {
        return Err(Error::Shape(format!(
            "batches differ: {:?} vs {:?}",
            s_low.shape(),
            s_high.shape()
        )));
    }
    let verify = cfg.verify_isolation;
    let mut g = Graph::new();
    let sl = g.constant(s_low.clone());
    let sh = g.constant(s_high.clone());
    let trainable = Trainable {
        decomp: !cfg.freeze_decomp,
        enhancers: true,
    };
    let v: CycleVars = run_cycle(&mut g, nets.nets(), sl, sh, trainable)?;
    let gl = generator_losses_graph(&mut g, &v, &nets.d_high, &nets.d_low, &cfg.weights)?;
    let mut report = LossReport::new();
    report.set("cyc_S", g.scalar(gl.cyc_s));
    report.set("cyc_R", g.scalar(gl.cyc_r));
    report.set("cyc_total", g.scalar(gl.cyc_total));
    report.set("gen_G", g.scalar(gl.gen_g));
    report.set("gen_F", g.scalar(gl.gen_f));
    check_finite(&report)?;

    let disc_sums = verify.then(|| (nets.d_high.params().checksum(), nets.d_low.params().checksum()));
    let total = g.add(gl.gen_g, gl.gen_f)?;
    g.backward(total)?;
    opt.g2.step(nets.g2.params_mut(), &g);
    opt.f2.step(nets.f2.params_mut(), &g);
    if !cfg.freeze_decomp {
        opt.decomp.step(nets.decomp.params_mut(), &g);
    }
    if let Some((h, l)) = disc_sums {
        ensure_unchanged("D_high", h, nets.d_high.params().checksum())?;
        ensure_unchanged("D_low", l, nets.d_low.params().checksum())?;
    }
    let fake_high = g.value(v.s_high_p).clone();
    let fake_low = g.value(v.s_low_p).clone();
    drop(g);

    let gen_sums = verify.then(|| {
        (
            nets.g2.params().checksum(),
            nets.f2.params().checksum(),
            nets.decomp.params().checksum(),
        )
    });
    let dh = disc_update(&mut nets.d_high, &mut opt.d_high, fake_high, s_high)?;
    report.set("disc_high", dh);
    check_finite(&report)?;
    let dl = disc_update(&mut nets.d_low, &mut opt.d_low, fake_low, s_low)?;
    report.set("disc_low", dl);
    if let Some((a, b, c)) = gen_sums {
        ensure_unchanged("G2", a, nets.g2.params().checksum())?;
        ensure_unchanged("F2", b, nets.f2.params().checksum())?;
        ensure_unchanged("decomposition", c, nets.decomp.params().checksum())?;
    }
    Ok(report)
}

/// Scores detached fakes against 0 and reals against 1, then steps `d`.
/// Nothing is updated when the loss is not finite.
pub(crate) fn disc_update<T: Scalar>(
    d: &mut PatchDiscriminator<T>,
    opt: &mut Adam<T>,
    fake: Tensor<T>,
    real: &Tensor<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(fake);
    let r = g.constant(real.clone());
    let loss = discriminator_loss_graph(&mut g, d, f, r, true)?;
    let value = g.scalar(loss);
    if value.is_finite() {
        g.backward(loss)?;
        opt.step(d.params_mut(), &g);
    }
    Ok(value)
}

/// Trains `nets` in place for `cfg.epochs` epochs, calling `on_epoch` with the
/// 1-based epoch after each one. Returns one log row per step.
pub fn train_gan<T: Scalar>(
    nets: &mut CycleGan<T>,
    cfg: &TrainConfig,
    data: &UnpairedDataset<T>,
    mut on_epoch: impl FnMut(usize, &CycleGan<T>) -> Result<()>,
) -> Result<Vec<GanLogRow>> {
    cfg.validate()?;
    let size = cfg.unet.input_size;
    if data.image_size() != (size, size) {
        return Err(Error::Config(format!(
            "images are {:?}, the enhancer expects {size}x{size}",
            data.image_size()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, seed_tag::BATCHES));
    let mut opt = Optimizers::new(cfg);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        opt.set_epoch(cfg, epoch);
        for (li, hi) in epoch_batches(data.low.len(), data.high.len(), cfg.batch_size, &mut rng) {
            step += 1;
            let low = gather(&data.low, &li)?;
            let high = gather(&data.high, &hi)?;
            let report = train_step(nets, &mut opt, &low, &high, cfg).map_err(|e| locate(e, epoch + 1, step))?;
            check_finite(&report).map_err(|e| locate(e, epoch + 1, step))?;
            log::debug!("epoch {} step {step}: {report}", epoch + 1);
            log.push(GanLogRow {
                epoch: epoch + 1,
                step,
                report,
                lr: cfg.lr_gen_at(epoch),
            });
        }
        on_epoch(epoch + 1, nets)?;
    }
    Ok(log)
}

/// File-level driver: starts from `start_ckpt`, writes `gan_log.csv`,
/// periodic `gan_epoch_<e>.ckpt` files and the final `gan.ckpt` into `out_dir`.
pub fn train_gan_to_dir<T: Scalar>(
    cfg: &TrainConfig,
    data: &UnpairedDataset<T>,
    start_ckpt: &Path,
    out_dir: &Path,
) -> Result<(CycleGan<T>, Vec<GanLogRow>)> {
    let start = Checkpoint::<T>::load(start_ckpt)?;
    let mut nets = CycleGan::from_start_checkpoint(&start, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let every = cfg.checkpoint_every;
    let log = train_gan(&mut nets, cfg, data, |epoch, n| {
        if every > 0 && epoch % every == 0 && epoch != cfg.epochs {
            n.to_checkpoint(cfg, epoch as u64)
                .save(out_dir.join(format!("gan_epoch_{epoch}.ckpt")))?;
        }
        Ok(())
    })?;
    nets.to_checkpoint(cfg, cfg.epochs as u64).save(out_dir.join("gan.ckpt"))?;
    write_atomic(&out_dir.join("gan_log.csv"), log_csv(&log, &CYCLE_COLUMNS).as_bytes())?;
    Ok((nets, log))
}
