//! Comparison variants sharing one training and evaluation harness.
//!
//! * `plain_gan`: a 3-in/3-out U-Net maps `S_low` straight to `S_high'`,
//!   trained with the adversarial loss against `D_high` only.
//! * `retinex_gan`: decomposition + illumination enhancer, adversarial loss
//!   only; no inverse network and no cycle terms.
//! * `retinex_cyclegan`: the full model of [`crate::training`].
//!
//! All three draw initial weights, batches and learning rates from the same
//! [`TrainConfig`]; only loss composition and network widths differ.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{bce_const, PatchDiscriminator};
use crate::autograd::Graph;
use crate::checkpoint::{write_atomic, Checkpoint, CheckpointMeta};
use crate::dataset::UnpairedDataset;
use crate::decomposition::{DecompNet, PairedDataset, DECOMP_ARCHITECTURE};
use crate::enhancement::{build_unet, Direction, EnhanceNet, UNetSpec};
use crate::error::{Error, Result};
use crate::imaging::{recompose, save_image, ImageTensor};
use crate::metrics::{ImageMetrics, MetricReport, MetricRow, NiqeModel};
use crate::nn::{Adam, ParamSet};
use crate::report::LossReport;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{
    check_finite, derive_seed, disc_update, ensure_unchanged, epoch_batches, gather, locate, seed_tag,
    stored_train_config, train_gan, CycleGan, GanLogRow, TrainConfig, CYCLE_COLUMNS, GAN_ARCHITECTURE,
};

pub const PLAIN_ARCHITECTURE: &str = "plain-gan-v1";
pub const RETINEX_GAN_ARCHITECTURE: &str = "retinex-gan-v1";

/// Loss columns of the one-directional variants.
pub const ONE_WAY_COLUMNS: [&str; 2] = ["gen_G", "disc_high"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    PlainGan,
    RetinexGan,
    RetinexCyclegan,
}

impl VariantId {
    pub const ALL: [VariantId; 3] = [VariantId::PlainGan, VariantId::RetinexGan, VariantId::RetinexCyclegan];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantId::PlainGan => "plain_gan",
            VariantId::RetinexGan => "retinex_gan",
            VariantId::RetinexCyclegan => "retinex_cyclegan",
        }
    }

    pub fn architecture(self) -> &'static str {
        match self {
            VariantId::PlainGan => PLAIN_ARCHITECTURE,
            VariantId::RetinexGan => RETINEX_GAN_ARCHITECTURE,
            VariantId::RetinexCyclegan => GAN_ARCHITECTURE,
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantId::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected plain_gan, retinex_gan or retinex_cyclegan)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub id: VariantId,
    pub use_decomposition: bool,
    pub use_cycle: bool,
}

impl VariantSpec {
    pub fn new(id: VariantId) -> Self {
        let (use_decomposition, use_cycle) = match id {
            VariantId::PlainGan => (false, false),
            VariantId::RetinexGan => (true, false),
            VariantId::RetinexCyclegan => (true, true),
        };
        Self {
            id,
            use_decomposition,
            use_cycle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if *self != Self::new(self.id) {
            return Err(Error::Config(format!("toggles do not match variant {}: {self:?}", self.id)));
        }
        Ok(())
    }

    pub fn log_columns(&self) -> &'static [&'static str] {
        if self.use_cycle {
            &CYCLE_COLUMNS
        } else {
            &ONE_WAY_COLUMNS
        }
    }

    /// Enhancer layout derived from the shared config.
    pub fn unet(&self, base: &UNetSpec) -> UNetSpec {
        let mut u = base.clone();
        let c = if self.use_decomposition { (4, 1) } else { (3, 3) };
        u.channel_plan[0] = c.0;
        u.out_channels = c.1;
        u
    }
}

/// A variant without the inverse direction.
#[derive(Clone, Debug, PartialEq)]
pub struct OneWayGan<T> {
    pub spec: VariantSpec,
    pub decomp: Option<DecompNet<T>>,
    pub g: EnhanceNet<T>,
    pub d_high: PatchDiscriminator<T>,
}

impl<T: Scalar> OneWayGan<T> {
    pub fn init(spec: VariantSpec, decomp: Option<DecompNet<T>>, cfg: &TrainConfig) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        if spec.use_cycle {
            return Err(Error::Config("the cycle variant is trained by CycleGan".into()));
        }
        let decomp = match (spec.use_decomposition, decomp) {
            (true, None) => return Err(Error::Config(format!("{} needs a decomposition checkpoint", spec.id))),
            (true, d) => d,
            (false, _) => None,
        };
        let prefix = if spec.use_decomposition { Direction::LowToHigh.prefix() } else { "g" };
        Ok(Self {
            spec,
            decomp,
            g: build_unet(&spec.unet(&cfg.unet), prefix, derive_seed(cfg.seed, seed_tag::GEN))?,
            d_high: PatchDiscriminator::new(&cfg.disc, "d_high", derive_seed(cfg.seed, seed_tag::D_HIGH))?,
        })
    }

    pub fn all_params(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        if let Some(d) = &self.decomp {
            p.extend(d.params());
        }
        p.extend(self.g.params());
        p.extend(self.d_high.params());
        p
    }

    /// Records `S_low → S_high'` on `g`.
    fn forward(
        &self,
        g: &mut Graph<T>,
        s_low: crate::autograd::Var,
        decomp_trainable: bool,
        trainable: bool,
    ) -> Result<crate::autograd::Var> {
        match &self.decomp {
            Some(d) => {
                let (r, i) = d.forward(g, s_low, decomp_trainable)?;
                let ip = self.g.forward_ri(g, r, i, trainable)?;
                g.mul_channel(r, ip)
            }
            None => self.g.forward(g, s_low, trainable),
        }
    }

    pub fn translate_tensor(&self, s_low: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(s_low.clone());
        let y = self.forward(&mut g, x, false, false)?;
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig, epochs_done: u64) -> Checkpoint<T> {
        let mut config = serde_json::json!({ "variant": self.spec.id, "train": cfg });
        if let Some(d) = &self.decomp {
            config["decomp_spec"] = serde_json::to_value(d.spec()).expect("spec serializes");
        }
        Checkpoint::new(
            CheckpointMeta {
                architecture: self.spec.id.architecture().into(),
                seed: cfg.seed,
                iterations: epochs_done,
                config,
            },
            self.all_params(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<(Self, TrainConfig)> {
        let id = match ckpt.meta.architecture.as_str() {
            PLAIN_ARCHITECTURE => VariantId::PlainGan,
            RETINEX_GAN_ARCHITECTURE => VariantId::RetinexGan,
            other => return Err(Error::Checkpoint(format!("`{other}` is not a one-directional variant"))),
        };
        let cfg = stored_train_config(ckpt)?;
        let spec = VariantSpec::new(id);
        let decomp = if spec.use_decomposition {
            Some(DecompNet::from_checkpoint(ckpt)?)
        } else {
            None
        };
        let mut net = Self::init(spec, decomp, &cfg)?;
        net.g.params_mut().load_from(&ckpt.params)?;
        net.d_high.params_mut().load_from(&ckpt.params)?;
        Ok((net, cfg))
    }
}

/// One step of a one-directional variant: `G` on `H(D_high(G(S_low)), 1)`,
/// then `D_high` with the generated batch detached.
pub fn one_way_step<T: Scalar>(
    net: &mut OneWayGan<T>,
    opt_g: &mut Adam<T>,
    opt_d: &mut Adam<T>,
    opt_decomp: &mut Adam<T>,
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
    let mut g = Graph::new();
    let sl = g.constant(s_low.clone());
    let fake = net.forward(&mut g, sl, !cfg.freeze_decomp, true)?;
    let score = net.d_high.forward(&mut g, fake, false)?;
    let adv = bce_const(&mut g, score, 1.0)?;
    let gen = g.scale(adv, cfg.weights.adversarial);
    let mut report = LossReport::new();
    report.set("gen_G", g.scalar(gen));
    check_finite(&report)?;
    let d_sum = cfg.verify_isolation.then(|| net.d_high.params().checksum());
    g.backward(gen)?;
    opt_g.step(net.g.params_mut(), &g);
    if !cfg.freeze_decomp {
        if let Some(d) = net.decomp.as_mut() {
            opt_decomp.step(d.params_mut(), &g);
        }
    }
    if let Some(s) = d_sum {
        ensure_unchanged("D_high", s, net.d_high.params().checksum())?;
    }
    let fake = g.value(fake).clone();
    drop(g);
    let g_sum = cfg.verify_isolation.then(|| net.g.params().checksum());
    let dh = disc_update(&mut net.d_high, opt_d, fake, s_high)?;
    report.set("disc_high", dh);
    if let Some(s) = g_sum {
        ensure_unchanged("G", s, net.g.params().checksum())?;
    }
    Ok(report)
}

/// Trains a one-directional variant with the shared batch plan and schedule.
pub fn train_one_way<T: Scalar>(
    net: &mut OneWayGan<T>,
    cfg: &TrainConfig,
    data: &UnpairedDataset<T>,
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
    let mut opt_g = Adam::new(cfg.lr_gen, cfg.beta1, cfg.beta2);
    let mut opt_decomp = Adam::new(cfg.lr_gen, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(cfg.lr_disc, cfg.beta1, cfg.beta2);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        opt_g.lr = cfg.lr_gen_at(epoch);
        opt_decomp.lr = cfg.lr_gen_at(epoch);
        opt_d.lr = cfg.lr_disc_at(epoch);
        for (li, hi) in epoch_batches(data.low.len(), data.high.len(), cfg.batch_size, &mut rng) {
            step += 1;
            let low = gather(&data.low, &li)?;
            let high = gather(&data.high, &hi)?;
            let report = one_way_step(net, &mut opt_g, &mut opt_d, &mut opt_decomp, &low, &high, cfg)
                .and_then(|r| check_finite(&r).map(|_| r))
                .map_err(|e| locate(e, epoch + 1, step))?;
            log::debug!("{} epoch {} step {step}: {report}", net.spec.id, epoch + 1);
            log.push(GanLogRow {
                epoch: epoch + 1,
                step,
                report,
                lr: cfg.lr_gen_at(epoch),
            });
        }
    }
    Ok(log)
}

/// A trained model of any variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Enhancer<T> {
    Cycle(CycleGan<T>),
    OneWay(OneWayGan<T>),
}

/// Pipeline stages of one enhancement, all at network resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Stages<T> {
    pub s_low: ImageTensor<T>,
    pub r_low: Option<ImageTensor<T>>,
    pub i_low: Option<ImageTensor<T>>,
    pub i_high_p: Option<ImageTensor<T>>,
    pub s_high_p: ImageTensor<T>,
    pub r_high_p: Option<ImageTensor<T>>,
}

impl<T: Scalar> Enhancer<T> {
    pub fn variant(&self) -> VariantId {
        match self {
            Enhancer::Cycle(_) => VariantId::RetinexCyclegan,
            Enhancer::OneWay(n) => n.spec.id,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Enhancer::Cycle(n) => n.g2.spec().input_size,
            Enhancer::OneWay(n) => n.g.spec().input_size,
        }
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig, epochs_done: u64) -> Checkpoint<T> {
        match self {
            Enhancer::Cycle(n) => n.to_checkpoint(cfg, epochs_done),
            Enhancer::OneWay(n) => n.to_checkpoint(cfg, epochs_done),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<(Self, TrainConfig)> {
        match ckpt.meta.architecture.as_str() {
            GAN_ARCHITECTURE => CycleGan::from_checkpoint(ckpt).map(|(n, c)| (Enhancer::Cycle(n), c)),
            DECOMP_ARCHITECTURE => Err(Error::Config(
                "a decomposition-only checkpoint cannot enhance images; train a GAN first".into(),
            )),
            _ => OneWayGan::from_checkpoint(ckpt).map(|(n, c)| (Enhancer::OneWay(n), c)),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, TrainConfig)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Every stage for an image already at network resolution.
    pub fn stages(&self, s_low: &ImageTensor<T>) -> Result<Stages<T>> {
        let size = self.input_size();
        if (s_low.height(), s_low.width(), s_low.channels()) != (size, size, 3) {
            return Err(Error::Shape(format!("expected a {size}x{size} RGB image")));
        }
        match self {
            Enhancer::Cycle(n) => {
                let (s_high_p, inter) = n.generator().generate(s_low)?;
                let r_high_p = n.decomp.decompose(&s_high_p)?.reflectance;
                Ok(Stages {
                    s_low: s_low.clone(),
                    r_low: Some(inter.reflectance),
                    i_low: Some(inter.illumination),
                    i_high_p: Some(inter.enhanced_illumination),
                    s_high_p,
                    r_high_p: Some(r_high_p),
                })
            }
            Enhancer::OneWay(n) => match &n.decomp {
                Some(d) => {
                    let dec = d.decompose(s_low)?;
                    let ip = n.g.enhance_illumination(&dec.reflectance, &dec.illumination)?;
                    let s_high_p = recompose(&dec.reflectance, &ip)?;
                    Ok(Stages {
                        s_low: s_low.clone(),
                        r_low: Some(dec.reflectance),
                        i_low: Some(dec.illumination),
                        i_high_p: Some(ip),
                        s_high_p,
                        r_high_p: None,
                    })
                }
                None => Ok(Stages {
                    s_low: s_low.clone(),
                    r_low: None,
                    i_low: None,
                    i_high_p: None,
                    s_high_p: n.g.translate(s_low)?,
                    r_high_p: None,
                }),
            },
        }
    }

    /// Enhances an image of any size: resized to network resolution and the
    /// result resized back.
    pub fn enhance(&self, s_low: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        if s_low.channels() != 3 {
            return Err(Error::Shape("enhancement expects an RGB image".into()));
        }
        let size = self.input_size();
        let small = s_low.resize(size, size)?;
        self.stages(&small)?.s_high_p.resize(s_low.height(), s_low.width())
    }
}

/// Trains `spec` from the shared config. Retinex variants need `decomp`.
pub fn train_variant<T: Scalar>(
    spec: VariantSpec,
    cfg: &TrainConfig,
    data: &UnpairedDataset<T>,
    decomp: Option<DecompNet<T>>,
) -> Result<(Enhancer<T>, Vec<GanLogRow>)> {
    spec.validate()?;
    if spec.use_cycle {
        let d = decomp.ok_or_else(|| Error::Config(format!("{} needs a decomposition checkpoint", spec.id)))?;
        let mut nets = CycleGan::init(d, cfg)?;
        let log = train_gan(&mut nets, cfg, data, |_, _| Ok(()))?;
        Ok((Enhancer::Cycle(nets), log))
    } else {
        let mut net = OneWayGan::init(spec, decomp, cfg)?;
        let log = train_one_way(&mut net, cfg, data)?;
        Ok((Enhancer::OneWay(net), log))
    }
}

pub const STAGE_S_LOW: &str = "S_low.png";
pub const STAGE_R_LOW: &str = "R_low.png";
pub const STAGE_I_LOW: &str = "I_low.png";
pub const STAGE_I_HIGH_P: &str = "I_high_prime.png";
pub const STAGE_S_HIGH_P: &str = "S_high_prime.png";
pub const STAGE_R_HIGH_P: &str = "R_high_prime.png";
pub const STAGE_GRID: &str = "grid.png";

fn to_rgb<T: Scalar>(img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    if img.channels() == 3 {
        return Ok(img.clone());
    }
    let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
    ImageTensor::new(img.height(), img.width(), 3, data)
}

/// Horizontal strip of equally sized images.
fn grid<T: Scalar>(tiles: &[ImageTensor<T>]) -> Result<ImageTensor<T>> {
    let (h, w) = (tiles[0].height(), tiles[0].width());
    let n = tiles.len();
    let rgb: Vec<ImageTensor<T>> = tiles.iter().map(to_rgb).collect::<Result<_>>()?;
    let mut out = ImageTensor::filled(h, w * n, 3, T::zero())?;
    for (k, t) in rgb.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.set(y, k * w + x, c, t.get(y, x, c));
                }
            }
        }
    }
    Ok(out)
}

/// Writes every pipeline stage of `s_low` (resized to network resolution) as
/// a PNG plus `grid.png`; returns the written paths in stage order.
pub fn dump_intermediates<T: Scalar>(model: &Enhancer<T>, s_low: &ImageTensor<T>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let size = model.input_size();
    let st = model.stages(&s_low.resize(size, size)?)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let named: Vec<(&str, &ImageTensor<T>)> = [
        (STAGE_S_LOW, Some(&st.s_low)),
        (STAGE_R_LOW, st.r_low.as_ref()),
        (STAGE_I_LOW, st.i_low.as_ref()),
        (STAGE_I_HIGH_P, st.i_high_p.as_ref()),
        (STAGE_S_HIGH_P, Some(&st.s_high_p)),
        (STAGE_R_HIGH_P, st.r_high_p.as_ref()),
    ]
    .into_iter()
    .filter_map(|(n, i)| i.map(|i| (n, i)))
    .collect();
    let mut paths = Vec::with_capacity(named.len() + 1);
    for (name, img) in &named {
        let p = out_dir.join(name);
        save_image(*img, &p)?;
        paths.push(p);
    }
    let tiles: Vec<ImageTensor<T>> = named.iter().map(|(_, i)| (*i).clone()).collect();
    let p = out_dir.join(STAGE_GRID);
    save_image(&grid(&tiles)?, &p)?;
    paths.push(p);
    Ok(paths)
}

/// Enhances every low-light image of `pairs` and scores it against its
/// well-lit counterpart.
pub fn evaluate_enhancer<T: Scalar>(model: &Enhancer<T>, pairs: &PairedDataset<T>, niqe: &NiqeModel) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (name, lo, hi) in &pairs.pairs {
        let pred = model.enhance(lo)?.cast::<f64>();
        let metrics = ImageMetrics::compute(&pred, &hi.cast::<f64>(), niqe)?;
        rows.push(MetricRow {
            filename: name.clone(),
            metrics,
        });
    }
    MetricReport::from_rows(rows)
}

/// Comparison table: one row per algorithm with corpus means.
pub fn ablation_csv(rows: &[(String, MetricReport)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["algorithm", "mse", "ssim", "niqe_ratio"]).expect("in-memory write");
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            format!("{:.4}", r.mean.mse),
            format!("{:.4}", r.mean.ssim),
            format!("{:.4}", r.mean.niqe_ratio),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Trains and evaluates each variant in turn, writing `<variant>/model.ckpt`,
/// `<variant>/log.csv` and `ablation.csv` into `out_dir`.
pub fn run_ablation<T: Scalar>(
    variants: &[VariantId],
    cfg: &TrainConfig,
    data: &UnpairedDataset<T>,
    decomp: Option<&DecompNet<T>>,
    eval_pairs: &PairedDataset<T>,
    niqe: &NiqeModel,
    out_dir: &Path,
) -> Result<Vec<(String, MetricReport)>> {
    let hash = cfg.hash();
    let mut rows = Vec::with_capacity(variants.len());
    for &id in variants {
        let spec = VariantSpec::new(id);
        let d = if spec.use_decomposition { decomp.cloned() } else { None };
        let (model, log) = train_variant(spec, cfg, data, d)?;
        debug_assert_eq!(hash, cfg.hash());
        let dir = out_dir.join(id.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        model.to_checkpoint(cfg, cfg.epochs as u64).save(dir.join("model.ckpt"))?;
        write_atomic(
            &dir.join("log.csv"),
            crate::training::log_csv(&log, spec.log_columns()).as_bytes(),
        )?;
        log::info!("{id}: trained with config hash {hash:016x}");
        rows.push((id.as_str().to_string(), evaluate_enhancer(&model, eval_pairs, niqe)?));
    }
    write_atomic(&out_dir.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}
