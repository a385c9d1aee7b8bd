mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use retinex_gan::ablation::{ablation_csv, dump_intermediates, run_ablation, train_variant};
use retinex_gan::checkpoint::write_atomic;
use retinex_gan::dataset::{load_dir, png_names, SyntheticCorpus};
use retinex_gan::decomposition::{evaluate_decomposition, train_decomposition, DecompLogRow};
use retinex_gan::imaging::{load_image, save_image};
use retinex_gan::metrics::{evaluate, fit_niqe_model, write_report};
use retinex_gan::training::{log_csv, train_gan_to_dir};
use retinex_gan::{
    Checkpoint, DecompNet, Enhancer, Error, ImageTensor, NiqeModel, PairedDataset, UnpairedDataset, VariantId,
    VariantSpec,
};
use serde_json::Value;

use crate::config::{parse_assignment, CliConfig};

#[derive(Parser, Debug)]
#[command(name = "retinex-gan", version, about = "Retinex-aware cycle-GAN low-light enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that resolves a configuration.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON file of flat dotted keys, e.g. {"train.epochs": 50}
    #[arg(long)]
    config: Option<PathBuf>,
    /// `paper` or `desk`
    #[arg(long)]
    profile: Option<String>,
    /// Extra `key=value` overrides (value parsed as JSON when possible)
    #[arg(long = "set", value_parser = parse_assignment)]
    set: Vec<(String, Value)>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic corpus (paired and unpaired folders)
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Train the decomposition network on aligned pairs (<dir>/low, <dir>/high)
    TrainDecomp {
        #[arg(long)]
        paired_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the enhancer on unpaired low-light and well-lit folders
    TrainGan {
        #[arg(long)]
        low_dir: PathBuf,
        #[arg(long)]
        high_dir: PathBuf,
        /// Decomposition checkpoint (or a GAN checkpoint to resume from)
        #[arg(long)]
        decomp_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Enhance one image or every PNG of a folder
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every pipeline stage into this folder
        #[arg(long)]
        dump_intermediates: Option<PathBuf>,
    },
    /// Write reflectance and illumination maps of one image or a folder
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predictions with ground truth (matching file names)
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Output folder for metrics.csv and metrics.json
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        niqe_model: Option<PathBuf>,
    },
    /// Train and evaluate several variants with one shared configuration
    Ablate {
        #[arg(long)]
        low_dir: PathBuf,
        #[arg(long)]
        high_dir: PathBuf,
        #[arg(long)]
        decomp_ckpt: PathBuf,
        /// Paired evaluation folder (<dir>/low, <dir>/high)
        #[arg(long)]
        eval_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "plain_gan,retinex_gan,retinex_cyclegan")]
        variants: Vec<String>,
        /// Externally produced results, `name=folder` with files named like the evaluation pairs
        #[arg(long = "external", value_parser = parse_external)]
        external: Vec<(String, PathBuf)>,
        #[arg(long)]
        niqe_model: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit a NIQE pristine model on a folder of natural images
    FitNiqe {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        patch_size: usize,
    },
}

fn parse_external(s: &str) -> Result<(String, PathBuf), String> {
    let (name, dir) = s.split_once('=').ok_or_else(|| format!("expected name=folder, got `{s}`"))?;
    Ok((name.to_string(), PathBuf::from(dir)))
}

fn resolve(args: &ConfigArgs, mut overrides: Vec<(String, Value)>) -> Result<CliConfig> {
    if let Some(p) = &args.profile {
        overrides.insert(0, ("profile".into(), Value::from(p.clone())));
    }
    overrides.extend(args.set.iter().cloned());
    Ok(CliConfig::resolve(args.config.as_deref(), &overrides)?)
}

fn opt<T: Into<Value>>(key: &str, v: Option<T>) -> Option<(String, Value)> {
    v.map(|v| (key.to_string(), v.into()))
}

fn path_value(p: &Path) -> Value {
    Value::from(p.to_string_lossy().into_owned())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_config(dir: &Path, cfg: &CliConfig) -> Result<()> {
    write_atomic(&dir.join("config.json"), cfg.to_flat_json().as_bytes())?;
    Ok(())
}

fn load_niqe(path: Option<&Path>) -> Result<NiqeModel> {
    Ok(match path {
        Some(p) => NiqeModel::load(p)?,
        None => NiqeModel::builtin().clone(),
    })
}

fn load_decomp(path: &Path) -> Result<DecompNet<f32>> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    Ok(DecompNet::from_checkpoint(&ckpt)?)
}

/// `(name, input path)` for a file or every PNG in a folder.
fn inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        Ok(png_names(input)?
            .into_iter()
            .map(|n| (n.clone(), input.join(n)))
            .collect())
    } else if input.exists() {
        let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(vec![(name, input.to_path_buf())])
    } else {
        Err(Error::Config(format!("input {} does not exist", input.display())).into())
    }
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

fn make_synthetic(out: &Path, n: usize, seed: u64, size: usize) -> Result<()> {
    let corpus = SyntheticCorpus::<f32>::generate(n, size, seed)?;
    corpus.write(out)?;
    println!("wrote {n} pairs and {n}+{n} unpaired images to {}", out.display());
    Ok(())
}

fn train_decomp(paired_dir: &Path, out: &Path, cfg: CliConfig) -> Result<()> {
    let data = PairedDataset::<f32>::load(paired_dir)?;
    let mut net = DecompNet::<f32>::new(cfg.decomp.clone(), cfg.decomp_train.seed)?;
    create_dir(out)?;
    write_config(out, &cfg)?;
    let rows = train_decomposition(&mut net, &cfg.decomp_train, &data)?;
    let mut csv = String::from(DecompLogRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    write_atomic(&out.join("decomp_log.csv"), csv.as_bytes())?;
    let config = serde_json::to_value(&cfg.decomp_train)?;
    net.to_checkpoint(rows.len() as u64, serde_json::json!({ "decomp_train": config }))
        .save(out.join("decomp.ckpt"))?;
    let eval = evaluate_decomposition(&net, &data, &cfg.decomp_train.weights)?;
    println!("decomposition trained for {} iterations; full-image loss: {eval}", rows.len());
    Ok(())
}

fn load_unpaired(low: &Path, high: &Path, size: usize) -> Result<UnpairedDataset<f32>> {
    Ok(UnpairedDataset::load(low, high, size)?)
}

fn train_gan_cmd(low: &Path, high: &Path, decomp_ckpt: &Path, out: &Path, cfg: CliConfig) -> Result<()> {
    if !decomp_ckpt.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", decomp_ckpt.display())).into());
    }
    let data = load_unpaired(low, high, cfg.train.unet.input_size)?;
    create_dir(out)?;
    write_config(out, &cfg)?;
    let spec = VariantSpec::new(cfg.variant);
    if spec.use_cycle {
        let (_, log) = train_gan_to_dir(&cfg.train, &data, decomp_ckpt, out)?;
        if let Some(last) = log.last() {
            println!("trained {} steps; last: {}", log.len(), last.report);
        }
        return Ok(());
    }
    let decomp = if spec.use_decomposition { Some(load_decomp(decomp_ckpt)?) } else { None };
    let (model, log) = train_variant(spec, &cfg.train, &data, decomp)?;
    model
        .to_checkpoint(&cfg.train, cfg.train.epochs as u64)
        .save(out.join("gan.ckpt"))?;
    write_atomic(&out.join("gan_log.csv"), log_csv(&log, spec.log_columns()).as_bytes())?;
    println!("trained {} for {} steps", spec.id, log.len());
    Ok(())
}

fn enhance(input: &Path, ckpt: &Path, out: &Path, dump: Option<&Path>) -> Result<()> {
    let (model, _) = Enhancer::<f32>::load(ckpt)?;
    let items = inputs(input)?;
    let many = input.is_dir();
    if many {
        create_dir(out)?;
    } else if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    for (name, path) in &items {
        let img: ImageTensor<f32> = load_image(path)?;
        let enhanced = model.enhance(&img)?;
        let target = if many { out.join(name) } else { out.to_path_buf() };
        save_image(&enhanced, &target)?;
        if let Some(dir) = dump {
            let d = if many { dir.join(stem(name)) } else { dir.to_path_buf() };
            dump_intermediates(&model, &img, &d)?;
        }
        info!("enhanced {name}");
    }
    println!("enhanced {} image(s) with {}", items.len(), model.variant());
    Ok(())
}

fn decompose(input: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let net = load_decomp(ckpt)?;
    create_dir(out)?;
    let items = inputs(input)?;
    for (name, path) in &items {
        let img: ImageTensor<f32> = load_image(path)?;
        let d = net.decompose(&img)?;
        save_image(&d.reflectance, out.join(format!("{}_R.png", stem(name))))?;
        save_image(&d.illumination, out.join(format!("{}_I.png", stem(name))))?;
    }
    println!("decomposed {} image(s)", items.len());
    Ok(())
}

fn evaluate_cmd(pred: &Path, gt: &Path, out: &Path, niqe: Option<&Path>) -> Result<()> {
    let model = load_niqe(niqe)?;
    let report = evaluate(pred, gt, &model)?;
    create_dir(out)?;
    write_report(&report, &out.join("metrics.csv"), &out.join("metrics.json"))?;
    let m = report.mean;
    println!(
        "{} image(s): mse {:.4} ssim {:.4} niqe_ratio {:.4}",
        report.rows.len(),
        m.mse,
        m.ssim,
        m.niqe_ratio
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    low: &Path,
    high: &Path,
    decomp_ckpt: &Path,
    eval_dir: &Path,
    out: &Path,
    variants: &[String],
    external: &[(String, PathBuf)],
    niqe: Option<&Path>,
    cfg: CliConfig,
) -> Result<()> {
    let ids: Vec<VariantId> = variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?;
    if ids.is_empty() && external.is_empty() {
        bail!(Error::Config("nothing to compare".into()));
    }
    let model = load_niqe(niqe)?;
    let data = load_unpaired(low, high, cfg.train.unet.input_size)?;
    let needs_decomp = ids.iter().any(|&id| VariantSpec::new(id).use_decomposition);
    let decomp = if needs_decomp { Some(load_decomp(decomp_ckpt)?) } else { None };
    let pairs = PairedDataset::<f32>::load(eval_dir)?;
    create_dir(out)?;
    write_config(out, &cfg)?;
    let mut rows = run_ablation(&ids, &cfg.train, &data, decomp.as_ref(), &pairs, &model, out)?;
    for (name, dir) in external {
        rows.push((name.clone(), evaluate(dir, &eval_dir.join("high"), &model)?));
    }
    let table = ablation_csv(&rows);
    write_atomic(&out.join("ablation.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn fit_niqe(images: &Path, out: &Path, patch: usize) -> Result<()> {
    let imgs: Vec<ImageTensor<f64>> = load_dir(images, None)?.into_iter().map(|(_, i)| i).collect();
    if imgs.is_empty() {
        bail!(Error::Config(format!("no PNG images in {}", images.display())));
    }
    let model = fit_niqe_model(&imgs, patch)?;
    write_atomic(out, model.to_json().as_bytes())?;
    println!("fitted NIQE model on {} image(s)", imgs.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic { out, n, seed, size } => make_synthetic(&out, n, seed, size),
        Command::TrainDecomp {
            paired_dir,
            out,
            iterations,
            seed,
            lr,
            cfg,
        } => {
            let overrides = [
                Some(("data.paired_dir".to_string(), path_value(&paired_dir))),
                opt("decomp_train.iterations", iterations),
                opt("decomp_train.seed", seed),
                opt("decomp_train.lr", lr),
            ];
            let cfg = resolve(&cfg, overrides.into_iter().flatten().collect())?;
            train_decomp(&paired_dir, &out, cfg)
        }
        Command::TrainGan {
            low_dir,
            high_dir,
            decomp_ckpt,
            out,
            variant,
            epochs,
            batch_size,
            seed,
            cfg,
        } => {
            let overrides = [
                Some(("data.low_dir".to_string(), path_value(&low_dir))),
                Some(("data.high_dir".to_string(), path_value(&high_dir))),
                Some(("data.decomp_ckpt".to_string(), path_value(&decomp_ckpt))),
                opt("variant", variant),
                opt("train.epochs", epochs),
                opt("train.batch_size", batch_size),
                opt("train.seed", seed),
            ];
            let cfg = resolve(&cfg, overrides.into_iter().flatten().collect())?;
            train_gan_cmd(&low_dir, &high_dir, &decomp_ckpt, &out, cfg)
        }
        Command::Enhance {
            input,
            ckpt,
            out,
            dump_intermediates,
        } => enhance(&input, &ckpt, &out, dump_intermediates.as_deref()),
        Command::Decompose { input, ckpt, out } => decompose(&input, &ckpt, &out),
        Command::Evaluate {
            pred_dir,
            gt_dir,
            out,
            niqe_model,
        } => evaluate_cmd(&pred_dir, &gt_dir, &out, niqe_model.as_deref()),
        Command::Ablate {
            low_dir,
            high_dir,
            decomp_ckpt,
            eval_dir,
            out,
            variants,
            external,
            niqe_model,
            epochs,
            seed,
            cfg,
        } => {
            let overrides = [
                Some(("data.low_dir".to_string(), path_value(&low_dir))),
                Some(("data.high_dir".to_string(), path_value(&high_dir))),
                Some(("data.decomp_ckpt".to_string(), path_value(&decomp_ckpt))),
                Some(("data.eval_dir".to_string(), path_value(&eval_dir))),
                opt("train.epochs", epochs),
                opt("train.seed", seed),
            ];
            let cfg = resolve(&cfg, overrides.into_iter().flatten().collect())?;
            ablate(
                &low_dir,
                &high_dir,
                &decomp_ckpt,
                &eval_dir,
                &out,
                &variants,
                &external,
                niqe_model.as_deref(),
                cfg,
            )
        }
        Command::FitNiqe {
            images,
            out,
            patch_size,
        } => fit_niqe(&images, &out, patch_size),
    }
}

/// 2 for bad input or configuration, 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err
        .chain()
        .any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_config));
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
