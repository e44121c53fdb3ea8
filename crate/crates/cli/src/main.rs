use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Tensor;
use clap::{Args, Parser, Subcommand, ValueEnum};

use arinv::adversarial::{evaluate_accuracy, Norm};
use arinv::anomaly::run_one_vs_all;
use arinv::architectures::{ArchId, EncoderTap, LayerTag, NetRole, Network};
use arinv::data::{decode_png, load_dataset, load_image_folder, write_png, Dataset, DatasetKind, Split};
use arinv::denoising::{corrupt, denoise, train_denoiser, NoiseSpec};
use arinv::harness::{
    evaluate_reconstruction, load_checkpoint, run_robustness_sweep, run_scale_sweep, save_checkpoint,
    train_decoder_cell, train_encoder_cell, write_csv, AnomalyRow, AurocRow, EpochRow, Expect, ExperimentConfig,
    MetricRow, RowContext,
};
use arinv::inversion::{invert_by_optimization, reconstruct, LossMode, OptimInversion, Regularizer};
use arinv::metrics::{feature_distance, gram_loss, psnr, ssim, MetricReport};
use arinv::style_transfer::{stylize_multilevel, StylePipeline};

#[derive(Parser)]
#[command(
    name = "arinv",
    version,
    about = "Robust encoders, their feature inverters and downstream uses"
)]
struct Cli {
    /// Experiment config (TOML). Keys it leaves out keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Training data source.
    #[arg(long, value_enum)]
    dataset: Option<DataKind>,
    /// Dataset directory; relative paths resolve against $ARINV_DATA.
    #[arg(long, visible_alias = "data")]
    data_path: Option<PathBuf>,
    /// Keep a seeded random subset of at most this many training samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Cifar10,
    Folder,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum InvertMode {
    Decoder,
    Optim,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Psnr,
    Ssim,
    Gram,
    Featdist,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier with PGD adversarial training (radius 0 = standard training).
    TrainEncoder {
        #[arg(long)]
        arch: Option<ArchId>,
        /// Attack radius; defaults to the largest radius of the config grid.
        #[arg(long)]
        eps: Option<f64>,
        /// Attack norm, `2` or `inf`.
        #[arg(long)]
        norm: Option<Norm>,
        /// PGD iterations.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a decoder that inverts an encoder's features at one layer.
    TrainDecoder {
        #[arg(long, visible_alias = "encoder-ckpt")]
        encoder: PathBuf,
        #[arg(long, default_value = "conv5")]
        level: LayerTag,
        /// `pix`, `pixfeat` or `pixfeatgan`.
        #[arg(long, visible_alias = "loss")]
        mode: Option<LossMode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the wavelet-skip denoising autoencoder around an encoder.
    TrainDenoiser {
        #[arg(long, visible_alias = "encoder-ckpt")]
        encoder: PathBuf,
        /// Noise standard deviation in [0,1] pixel units.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Fine-tune the encoder half too.
        #[arg(long)]
        train_encoder: bool,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Reconstruct images from their features, with a decoder or by pixel-space optimization.
    Invert {
        #[arg(long, visible_alias = "encoder-ckpt")]
        encoder: PathBuf,
        /// Decoder checkpoint; without it the image is recovered by optimization.
        #[arg(long)]
        decoder: Option<PathBuf>,
        /// Defaults to `decoder` when `--decoder` is given.
        #[arg(long, value_enum)]
        mode: Option<InvertMode>,
        /// A PNG file or a directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for reconstructed PNGs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Total-variation weight for optimization (0 disables).
        #[arg(long, default_value_t = 1e-4)]
        tv: f64,
    },
    /// Multi-level whitening-coloring style transfer.
    Stylize {
        #[arg(long)]
        encoder: PathBuf,
        /// Style decoder checkpoints, deepest level first.
        #[arg(long, value_delimiter = ',', required = true)]
        decoders: Vec<PathBuf>,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise images with a trained denoiser.
    Denoise {
        #[arg(long, visible_alias = "ckpt")]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corrupt the inputs with this noise level first and report PSNR before and after.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// One-vs-all anomaly detection by latent-space reconstruction.
    DetectAnomaly {
        #[arg(long, visible_alias = "ckpt")]
        encoder: PathBuf,
        /// Positive (normal) classes, one run each.
        #[arg(long, visible_alias = "positive-class", value_delimiter = ',', required = true)]
        classes: Vec<u32>,
        #[arg(long)]
        decoder_epochs: Option<usize>,
        #[arg(long)]
        i_max: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for scores.csv and auroc.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted images with references.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Encoder checkpoint; required for gram and featdist.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct upscaled held-out images at several factors.
    SweepScale {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        /// Encoder used for the feature distance; defaults to `--encoder`.
        #[arg(long)]
        judge: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        #[arg(long, default_value = "model")]
        label: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate an encoder/decoder pair for every radius of the attack grid.
    SweepRobustness {
        #[command(flatten)]
        data: DataArgs,
        /// Output directory; defaults to the config's.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip writing per-cell checkpoints.
        #[arg(long)]
        no_checkpoints: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

impl DataArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(kind) = self.dataset {
            let kind = match kind {
                DataKind::Cifar10 => DatasetKind::Cifar10Binary,
                DataKind::Folder => DatasetKind::ImageFolder,
                DataKind::Synthetic => DatasetKind::SyntheticBlobs,
            };
            cfg.train_data.kind = kind;
            cfg.test_data.kind = kind;
        }
        if let Some(p) = &self.data_path {
            cfg.train_data.path = p.clone();
            cfg.test_data.path = p.clone();
        }
        if self.limit.is_some() {
            cfg.train_data.limit = self.limit;
        }
        if self.test_limit.is_some() {
            cfg.test_data.limit = self.test_limit;
        }
    }
}

fn seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn train_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(&cfg.train_data, seed(cfg)).context("loading training data")
}

fn test_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut src = cfg.test_data.clone();
    src.split = Split::Test;
    load_dataset(&src, seed(cfg)).context("loading test data")
}

fn load(path: &Path, role: Option<NetRole>) -> Result<Network> {
    load_checkpoint(path, Expect { arch: None, role }).with_context(|| format!("loading {}", path.display()))
}

/// A single PNG or every PNG of a directory, with file names as ids.
fn read_images(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        return Ok(load_image_folder(path, None)?);
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let img = decode_png(&bytes)?.unsqueeze(0)?;
    let mut ds = Dataset::new(img, vec![0], 1)?;
    ds.ids = vec![path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()];
    Ok(ds)
}

fn write_batch(dir: &Path, ids: &[String], images: &Tensor) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, id) in ids.iter().enumerate() {
        let name = if id.ends_with(".png") {
            id.clone()
        } else {
            format!("{id}.png")
        };
        write_png(&dir.join(name), &images.get(i)?)?;
    }
    Ok(())
}

fn epoch_log(path: Option<&PathBuf>, rows: &[EpochRow]) -> Result<()> {
    if let Some(p) = path {
        write_csv(p, rows)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let hash = cfg.hash();
    match cli.command {
        Command::TrainEncoder {
            arch,
            eps,
            norm,
            steps,
            step_size,
            epochs,
            lr,
            data,
            out,
            log,
        } => {
            data.apply(&mut cfg);
            if let Some(a) = arch {
                cfg.arch = a;
            }
            if let Some(n) = norm {
                cfg.attack.norm = n;
            }
            if let Some(n) = steps {
                cfg.attack.steps = n;
            }
            if let Some(a) = step_size {
                cfg.attack.step_size = a;
            }
            if let Some(e) = epochs {
                cfg.encoder.epochs = e;
            }
            if let Some(l) = lr {
                cfg.encoder.lr = l;
            }
            let hash = cfg.hash();
            let eps = eps.unwrap_or_else(|| cfg.attack.eps.iter().cloned().fold(0.0, f64::max));
            let train = train_set(&cfg)?;
            let mut rows = Vec::new();
            let enc = train_encoder_cell(&cfg, &train, eps, seed(&cfg), |s| {
                eprintln!(
                    "epoch {} lr {:.4} loss {:.4} acc {:.3} clean {:.3}",
                    s.epoch, s.lr, s.adv_loss, s.adv_acc, s.clean_acc
                );
                rows.push(EpochRow {
                    config_hash: hash.clone(),
                    stage: "encoder".into(),
                    seed: seed(&cfg),
                    eps,
                    epoch: s.epoch,
                    lr: s.lr,
                    loss: s.adv_loss,
                    accuracy: Some(s.adv_acc),
                });
            })?;
            save_checkpoint(&enc, &out)?;
            epoch_log(log.as_ref(), &rows)?;
            let acc = evaluate_accuracy(&enc, &test_set(&cfg)?, cfg.eval_batch_size)?;
            eprintln!("held-out accuracy {acc:.4}");
        }
        Command::TrainDecoder {
            encoder,
            level,
            mode,
            epochs,
            data,
            out,
            log,
        } => {
            data.apply(&mut cfg);
            if let Some(m) = mode {
                cfg.decoder.mode = m;
            }
            if let Some(e) = epochs {
                cfg.decoder.epochs = e;
            }
            let hash = cfg.hash();
            let enc = load(&encoder, Some(NetRole::Encoder))?;
            let train = train_set(&cfg)?;
            let mut rows = Vec::new();
            let dec = train_decoder_cell(&cfg, &enc, level, &train, seed(&cfg), |e| {
                eprintln!(
                    "epoch {} pix {:.4} feat {:.4} adv {:.4} disc {:.4}",
                    e.epoch, e.pix, e.feat, e.adv, e.disc
                );
                rows.push(EpochRow {
                    config_hash: hash.clone(),
                    stage: format!("decoder-{level}"),
                    seed: seed(&cfg),
                    eps: 0.0,
                    epoch: e.epoch,
                    lr: e.gen_lr,
                    loss: e.total,
                    accuracy: None,
                });
                Ok(())
            })?;
            save_checkpoint(&dec, &out)?;
            epoch_log(log.as_ref(), &rows)?;
            if level == LayerTag::Conv5 {
                let test = test_set(&cfg)?;
                let m = evaluate_reconstruction(&enc, &dec, &test.images, &enc, cfg.eval_batch_size)?;
                eprintln!("held-out psnr {:.3} dB, ssim {:.4}", m.psnr.mean, m.ssim.mean);
            }
        }
        Command::TrainDenoiser {
            encoder,
            sigma,
            epochs,
            train_encoder,
            data,
            out,
            log,
        } => {
            data.apply(&mut cfg);
            let mut d = cfg.denoiser;
            d.train.seed = seed(&cfg);
            d.noise.seed = seed(&cfg);
            d.freeze_encoder = !train_encoder;
            if let Some(s) = sigma {
                d.noise.sigma = s;
            }
            if let Some(e) = epochs {
                d.train.epochs = e;
            }
            cfg.denoiser = d;
            let hash = cfg.hash();
            let enc = load(&encoder, Some(NetRole::Encoder))?;
            let train = train_set(&cfg)?;
            let mut rows = Vec::new();
            let (model, _) = train_denoiser(&enc, &train, &d, |e| {
                eprintln!("epoch {} pix {:.4} feat {:.4}", e.epoch, e.pix, e.feat);
                rows.push(EpochRow {
                    config_hash: hash.clone(),
                    stage: "denoiser".into(),
                    seed: seed(&cfg),
                    eps: 0.0,
                    epoch: e.epoch,
                    lr: e.gen_lr,
                    loss: e.total,
                    accuracy: None,
                });
                Ok(())
            })?;
            save_checkpoint(&model, &out)?;
            epoch_log(log.as_ref(), &rows)?;
        }
        Command::Invert {
            encoder,
            decoder,
            mode,
            input,
            out,
            steps,
            lr,
            tv,
        } => {
            let enc = load(&encoder, Some(NetRole::Encoder))?;
            let ds = read_images(&input)?;
            let x = ds.images.to_dtype(enc.dtype())?;
            let mode = mode.unwrap_or(if decoder.is_some() {
                InvertMode::Decoder
            } else {
                InvertMode::Optim
            });
            let y = match (mode, decoder) {
                (InvertMode::Decoder, Some(d)) => reconstruct(&enc, &load(&d, None)?, &x)?,
                (InvertMode::Decoder, None) => bail!("--mode decoder needs --decoder"),
                (InvertMode::Optim, _) => {
                    let tap = EncoderTap {
                        net: &enc,
                        tag: LayerTag::Conv5,
                    };
                    let f0 = arinv::architectures::FeatureExtractor::extract(&tap, &x)?;
                    let init = (x.zeros_like()? + 0.5)?;
                    let opt = OptimInversion {
                        regularizer: if tv > 0.0 {
                            Regularizer::TotalVariation
                        } else {
                            Regularizer::None
                        },
                        lambda: tv,
                        steps,
                        lr,
                    };
                    let (y, trace) = invert_by_optimization(&tap, &f0, &init, &opt)?;
                    eprintln!(
                        "objective {:.4e} -> {:.4e}",
                        trace.first().copied().unwrap_or(f64::NAN),
                        trace.last().copied().unwrap_or(f64::NAN)
                    );
                    y
                }
            };
            let p = MetricReport::new("psnr", psnr(&x, &y, 1.0)?);
            eprintln!("psnr against input: {:.3} dB", p.mean);
            write_batch(&out, &ds.ids, &y)?;
        }
        Command::Stylize {
            encoder,
            decoders,
            content,
            style,
            out,
        } => {
            let enc = load(&encoder, Some(NetRole::Encoder))?;
            let decs = decoders.iter().map(|p| load(p, None)).collect::<Result<Vec<_>>>()?;
            let pipeline = StylePipeline::new(enc, decs)?;
            let c = read_images(&content)?.images;
            let s = read_images(&style)?.images;
            if s.dim(0)? != 1 {
                bail!("--style must be a single image");
            }
            let y = stylize_multilevel(&c, &s, &pipeline)?;
            if c.dim(0)? == 1 && out.extension().is_some_and(|e| e == "png") {
                if let Some(parent) = out.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                write_png(&out, &y.get(0)?)?;
            } else {
                write_batch(&out, &read_images(&content)?.ids, &y)?;
            }
        }
        Command::Denoise {
            model,
            input,
            out,
            sigma,
            report,
        } => {
            let net = load(&model, Some(NetRole::Denoiser))?;
            let ds = read_images(&input)?;
            let clean = ds.images.to_dtype(net.dtype())?;
            let b = match sigma {
                Some(s) => corrupt(
                    &clean,
                    &NoiseSpec {
                        sigma: s,
                        seed: seed(&cfg),
                    },
                )?,
                None => clean.clone(),
            };
            let y = denoise(&net, &b)?;
            write_batch(&out, &ds.ids, &y)?;
            if sigma.is_some() {
                let ctx = RowContext {
                    config_hash: hash.clone(),
                    experiment: "denoise".into(),
                    model: model.display().to_string(),
                    seed: seed(&cfg),
                    eps: 0.0,
                };
                let noisy = MetricReport::new("psnr_noisy", psnr(&clean, &b, 1.0)?);
                let denoised = MetricReport::new("psnr_denoised", psnr(&clean, &y, 1.0)?);
                eprintln!("psnr noisy {:.3} dB, denoised {:.3} dB", noisy.mean, denoised.mean);
                if let Some(r) = report {
                    write_csv(
                        &r,
                        &[
                            MetricRow::from_report(&ctx, 1, &noisy),
                            MetricRow::from_report(&ctx, 1, &denoised),
                        ],
                    )?;
                }
            }
        }
        Command::DetectAnomaly {
            encoder,
            classes,
            decoder_epochs,
            i_max,
            data,
            out,
        } => {
            data.apply(&mut cfg);
            if let Some(e) = decoder_epochs {
                cfg.decoder.epochs = e;
            }
            if let Some(i) = i_max {
                cfg.anomaly.i_max = i;
            }
            cfg.anomaly.seed = seed(&cfg);
            let hash = cfg.hash();
            let enc = load(&encoder, Some(NetRole::Encoder))?;
            let train = train_set(&cfg)?;
            let test = test_set(&cfg)?;
            let tap = EncoderTap {
                net: &enc,
                tag: LayerTag::Conv5,
            };
            let s = seed(&cfg);
            let result = run_one_vs_all(
                &train,
                &test,
                &classes,
                &tap,
                |class, ds| {
                    eprintln!("class {class}: training decoder on {} samples", ds.len());
                    Ok(train_decoder_cell(&cfg, &enc, LayerTag::Conv5, ds, s, |_| Ok(()))?)
                },
                &cfg.anomaly,
            )?;
            let mut scores = Vec::new();
            let mut aurocs = Vec::new();
            for c in &result.classes {
                eprintln!(
                    "class {}: auroc {:.4} (pixel only {:.4})",
                    c.class, c.auroc, c.pixel_auroc
                );
                aurocs.push(AurocRow {
                    config_hash: hash.clone(),
                    positive_class: c.class.to_string(),
                    auroc: c.auroc,
                    pixel_auroc: c.pixel_auroc,
                });
                scores.extend(c.samples.iter().map(|smp| AnomalyRow {
                    config_hash: hash.clone(),
                    positive_class: c.class,
                    id: smp.id.clone(),
                    score: smp.score,
                    pixel_score: smp.pixel_score,
                    anomalous: smp.positive.map(|p| !p),
                }));
            }
            let pixel_mean = result.classes.iter().map(|c| c.pixel_auroc).sum::<f64>() / result.classes.len() as f64;
            aurocs.push(AurocRow {
                config_hash: hash.clone(),
                positive_class: "mean".into(),
                auroc: result.mean_auroc,
                pixel_auroc: pixel_mean,
            });
            eprintln!("mean auroc {:.4}", result.mean_auroc);
            write_csv(&out.join("scores.csv"), &scores)?;
            write_csv(&out.join("auroc.csv"), &aurocs)?;
        }
        Command::Eval {
            metric,
            reference,
            pred,
            encoder,
            out,
        } => {
            let r = load_image_folder(&reference, None)?;
            let p = load_image_folder(&pred, None)?;
            if r.ids != p.ids {
                bail!("--ref and --pred must contain the same file names");
            }
            let enc = encoder.map(|e| load(&e, Some(NetRole::Encoder))).transpose()?;
            let need_enc = || enc.as_ref().context("this metric needs --encoder");
            let values = match metric {
                Metric::Psnr => psnr(&r.images, &p.images, 1.0)?,
                Metric::Ssim => ssim(&r.images, &p.images)?,
                Metric::Featdist => {
                    let e = need_enc()?;
                    let tags: Vec<LayerTag> = arinv::harness::FEATDIST_TAGS
                        .into_iter()
                        .filter(|t| e.tags().contains(t))
                        .collect();
                    feature_distance(&r.images, &p.images, e, &tags)?
                }
                Metric::Gram => {
                    let e = need_enc()?;
                    let tags = e.tags();
                    let mut v = Vec::with_capacity(r.len());
                    for i in 0..r.len() {
                        let fa: Vec<Tensor> = e
                            .forward_taps(&r.images.narrow(0, i, 1)?, &tags, arinv::architectures::Mode::Eval)?
                            .into_iter()
                            .map(|f| f.tensor)
                            .collect();
                        let fb: Vec<Tensor> = e
                            .forward_taps(&p.images.narrow(0, i, 1)?, &tags, arinv::architectures::Mode::Eval)?
                            .into_iter()
                            .map(|f| f.tensor)
                            .collect();
                        v.push(gram_loss(&fa, &fb)?);
                    }
                    v
                }
            };
            let name = match metric {
                Metric::Psnr => "psnr",
                Metric::Ssim => "ssim",
                Metric::Gram => "gram",
                Metric::Featdist => "featdist",
            };
            let report = MetricReport::new(name, values);
            eprintln!(
                "{name}: mean {:.5} std {:.5} over {}",
                report.mean,
                report.std,
                report.values.len()
            );
            let ctx = RowContext {
                config_hash: hash.clone(),
                experiment: "eval".into(),
                model: pred.display().to_string(),
                seed: seed(&cfg),
                eps: 0.0,
            };
            write_csv(&out, &[MetricRow::from_report(&ctx, 1, &report)])?;
        }
        Command::SweepScale {
            encoder,
            decoder,
            judge,
            scales,
            label,
            data,
            out,
        } => {
            data.apply(&mut cfg);
            let hash = cfg.hash();
            let enc = load(&encoder, Some(NetRole::Encoder))?;
            let dec = load(&decoder, None)?;
            let judge = match judge {
                Some(j) => load(&j, Some(NetRole::Encoder))?,
                None => enc.clone(),
            };
            let test = test_set(&cfg)?;
            let scales = scales.unwrap_or_else(|| cfg.scales.clone());
            let ctx = RowContext {
                config_hash: hash.clone(),
                experiment: "scale".into(),
                model: label,
                seed: seed(&cfg),
                eps: 0.0,
            };
            let rows = run_scale_sweep(&enc, &dec, &test, &scales, &judge, cfg.eval_batch_size, &ctx)?;
            for r in rows.iter().filter(|r| r.metric == "psnr") {
                eprintln!("L={} psnr {:.3}", r.scale, r.mean);
            }
            write_csv(&out, &rows)?;
        }
        Command::SweepRobustness {
            data,
            out,
            no_checkpoints,
        } => {
            data.apply(&mut cfg);
            let hash = cfg.hash();
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let sweep = run_robustness_sweep(&cfg, |m| eprintln!("{m}"))?;
            let test = test_set(&cfg)?;
            let mut scale_rows = Vec::new();
            for cell in &sweep.cells {
                let judge = &sweep
                    .judges
                    .iter()
                    .find(|(s, _)| *s == cell.seed)
                    .context("missing reference encoder")?
                    .1;
                let ctx = RowContext {
                    config_hash: hash.clone(),
                    experiment: cfg.id.clone(),
                    model: if cell.eps == 0.0 {
                        "standard".into()
                    } else {
                        "ar".into()
                    },
                    seed: cell.seed,
                    eps: cell.eps,
                };
                scale_rows.extend(run_scale_sweep(
                    &cell.encoder,
                    &cell.decoder,
                    &test,
                    &cfg.scales,
                    judge,
                    cfg.eval_batch_size,
                    &ctx,
                )?);
                if !no_checkpoints {
                    let dir = out
                        .join(format!("seed-{}", cell.seed))
                        .join(format!("eps-{:.6}", cell.eps));
                    save_checkpoint(&cell.encoder, &dir.join("encoder"))?;
                    save_checkpoint(&cell.decoder, &dir.join("decoder"))?;
                }
            }
            write_csv(&out.join("robustness.csv"), &sweep.rows)?;
            write_csv(&out.join("epochs.csv"), &sweep.epochs)?;
            write_csv(&out.join("scale.csv"), &scale_rows)?;
        }
    }
    Ok(())
}
