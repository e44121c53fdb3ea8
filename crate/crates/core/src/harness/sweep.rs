//! Experiment drivers: reconstruction evaluation, the upscaling sweep and the robustness grid.

use candle_core::Tensor;

use crate::adversarial::{adversarial_train, evaluate_accuracy, evaluate_robust_accuracy, EpochStats, TrainSchedule};
use crate::architectures::{
    build_discriminator, build_encoder, build_mirror_decoder, build_style_decoder, BuildOptions, LayerTag, Network,
};
use crate::data::{load_dataset, upscale, Dataset};
use crate::error::{Result, ResultExt};
use crate::inversion::{reconstruct, train_inverter, Inverter, InverterEpoch, LossMode};
use crate::metrics::{feature_distance, psnr, ssim, MetricReport};

use super::config::ExperimentConfig;
use super::report::{EpochRow, MetricRow, RobustnessRow, RowContext};

/// Layers compared by the feature distance.
pub const FEATDIST_TAGS: [LayerTag; 3] = [LayerTag::Conv1, LayerTag::Conv2, LayerTag::Conv5];

const DECODER_SEED: u64 = 0xdec0;
const DISC_SEED: u64 = 0xd15c;

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionMetrics {
    pub psnr: MetricReport,
    pub ssim: MetricReport,
    pub featdist: MetricReport,
}

impl ReconstructionMetrics {
    pub fn reports(&self) -> [&MetricReport; 3] {
        [&self.psnr, &self.ssim, &self.featdist]
    }
}

/// PSNR/SSIM/feature distance of `reconstruct(encoder, decoder, x)` against `x` over `images`.
/// `judge` supplies the features for the distance and must be the same across compared models.
pub fn evaluate_reconstruction(
    encoder: &Network,
    decoder: &Network,
    images: &Tensor,
    judge: &Network,
    batch_size: usize,
) -> Result<ReconstructionMetrics> {
    let n = images.dim(0)?;
    let tags: Vec<LayerTag> = FEATDIST_TAGS.into_iter().filter(|t| judge.tags().contains(t)).collect();
    let (mut p, mut s, mut f) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut start = 0;
    while start < n {
        let len = batch_size.max(1).min(n - start);
        let x = images.narrow(0, start, len)?.to_dtype(encoder.dtype())?;
        let y = reconstruct(encoder, decoder, &x)?;
        p.extend(psnr(&x, &y, 1.0)?);
        s.extend(ssim(&x, &y)?);
        f.extend(feature_distance(&x, &y, judge, &tags)?);
        start += len;
    }
    Ok(ReconstructionMetrics {
        psnr: MetricReport::new("psnr", p),
        ssim: MetricReport::new("ssim", s),
        featdist: MetricReport::new("featdist", f),
    })
}

/// Reconstructs bilinearly enlarged copies of `data` for each factor. One row per
/// `(factor, metric)`.
pub fn run_scale_sweep(
    encoder: &Network,
    decoder: &Network,
    data: &Dataset,
    scales: &[usize],
    judge: &Network,
    batch_size: usize,
    ctx: &RowContext,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for &l in scales {
        let mut p = Vec::new();
        let mut s = Vec::new();
        let mut f = Vec::new();
        let n = data.len();
        let mut start = 0;
        while start < n {
            let len = batch_size.max(1).min(n - start);
            let x = upscale(&data.images.narrow(0, start, len)?, l)?;
            let m = evaluate_reconstruction(encoder, decoder, &x, judge, len).context(format!("scale {l}"))?;
            p.extend(m.psnr.values);
            s.extend(m.ssim.values);
            f.extend(m.featdist.values);
            start += len;
        }
        for r in [
            MetricReport::new("psnr", p),
            MetricReport::new("ssim", s),
            MetricReport::new("featdist", f),
        ] {
            rows.push(MetricRow::from_report(ctx, l, &r));
        }
    }
    Ok(rows)
}

/// Least-squares slope of the mean of `metric` against the scale factor.
pub fn trend_slope(rows: &[MetricRow], metric: &str) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| (r.scale as f64, r.mean))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Trains a classifier at one radius; radius zero is standard training.
pub fn train_encoder_cell(
    cfg: &ExperimentConfig,
    train: &Dataset,
    eps: f64,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Network> {
    let opts = BuildOptions {
        num_classes: train.num_classes,
        ..BuildOptions::seeded(seed)
    };
    let enc = build_encoder(cfg.arch, &opts)?;
    let schedule = TrainSchedule { seed, ..cfg.encoder };
    adversarial_train(&enc, train, &cfg.attack.spec(eps), &schedule, &mut on_epoch)
        .context(format!("encoder at eps {eps}, seed {seed}"))?;
    Ok(enc)
}

/// Trains a decoder for `encoder` features at `level` (conv5 gives the mirror decoder), with a
/// discriminator when the loss needs one.
pub fn train_decoder_cell(
    cfg: &ExperimentConfig,
    encoder: &Network,
    level: LayerTag,
    train: &Dataset,
    seed: u64,
    on_epoch: impl FnMut(&InverterEpoch) -> Result<()>,
) -> Result<Network> {
    let arch = encoder.arch;
    let opts = BuildOptions::seeded(seed ^ DECODER_SEED);
    let decoder = match level {
        LayerTag::Conv5 => build_mirror_decoder(arch, &opts)?,
        _ => build_style_decoder(arch, level, &opts)?,
    };
    let disc = if cfg.decoder.mode == LossMode::PixFeatGan {
        Some(build_discriminator(arch, &BuildOptions::seeded(seed ^ DISC_SEED))?)
    } else {
        None
    };
    let models = Inverter {
        encoder,
        decoder: &decoder,
        discriminator: disc.as_ref(),
    };
    let train_cfg = crate::inversion::TrainConfig { seed, ..cfg.decoder };
    train_inverter(&models, train, &cfg.weights, &train_cfg, None, on_epoch)?;
    Ok(decoder)
}

/// A trained encoder/decoder pair from one grid cell.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub seed: u64,
    pub eps: f64,
    pub encoder: Network,
    pub decoder: Network,
    pub metrics: ReconstructionMetrics,
}

#[derive(Debug, Clone)]
pub struct RobustnessSweep {
    pub rows: Vec<RobustnessRow>,
    pub epochs: Vec<EpochRow>,
    pub cells: Vec<SweepCell>,
    /// Standard encoder of each seed, used as the feature-distance judge.
    pub judges: Vec<(u64, Network)>,
}

/// For each seed and radius: trains an encoder, trains its mirror decoder, and measures
/// reconstruction quality and (robust) accuracy on the test split.
pub fn run_robustness_sweep(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<RobustnessSweep> {
    cfg.validate()?;
    let data_seed = cfg.seeds[0];
    let train = load_dataset(&cfg.train_data, data_seed).context("training data")?;
    let test = load_dataset(&cfg.test_data, data_seed).context("test data")?;
    run_robustness_sweep_on(cfg, &train, &test, &mut log)
}

pub fn run_robustness_sweep_on(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    mut log: impl FnMut(&str),
) -> Result<RobustnessSweep> {
    cfg.validate()?;
    let hash = cfg.hash();
    let max_eps = cfg.attack.eps.iter().cloned().fold(0.0, f64::max);
    let robust_set = test.take(cfg.robust_eval_samples.min(test.len()))?;
    let mut out = RobustnessSweep {
        rows: Vec::new(),
        epochs: Vec::new(),
        cells: Vec::new(),
        judges: Vec::new(),
    };
    // Standard cells first: their encoder judges the feature distance of every other cell.
    let mut grid = cfg.attack.eps.clone();
    grid.sort_by(f64::total_cmp);
    for &seed in &cfg.seeds {
        let mut judge: Option<Network> = None;
        if grid[0] != 0.0 {
            log(&format!("seed {seed}: training the standard reference encoder"));
            judge = Some(train_encoder_cell(cfg, train, 0.0, seed, |_| {})?);
        }
        for &eps in &grid {
            log(&format!("seed {seed}, eps {eps:.5}: training encoder"));
            let mut enc_epochs = Vec::new();
            let encoder = train_encoder_cell(cfg, train, eps, seed, |s| enc_epochs.push(*s))?;
            for s in &enc_epochs {
                out.epochs.push(EpochRow {
                    config_hash: hash.clone(),
                    stage: "encoder".into(),
                    seed,
                    eps,
                    epoch: s.epoch,
                    lr: s.lr,
                    loss: s.adv_loss,
                    accuracy: Some(s.adv_acc),
                });
            }
            log(&format!("seed {seed}, eps {eps:.5}: training decoder"));
            let decoder = train_decoder_cell(cfg, &encoder, LayerTag::Conv5, train, seed, |e| {
                out.epochs.push(EpochRow {
                    config_hash: hash.clone(),
                    stage: "decoder".into(),
                    seed,
                    eps,
                    epoch: e.epoch,
                    lr: e.gen_lr,
                    loss: e.total,
                    accuracy: None,
                });
                Ok(())
            })
            .context(format!("decoder at eps {eps}, seed {seed}"))?;
            if eps == 0.0 && judge.is_none() {
                judge = Some(encoder.clone());
            }
            let judge_net = judge.as_ref().expect("standard encoder trained first");
            let metrics = evaluate_reconstruction(&encoder, &decoder, &test.images, judge_net, cfg.eval_batch_size)?;
            let clean_acc = evaluate_accuracy(&encoder, test, cfg.eval_batch_size)?;
            let robust_acc = if eps == 0.0 {
                clean_acc
            } else {
                evaluate_robust_accuracy(&encoder, &robust_set, &cfg.attack.spec(eps), cfg.eval_batch_size, seed)?
            };
            let robust_acc_max_eps = if eps == max_eps {
                robust_acc
            } else {
                evaluate_robust_accuracy(
                    &encoder,
                    &robust_set,
                    &cfg.attack.spec(max_eps),
                    cfg.eval_batch_size,
                    seed,
                )?
            };
            log(&format!(
                "seed {seed}, eps {eps:.5}: psnr {:.3} ssim {:.4} acc {clean_acc:.3} robust {robust_acc:.3}",
                metrics.psnr.mean, metrics.ssim.mean
            ));
            out.rows.push(RobustnessRow {
                config_hash: hash.clone(),
                experiment: cfg.id.clone(),
                seed,
                eps,
                clean_acc,
                robust_acc,
                robust_acc_max_eps,
                psnr: metrics.psnr.mean,
                ssim: metrics.ssim.mean,
                featdist: metrics.featdist.mean,
            });
            out.cells.push(SweepCell {
                seed,
                eps,
                encoder,
                decoder,
                metrics,
            });
        }
        out.judges.push((seed, judge.expect("standard encoder trained")));
    }
    Ok(out)
}

/// Mean of `f` over the rows at radius `eps`.
pub fn mean_at(rows: &[RobustnessRow], eps: f64, f: impl Fn(&RobustnessRow) -> f64) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.eps == eps).map(f).collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, DatasetKind, DatasetSource};
    use crate::harness::report::csv_bytes;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            id: "unit".into(),
            seeds: vec![5],
            train_data: DatasetSource {
                kind: DatasetKind::SyntheticBlobs,
                per_class: 4,
                classes: 2,
                ..DatasetSource::default()
            },
            eval_batch_size: 8,
            robust_eval_samples: 4,
            ..ExperimentConfig::default()
        };
        cfg.test_data = cfg.train_data.clone();
        cfg.attack.eps = vec![0.03, 0.0];
        cfg.attack.steps = 2;
        cfg.encoder.epochs = 1;
        cfg.encoder.batch_size = 4;
        cfg.decoder.epochs = 1;
        cfg.decoder.batch_size = 4;
        cfg
    }

    #[test]
    fn slope_of_a_line() {
        let ctx = RowContext {
            config_hash: String::new(),
            experiment: String::new(),
            model: String::new(),
            seed: 0,
            eps: 0.0,
        };
        let rows: Vec<MetricRow> = [1usize, 2, 3]
            .iter()
            .map(|&l| MetricRow::from_report(&ctx, l, &MetricReport::new("psnr", vec![10.0 + 2.0 * l as f64])))
            .collect();
        assert!((trend_slope(&rows, "psnr").unwrap() - 2.0).abs() < 1e-12);
        assert!(trend_slope(&rows, "ssim").is_none());
    }

    #[test]
    fn tiny_sweep_is_complete_and_repeatable() {
        let cfg = tiny_config();
        let run = || run_robustness_sweep(&cfg, |_| {}).unwrap();
        let a = run();
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[0].eps, 0.0);
        assert_eq!(a.rows[0].robust_acc, a.rows[0].clean_acc);
        assert!(a.rows.iter().all(|r| r.config_hash == cfg.hash() && r.psnr.is_finite()));
        let b = run();
        assert_eq!(csv_bytes(&a.rows).unwrap(), csv_bytes(&b.rows).unwrap());
        assert_eq!(csv_bytes(&a.epochs).unwrap(), csv_bytes(&b.epochs).unwrap());

        let cell = &a.cells[1];
        let test = synthetic_blobs(2, 2, 32, 1).unwrap();
        let ctx = RowContext {
            config_hash: cfg.hash(),
            experiment: "scale".into(),
            model: "ar".into(),
            seed: 5,
            eps: cell.eps,
        };
        let rows = run_scale_sweep(&cell.encoder, &cell.decoder, &test, &[1, 2], &a.judges[0].1, 4, &ctx).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.iter().filter(|r| r.metric == "psnr").count(), 2);
    }
}
