//! One-vs-all anomaly detection by searching the decoder's latent space.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{FeatureExtractor, Mode, Network};
use crate::data::Dataset;
use crate::error::{Error, Result, ResultExt};
use crate::inversion::to_unit_range;
use crate::ops::{randn, to_f64_vec};

/// Maps latent codes to images in `[0,1]` (unclamped, so gradients flow).
pub trait LatentDecoder {
    fn decode_image(&self, f: &Tensor) -> Result<Tensor>;
    /// `(C, H, W)` of the latent code.
    fn latent_geometry(&self) -> [usize; 3];
    fn dtype(&self) -> DType;
}

impl LatentDecoder for Network {
    fn decode_image(&self, f: &Tensor) -> Result<Tensor> {
        to_unit_range(&self.decode(f, Mode::Eval)?)
    }

    fn latent_geometry(&self) -> [usize; 3] {
        self.params.input_geometry
    }

    fn dtype(&self) -> DType {
        Network::dtype(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    /// Weights for the robust encoder; a standard encoder wants `alpha_pix = 2e-3`.
    pub alpha_pix: f64,
    pub alpha_feat: f64,
    pub i_max: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Independent random initializations; the lowest final objective wins.
    pub restarts: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            alpha_pix: 2e-6,
            alpha_feat: 1e-2,
            i_max: 100,
            lr_start: 0.1,
            lr_end: 0.001,
            restarts: 1,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl AnomalyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.i_max == 0 || self.restarts == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "i_max, restarts and batch size must be at least 1".into(),
            ));
        }
        if !(self.lr_end > 0.0) || self.lr_start < self.lr_end {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.alpha_pix < 0.0 || self.alpha_feat < 0.0 {
            return Err(Error::Config("objective weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// Step size at iteration `i`, linear from `lr_start` to `lr_end`.
    pub fn lr_at(&self, i: usize) -> f64 {
        if self.i_max <= 1 {
            return self.lr_start;
        }
        let t = i as f64 / (self.i_max - 1) as f64;
        self.lr_start + t * (self.lr_end - self.lr_start)
    }
}

/// Outcome of the latent search for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFit {
    /// Final objective; `+∞` when the search hit a non-finite value.
    pub score: f64,
    /// `‖G(f̂) − x‖₁` alone.
    pub pixel_score: f64,
    pub non_finite: bool,
    /// Objective before each step and after the last one.
    pub trace: Vec<f64>,
}

/// Per-sample objective `α_pix‖G(f)−x‖₁ + α_feat‖F(G(f))−F(x)‖₂²`, plus the pixel term alone.
fn objective(
    encoder: &dyn FeatureExtractor,
    decoder: &dyn LatentDecoder,
    f: &Tensor,
    x: &Tensor,
    fx: &Tensor,
    cfg: &AnomalyConfig,
) -> Result<(Tensor, Tensor)> {
    let n = x.dim(0)?;
    let g = decoder.decode_image(f)?;
    let pix = (&g - x)?.abs()?.reshape((n, ()))?.sum(1)?;
    let mut total = (&pix * cfg.alpha_pix)?;
    if cfg.alpha_feat > 0.0 {
        let feat = (encoder.extract(&g)? - fx)?.sqr()?.reshape((n, ()))?.sum(1)?;
        total = (total + (feat * cfg.alpha_feat)?)?;
    }
    Ok((total, pix))
}

fn search_once(
    encoder: &dyn FeatureExtractor,
    decoder: &dyn LatentDecoder,
    x: &Tensor,
    fx: &Tensor,
    cfg: &AnomalyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<LatentFit>)> {
    let n = x.dim(0)?;
    let [c, h, w] = decoder.latent_geometry();
    let f = Var::from_tensor(&randn(rng, &[n, c, h, w], 1.0, decoder.dtype(), &Device::Cpu)?)?;
    let mut fits = vec![
        LatentFit {
            score: 0.0,
            pixel_score: 0.0,
            non_finite: false,
            trace: Vec::with_capacity(cfg.i_max + 1),
        };
        n
    ];
    let mut active = vec![1f64; n];
    for i in 0..=cfg.i_max {
        let (total, pix) = objective(encoder, decoder, f.as_tensor(), x, fx, cfg)?;
        let tv = to_f64_vec(&total)?;
        let pv = to_f64_vec(&pix)?;
        for (s, fit) in fits.iter_mut().enumerate() {
            if fit.non_finite {
                continue;
            }
            if !tv[s].is_finite() {
                fit.non_finite = true;
                fit.score = f64::INFINITY;
                fit.pixel_score = f64::INFINITY;
                active[s] = 0.0;
                continue;
            }
            fit.trace.push(tv[s]);
            fit.score = tv[s];
            fit.pixel_score = pv[s];
        }
        if i == cfg.i_max || active.iter().all(|a| *a == 0.0) {
            break;
        }
        let grads = total.sum_all()?.backward()?;
        let Some(g) = grads.get(f.as_tensor()) else { break };
        let g = Tensor::where_cond(&g.ne(g)?, &g.zeros_like()?, g)?;
        let mask = Tensor::from_vec(active.clone(), (n, 1, 1, 1), &Device::Cpu)?.to_dtype(g.dtype())?;
        let step = (g.broadcast_mul(&mask)? * cfg.lr_at(i))?;
        f.set(&(f.as_tensor() - step)?)?;
    }
    Ok((f.as_tensor().detach(), fits))
}

/// Gradient descent on the latent code from unit white Gaussian initializations.
pub fn optimize_latent(
    encoder: &dyn FeatureExtractor,
    decoder: &dyn LatentDecoder,
    x: &Tensor,
    cfg: &AnomalyConfig,
) -> Result<(Tensor, Vec<LatentFit>)> {
    cfg.validate()?;
    let x = x.to_dtype(decoder.dtype())?;
    let fx = encoder.extract(&x)?.detach();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut best_f, mut best) = search_once(encoder, decoder, &x, &fx, cfg, &mut rng)?;
    for _ in 1..cfg.restarts {
        let (f, fits) = search_once(encoder, decoder, &x, &fx, cfg, &mut rng)?;
        let better: Vec<bool> = fits.iter().zip(&best).map(|(a, b)| a.score < b.score).collect();
        if better.iter().any(|b| *b) {
            let n = better.len();
            let m = Tensor::from_vec(
                better.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
                (n, 1, 1, 1),
                &Device::Cpu,
            )?
            .to_dtype(f.dtype())?;
            best_f = (f.broadcast_mul(&m)? + best_f.broadcast_mul(&(1.0 - &m)?)?)?;
            for ((b, fit), keep) in best.iter_mut().zip(fits).zip(better) {
                if keep {
                    *b = fit;
                }
            }
        }
    }
    Ok((best_f, best))
}

/// Area under the ROC curve where `anomalous[i]` marks the class that should score higher.
/// Ties count one half (rank-average convention).
pub fn auroc(scores: &[f64], anomalous: &[bool]) -> Result<f64> {
    if scores.len() != anomalous.len() {
        return Err(Error::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            anomalous.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("auroc got a NaN score".into()));
    }
    let n_pos = anomalous.iter().filter(|a| **a).count();
    let n_neg = anomalous.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("auroc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(anomalous).filter(|(_, a)| **a).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub pixel_score: f64,
    /// `Some(true)` for the positive (normal) class when labels are known.
    pub positive: Option<bool>,
}

/// Scores every sample of `data`; `positive_class` fills in the known label.
pub fn score_dataset(
    encoder: &dyn FeatureExtractor,
    decoder: &dyn LatentDecoder,
    data: &Dataset,
    positive_class: Option<u32>,
    cfg: &AnomalyConfig,
) -> Result<Vec<ScoredSample>> {
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in indices.chunks(cfg.batch_size).enumerate() {
        let batch = data.batch(chunk)?;
        let run = AnomalyConfig {
            seed: cfg.seed.wrapping_add(b as u64),
            ..*cfg
        };
        let (_, fits) = optimize_latent(encoder, decoder, &batch.images, &run)?;
        for ((&i, fit), label) in chunk.iter().zip(fits).zip(&batch.labels) {
            out.push(ScoredSample {
                id: data.ids.get(i).cloned().unwrap_or_else(|| i.to_string()),
                score: fit.score,
                pixel_score: fit.pixel_score,
                positive: positive_class.map(|p| *label == p),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassResult {
    pub class: u32,
    pub auroc: f64,
    /// AUROC of the pixel residual alone.
    pub pixel_auroc: f64,
    pub samples: Vec<ScoredSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneVsAll {
    pub classes: Vec<ClassResult>,
    pub mean_auroc: f64,
}

/// For each positive class: train a decoder on that class of `train` with `trainer`, score all
/// of `test`, and measure how well the scores single out the other classes.
pub fn run_one_vs_all(
    train: &Dataset,
    test: &Dataset,
    positive_classes: &[u32],
    encoder: &dyn FeatureExtractor,
    mut trainer: impl FnMut(u32, &Dataset) -> Result<Network>,
    cfg: &AnomalyConfig,
) -> Result<OneVsAll> {
    if positive_classes.is_empty() {
        return Err(Error::Config("no positive classes given".into()));
    }
    let mut classes = Vec::with_capacity(positive_classes.len());
    for &class in positive_classes {
        let mut run = || -> Result<ClassResult> {
            let idx = train.class_indices(class);
            if idx.is_empty() {
                return Err(Error::Data(format!("class {class} has no training samples")));
            }
            let decoder = trainer(class, &train.select(&idx)?)?;
            let samples = score_dataset(encoder, &decoder, test, Some(class), cfg)?;
            let anomalous: Vec<bool> = samples.iter().map(|s| s.positive == Some(false)).collect();
            let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
            let pixel: Vec<f64> = samples.iter().map(|s| s.pixel_score).collect();
            Ok(ClassResult {
                class,
                auroc: auroc(&scores, &anomalous)?,
                pixel_auroc: auroc(&pixel, &anomalous)?,
                samples,
            })
        };
        classes.push(run().context(format!("positive class {class}"))?);
    }
    let mean_auroc = classes.iter().map(|c| c.auroc).sum::<f64>() / classes.len() as f64;
    Ok(OneVsAll { classes, mean_auroc })
}
