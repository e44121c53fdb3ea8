//! Decoder training against a frozen encoder, reconstruction, and pixel-space inversion.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{FeatureExtractor, LayerTag, Mode, NetRole, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ops::scalar_f64;
use crate::optim::{step_decay, Adam, Optimizer};

/// Scores are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(what, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn pixel_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    same_shape(x, x_hat, "pixel loss")?;
    Ok((x - x_hat)?.abs()?.mean_all()?)
}

/// Mean squared difference.
pub fn feature_loss(f: &Tensor, f_hat: &Tensor) -> Result<Tensor> {
    same_shape(f, f_hat, "feature loss")?;
    Ok((f - f_hat)?.sqr()?.mean_all()?)
}

fn clamped_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)?.log()?)
}

/// `mean(-log d_fake)`.
pub fn generator_gan_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok(clamped_log(d_fake)?.neg()?.mean_all()?)
}

/// `mean(-log d_real - log(1 - d_fake))`.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    same_shape(d_real, d_fake, "discriminator loss")?;
    let real = clamped_log(d_real)?;
    let fake = clamped_log(&(1.0 - d_fake)?)?;
    Ok((real + fake)?.neg()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pix: f64,
    pub feat: f64,
    pub adv: f64,
    /// Multiplies the discriminator objective.
    pub disc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pix: 2e-6,
            feat: 1e-2,
            adv: 100.0,
            disc: 2e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pix, self.feat, self.adv, self.disc];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        if self.pix <= 0.0 && self.feat <= 0.0 && self.adv <= 0.0 {
            return Err(Error::Config("at least one of pix, feat, adv must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Pix,
    PixFeat,
    PixFeatGan,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Pix => "pix",
            LossMode::PixFeat => "pixfeat",
            LossMode::PixFeatGan => "pixfeatgan",
        }
    }

    /// Weights with the terms this mode does not use set to zero.
    pub fn mask(self, w: &LossWeights) -> LossWeights {
        LossWeights {
            pix: w.pix,
            feat: if self == LossMode::Pix { 0.0 } else { w.feat },
            adv: if self == LossMode::PixFeatGan { w.adv } else { 0.0 },
            disc: if self == LossMode::PixFeatGan { w.disc } else { 0.0 },
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pix" => Ok(LossMode::Pix),
            "pixfeat" => Ok(LossMode::PixFeat),
            "pixfeatgan" => Ok(LossMode::PixFeatGan),
            _ => Err(Error::Config(format!("unknown loss mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    /// Both learning rates are divided by `decay_factor` every `decay_every` epochs (0 disables).
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mode: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 128,
            gen_lr: 3e-4,
            disc_lr: 12e-4,
            decay_every: 30,
            decay_factor: 10.0,
            beta1: 0.0,
            beta2: 0.9,
            mode: LossMode::PixFeatGan,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.gen_lr > 0.0) || (self.mode == LossMode::PixFeatGan && !(self.disc_lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Mean losses over one epoch (unweighted terms; `total` is the weighted generator objective).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct InverterEpoch {
    pub epoch: usize,
    pub gen_lr: f64,
    pub pix: f64,
    pub feat: f64,
    pub adv: f64,
    pub disc: f64,
    pub total: f64,
}

/// Images in `[0,1]` from decoder outputs in `[-1,1]`.
pub fn to_unit_range(y: &Tensor) -> Result<Tensor> {
    Ok(((y + 1.0)? / 2.0)?)
}

/// Layer a decoder inverts; mirror decoders and denoisers work on the bottleneck.
pub fn decoder_tag(decoder: &Network) -> LayerTag {
    match decoder.role {
        NetRole::StyleDecoder(t) => t,
        _ => LayerTag::Conv5,
    }
}

/// Decoder output in `[-1,1]` for an image batch. Denoisers see the image directly, other
/// decoders see the encoder features at their tag.
fn generate(encoder: &Network, decoder: &Network, x_in: &Tensor, mode: Mode) -> Result<Tensor> {
    match decoder.role {
        NetRole::Denoiser => {
            let enc_trainable = decoder
                .params
                .entries()
                .iter()
                .any(|e| e.trainable && e.name.starts_with("enc."));
            let enc_mode = if enc_trainable { mode } else { Mode::Eval };
            decoder.denoise_forward_split(x_in, enc_mode, mode)
        }
        NetRole::Decoder | NetRole::StyleDecoder(_) => {
            let f = encoder
                .forward_features(x_in, decoder_tag(decoder), Mode::Eval)?
                .tensor
                .detach();
            decoder.decode(&f, mode)
        }
        r => Err(Error::Config(format!(
            "network with role {r:?} cannot act as a decoder"
        ))),
    }
}

/// Deterministic reconstruction in `[0,1]`.
pub fn reconstruct(encoder: &Network, decoder: &Network, x: &Tensor) -> Result<Tensor> {
    let y = generate(encoder, decoder, x, Mode::Eval)?;
    let out = to_unit_range(&y)?.clamp(0.0, 1.0)?;
    if out.dims() != x.dims() {
        return Err(Error::shape(
            "reconstruct",
            format!("input {:?} decoded to {:?}", x.dims(), out.dims()),
        ));
    }
    Ok(out)
}

/// Corruption applied to inputs before encoding (e.g. noise for denoiser training).
pub type InputHook<'a> = &'a mut dyn FnMut(&Tensor) -> Result<Tensor>;

struct StepTerms {
    gen_total: Tensor,
    pix: f64,
    feat: f64,
    adv: f64,
    x_hat: Tensor,
    /// Conv5 features of the clean batch, the discriminator's conditioning input.
    f_cond: Option<Tensor>,
}

fn generator_terms(models: &Inverter<'_>, x: &Tensor, x_in: &Tensor, w: &LossWeights) -> Result<StepTerms> {
    let Inverter { encoder, decoder, .. } = *models;
    let tag = decoder_tag(decoder);
    let f_target = encoder.forward_features(x, tag, Mode::Eval)?.tensor.detach();
    let x_hat = to_unit_range(&generate(encoder, decoder, x_in, Mode::Train)?)?;
    let pix = pixel_loss(x, &x_hat)?;
    let mut terms = StepTerms {
        gen_total: (&pix * w.pix)?,
        pix: scalar_f64(&pix)?,
        feat: 0.0,
        adv: 0.0,
        x_hat,
        f_cond: None,
    };
    if w.feat > 0.0 {
        let f_hat = encoder.forward_features(&terms.x_hat, tag, Mode::Eval)?.tensor;
        let feat = feature_loss(&f_target, &f_hat)?;
        terms.feat = scalar_f64(&feat)?;
        terms.gen_total = (terms.gen_total + (feat * w.feat)?)?;
    }
    if w.adv > 0.0 {
        let d = models
            .discriminator
            .ok_or_else(|| Error::Config("adversarial loss needs a discriminator".into()))?;
        let f_cond = if tag == LayerTag::Conv5 {
            f_target
        } else {
            encoder
                .forward_features(x, LayerTag::Conv5, Mode::Eval)?
                .tensor
                .detach()
        };
        let adv = generator_gan_loss(&d.discriminate(&terms.x_hat, &f_cond, Mode::Train)?)?;
        terms.adv = scalar_f64(&adv)?;
        terms.gen_total = (terms.gen_total + (adv * w.adv)?)?;
        terms.f_cond = Some(f_cond);
    }
    Ok(terms)
}

/// The networks taking part in decoder training.
#[derive(Debug, Clone, Copy)]
pub struct Inverter<'a> {
    /// Only read, never updated.
    pub encoder: &'a Network,
    /// A mirror or style decoder, or a denoiser.
    pub decoder: &'a Network,
    /// Required when the adversarial term is active.
    pub discriminator: Option<&'a Network>,
}

/// Alternating decoder/discriminator training. The encoder is only read. Spectral-norm power
/// iterations advance once per step. On a non-finite loss the decoder and discriminator are
/// rolled back to the start of the epoch and an error is returned.
pub fn train_inverter(
    models: &Inverter<'_>,
    data: &Dataset,
    weights: &LossWeights,
    cfg: &TrainConfig,
    mut input_hook: Option<InputHook<'_>>,
    mut on_epoch: impl FnMut(&InverterEpoch) -> Result<()>,
) -> Result<Vec<InverterEpoch>> {
    weights.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("decoder training needs a nonempty dataset".into()));
    }
    let w = cfg.mode.mask(weights);
    let decoder = models.decoder;
    let disc = if w.adv > 0.0 {
        Some(
            models
                .discriminator
                .ok_or_else(|| Error::Config("loss mode pixfeatgan needs a discriminator".into()))?,
        )
    } else {
        None
    };
    let mut gen_opt = Adam::new(decoder.params.trainable_vars(), cfg.gen_lr, cfg.beta1, cfg.beta2);
    let mut disc_opt = disc.map(|d| Adam::new(d.params.trainable_vars(), cfg.disc_lr, cfg.beta1, cfg.beta2));
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let dec_snap = decoder.params.snapshot()?;
        let disc_snap = disc.map(|d| d.params.snapshot()).transpose()?;
        let rollback = |what: String| -> Result<Error> {
            decoder.params.restore(&dec_snap)?;
            if let (Some(d), Some(s)) = (disc, &disc_snap) {
                d.params.restore(s)?;
            }
            Ok(Error::NonFinite(format!(
                "{what} at epoch {epoch}; rolled back to the start of the epoch"
            )))
        };
        gen_opt.set_learning_rate(step_decay(cfg.gen_lr, epoch, cfg.decay_every, cfg.decay_factor));
        if let Some(o) = disc_opt.as_mut() {
            o.set_learning_rate(step_decay(cfg.disc_lr, epoch, cfg.decay_every, cfg.decay_factor));
        }
        let mut acc = InverterEpoch {
            epoch,
            gen_lr: gen_opt.learning_rate(),
            ..Default::default()
        };
        let mut seen = 0.0;
        for batch in data.batches(cfg.batch_size, Some(&mut order_rng))? {
            let x = batch.images.to_dtype(decoder.dtype())?;
            let x_in = match input_hook.as_mut() {
                Some(h) => h(&x)?,
                None => x.clone(),
            };
            let terms = generator_terms(models, &x, &x_in, &w)?;
            let total = scalar_f64(&terms.gen_total)?;
            if !total.is_finite() {
                return Err(rollback(format!("generator loss {total}"))?);
            }
            gen_opt.step(&terms.gen_total.backward()?)?;
            let mut disc_v = 0.0;
            if let (Some(d), Some(opt), Some(f_cond)) = (disc, disc_opt.as_mut(), terms.f_cond.as_ref()) {
                let real = d.discriminate(&x, f_cond, Mode::Train)?;
                let fake = d.discriminate(&terms.x_hat.detach(), f_cond, Mode::Train)?;
                let loss = discriminator_loss(&real, &fake)?;
                disc_v = scalar_f64(&loss)?;
                if !disc_v.is_finite() {
                    return Err(rollback(format!("discriminator loss {disc_v}"))?);
                }
                opt.step(&(loss * w.disc)?.backward()?)?;
                d.spectral_step()?;
            }
            decoder.spectral_step()?;
            let n = batch.labels.len() as f64;
            seen += n;
            acc.pix += terms.pix * n;
            acc.feat += terms.feat * n;
            acc.adv += terms.adv * n;
            acc.disc += disc_v * n;
            acc.total += total * n;
        }
        for v in [&mut acc.pix, &mut acc.feat, &mut acc.adv, &mut acc.disc, &mut acc.total] {
            *v /= seen;
        }
        on_epoch(&acc)?;
        history.push(acc);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    None,
    /// Squared finite differences along height and width.
    TotalVariation,
}

/// `Σ (x[i+1,j] - x[i,j])² + (x[i,j+1] - x[i,j])²`.
pub fn total_variation(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut tv = Tensor::zeros((), x.dtype(), x.device())?;
    if h > 1 {
        let dh = (x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?;
        tv = (tv + dh.sqr()?.sum_all()?)?;
    }
    if w > 1 {
        let dw = (x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?;
        tv = (tv + dw.sqr()?.sum_all()?)?;
    }
    Ok(tv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimInversion {
    pub regularizer: Regularizer,
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for OptimInversion {
    fn default() -> Self {
        Self {
            regularizer: Regularizer::TotalVariation,
            lambda: 1e-4,
            steps: 500,
            lr: 0.01,
        }
    }
}

/// Gradient descent in pixel space on `‖F(x) − f₀‖² + λR(x)` from `init`, clamping to `[0,1]`
/// after each step. Returns the final image and the objective before every step plus at the end.
pub fn invert_by_optimization(
    encoder: &dyn FeatureExtractor,
    f0: &Tensor,
    init: &Tensor,
    cfg: &OptimInversion,
) -> Result<(Tensor, Vec<f64>)> {
    let objective = |x: &Tensor| -> Result<Tensor> {
        let f = encoder.extract(x)?;
        same_shape(&f, f0, "inversion target")?;
        let mut loss = (f - f0)?.sqr()?.sum_all()?;
        if cfg.regularizer == Regularizer::TotalVariation && cfg.lambda > 0.0 {
            loss = (loss + (total_variation(x)? * cfg.lambda)?)?;
        }
        Ok(loss)
    };
    let x = Var::from_tensor(&init.clamp(0.0, 1.0)?)?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let loss = objective(x.as_tensor())?;
        let v = scalar_f64(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("inversion objective {v}")));
        }
        trace.push(v);
        let grads = loss.backward()?;
        if let Some(g) = grads.get(x.as_tensor()) {
            let next = (x.as_tensor() - (g * cfg.lr)?)?.clamp(0.0, 1.0)?;
            x.set(&next)?;
        }
    }
    trace.push(scalar_f64(&objective(x.as_tensor())?)?);
    Ok((x.as_tensor().clone(), trace))
}
