//! Clipped additive Gaussian noise and the skip-connected denoising autoencoder.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{build_denoiser, BuildOptions, Mode, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inversion::{train_inverter, Inverter, InverterEpoch, LossMode, LossWeights, TrainConfig};
use crate::ops::randn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation in `[0,1]` pixel units.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// A stream of noise draws, one per call.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    pub sigma: f64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(spec: &NoiseSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            sigma: spec.sigma,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    /// `clamp(x + η, 0, 1)` with `η ~ N(0, σ²)` i.i.d.
    pub fn corrupt(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.sigma == 0.0 {
            return Ok(x.clone());
        }
        let eta = randn(&mut self.rng, x.dims(), self.sigma, x.dtype(), x.device())?;
        Ok((x + eta)?.clamp(0.0, 1.0)?)
    }
}

/// One deterministic corruption of `x`.
pub fn corrupt(x: &Tensor, spec: &NoiseSpec) -> Result<Tensor> {
    NoiseSource::new(spec)?.corrupt(x)
}

/// Clean estimate in `[0,1]`.
pub fn denoise(model: &Network, b: &Tensor) -> Result<Tensor> {
    let y = model.denoise_forward(b, Mode::Eval)?;
    if y.dims() != b.dims() {
        return Err(Error::shape(
            "denoise",
            format!("input {:?} produced {:?}", b.dims(), y.dims()),
        ));
    }
    Ok(crate::inversion::to_unit_range(&y)?.clamp(0.0, 1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTraining {
    pub noise: NoiseSpec,
    pub weights: LossWeights,
    pub train: TrainConfig,
    /// Keep the encoder half at the classifier's weights.
    pub freeze_encoder: bool,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        Self {
            noise: NoiseSpec {
                sigma: 50.0 / 255.0,
                seed: 0,
            },
            weights: LossWeights {
                pix: 2e-6,
                feat: 1e-2,
                adv: 0.0,
                disc: 0.0,
            },
            train: TrainConfig {
                mode: LossMode::PixFeat,
                ..TrainConfig::default()
            },
            freeze_encoder: true,
        }
    }
}

/// Builds a denoiser around `encoder`'s weights and trains it on noisy copies of `data` with
/// pixel and feature losses against the clean images.
pub fn train_denoiser(
    encoder: &Network,
    data: &Dataset,
    cfg: &DenoiserTraining,
    on_epoch: impl FnMut(&InverterEpoch) -> Result<()>,
) -> Result<(Network, Vec<InverterEpoch>)> {
    let opts = BuildOptions {
        seed: cfg.train.seed,
        dtype: encoder.dtype(),
        ..BuildOptions::default()
    };
    let mut model = build_denoiser(encoder.arch, &opts)?;
    let copied = model.params.copy_matching(&encoder.params, "enc.")?;
    if copied == 0 {
        return Err(Error::Config("no encoder weights matched the denoiser layout".into()));
    }
    model.params.set_trainable("enc.", !cfg.freeze_encoder);
    let train = TrainConfig {
        mode: if cfg.train.mode == LossMode::PixFeatGan {
            LossMode::PixFeat
        } else {
            cfg.train.mode
        },
        ..cfg.train
    };
    let mut noise = NoiseSource::new(&cfg.noise)?;
    let mut hook = |x: &Tensor| noise.corrupt(x);
    let models = Inverter {
        encoder,
        decoder: &model,
        discriminator: None,
    };
    let history = train_inverter(&models, data, &cfg.weights, &train, Some(&mut hook), on_epoch)?;
    Ok((model, history))
}
