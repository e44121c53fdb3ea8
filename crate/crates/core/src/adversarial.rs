//! PGD attacks and adversarial training.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{Mode, ModelParams, Network};
use crate::data::{Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::ops::{self, cross_entropy, cross_entropy_per_sample, to_f64_vec};
use crate::optim::{step_decay, Optimizer, Sgd};

/// Stream separation so attack randomness never perturbs the data order.
const ATTACK_STREAM: u64 = 0xa77a_c4ed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "2", alias = "l2")]
    L2,
    #[serde(rename = "inf", alias = "linf")]
    Linf,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L2 => "2",
            Norm::Linf => "inf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "l_inf" => Ok(Norm::Linf),
            _ => Err(Error::Config(format!("unknown norm `{s}` (expected 2 or inf)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    /// Radius in `[0,1]` pixel units.
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
}

fn default_true() -> bool {
    true
}

impl AttackSpec {
    /// No perturbation; turns adversarial training into plain cross-entropy training.
    pub fn none() -> Self {
        Self {
            norm: Norm::Linf,
            eps: 0.0,
            steps: 0,
            step_size: 0.0,
            random_start: false,
        }
    }

    pub fn linf(eps: f64, steps: usize, step_size: f64) -> Self {
        Self {
            norm: Norm::Linf,
            eps,
            steps,
            step_size,
            random_start: true,
        }
    }

    pub fn l2(eps: f64, steps: usize, step_size: f64) -> Self {
        Self {
            norm: Norm::L2,
            eps,
            steps,
            step_size,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!(
                "attack radius must be finite and >= 0, got {}",
                self.eps
            )));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::Config("attack step size must be > 0 when steps > 0".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.eps == 0.0 || (self.steps == 0 && !self.random_start)
    }
}

/// Maps `[0,1]` images to class logits with inference-mode statistics.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

pub trait TrainableClassifier: Classifier {
    /// Logits with training-mode statistics (batch norm updates its running averages).
    fn train_logits(&self, x: &Tensor) -> Result<Tensor>;
    fn params(&self) -> &ModelParams;
}

impl Classifier for Network {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Network::logits(self, x, Mode::Eval)
    }
}

impl TrainableClassifier for Network {
    fn train_logits(&self, x: &Tensor) -> Result<Tensor> {
        Network::logits(self, x, Mode::Train)
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }
}

/// Affine classifier on flattened inputs: `logits = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub params: ModelParams,
}

impl LinearClassifier {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (k, d) = weight.dims2()?;
        let mut params = ModelParams::new("linear", [d, 1, 1], [k, 1, 1]);
        params.insert("weight", weight, true)?;
        params.insert("bias", bias, true)?;
        Ok(Self { params })
    }

    pub fn weight(&self) -> Result<Tensor> {
        self.params.tensor("weight")
    }

    pub fn bias(&self) -> Result<Tensor> {
        self.params.tensor("bias")
    }
}

impl Classifier for LinearClassifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let w = self.weight()?;
        let flat = x.reshape((n, ()))?.to_dtype(w.dtype())?;
        Ok(flat.matmul(&w.t()?)?.broadcast_add(&self.bias()?)?)
    }
}

impl TrainableClassifier for LinearClassifier {
    fn train_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits(x)
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }
}

fn flat_norms(x: &Tensor, norm: Norm) -> Result<Tensor> {
    let n = x.dim(0)?;
    let flat = x.reshape((n, ()))?;
    Ok(match norm {
        Norm::L2 => flat.sqr()?.sum(1)?.sqrt()?,
        Norm::Linf => flat.abs()?.max(1)?,
    })
}

/// Per-sample `‖·‖_p` of a batch (first axis is the batch).
pub fn batch_norms(x: &Tensor, norm: Norm) -> Result<Vec<f64>> {
    to_f64_vec(&flat_norms(x, norm)?)
}

fn per_sample(v: &Tensor, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![like.dim(0)?];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(v.reshape(shape)?)
}

/// Projects each sample of `delta` onto the `ε`-ball; samples already inside are returned unchanged.
pub fn project_ball(delta: &Tensor, norm: Norm, eps: f64) -> Result<Tensor> {
    match norm {
        Norm::Linf => Ok(delta.clamp(-eps, eps)?),
        Norm::L2 => {
            let norms = to_f64_vec(&flat_norms(delta, Norm::L2)?)?;
            let scale: Vec<f64> = norms.iter().map(|&n| if n > eps { eps / n } else { 1.0 }).collect();
            let scale = Tensor::from_vec(scale, norms.len(), delta.device())?.to_dtype(delta.dtype())?;
            Ok(delta.broadcast_mul(&per_sample(&scale, delta)?)?)
        }
    }
}

fn random_delta<R: Rng + ?Sized>(x: &Tensor, spec: &AttackSpec, rng: &mut R) -> Result<Tensor> {
    let shape = x.dims().to_vec();
    let (dt, dev) = (x.dtype(), x.device());
    match spec.norm {
        Norm::Linf => ops::rand_uniform(rng, &shape, -spec.eps, spec.eps, dt, dev),
        Norm::L2 => {
            // Uniform in the ball: Gaussian direction, radius ε·U^(1/d).
            let n = shape[0];
            let d = x.elem_count() / n.max(1);
            let dir = ops::randn(rng, &shape, 1.0, dt, dev)?;
            let norms = to_f64_vec(&flat_norms(&dir, Norm::L2)?)?;
            let radii: Vec<f64> = norms
                .iter()
                .map(|&nv| spec.eps * rng.random::<f64>().powf(1.0 / d as f64) / nv.max(1e-12))
                .collect();
            let radii = Tensor::from_vec(radii, n, dev)?.to_dtype(dt)?;
            Ok(dir.broadcast_mul(&per_sample(&radii, x)?)?)
        }
    }
}

/// Keeps `x + δ` inside `[0,1]`.
fn clip_delta(x: &Tensor, delta: &Tensor) -> Result<Tensor> {
    Ok(((x + delta)?.clamp(0.0, 1.0)? - x)?)
}

fn mask_tensor(mask: &[bool], like: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = mask.iter().map(|&b| b as u8 as f64).collect();
    let t = Tensor::from_vec(v, mask.len(), like.device())?.to_dtype(like.dtype())?;
    per_sample(&t, like)
}

/// Returns `x + δ` with `‖δ‖_p ≤ ε`, `x + δ ∈ [0,1]`, chosen per sample as the iterate with the
/// highest cross-entropy seen during the attack.
pub fn pgd_attack<C, R>(model: &C, batch: &LabeledBatch, spec: &AttackSpec, rng: &mut R) -> Result<Tensor>
where
    C: Classifier + ?Sized,
    R: Rng + ?Sized,
{
    spec.validate()?;
    let x = batch.images.detach();
    if spec.is_identity() {
        return Ok(x);
    }
    let n = x.dim(0)?;
    let mut delta = if spec.random_start {
        clip_delta(&x, &project_ball(&random_delta(&x, spec, rng)?, spec.norm, spec.eps)?)?
    } else {
        x.zeros_like()?
    };
    let mut frozen = vec![false; n];
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    let mut best_delta = delta.clone();

    for step in 0..=spec.steps {
        let xa = Var::from_tensor(&(&x + &delta)?)?;
        let losses = cross_entropy_per_sample(&model.logits(xa.as_tensor())?, &batch.labels)?;
        let loss_v = to_f64_vec(&losses)?;
        let improved: Vec<bool> = loss_v
            .iter()
            .zip(&best_loss)
            .map(|(l, b)| l.is_finite() && l > b)
            .collect();
        if improved.iter().any(|&b| b) {
            let m = mask_tensor(&improved, &x)?;
            best_delta = (delta.broadcast_mul(&m)? + best_delta.broadcast_mul(&(1.0 - &m)?)?)?;
            for (b, (l, imp)) in best_loss.iter_mut().zip(loss_v.iter().zip(&improved)) {
                if *imp {
                    *b = *l;
                }
            }
        }
        if step == spec.steps {
            break;
        }
        let grads = losses.sum_all()?.backward()?;
        let g = match grads.get(xa.as_tensor()) {
            Some(g) => g.clone(),
            None => break,
        };
        let g_norms = batch_norms(&g, Norm::L2)?;
        for (f, gn) in frozen.iter_mut().zip(&g_norms) {
            if !gn.is_finite() {
                *f = true;
            }
        }
        if frozen.iter().all(|&f| f) {
            break;
        }
        let active = mask_tensor(&frozen.iter().map(|f| !f).collect::<Vec<_>>(), &x)?;
        // Zero the gradient of frozen samples before it can poison the update.
        let g = Tensor::where_cond(&g.ne(&g)?, &g.zeros_like()?, &g)?.broadcast_mul(&active)?;
        let stepv = match spec.norm {
            Norm::Linf => (g.sign()? * spec.step_size)?,
            Norm::L2 => {
                let norms: Vec<f64> = g_norms
                    .iter()
                    .map(|v| if v.is_finite() { v.max(1e-12) } else { 1.0 })
                    .collect();
                let inv = Tensor::from_vec(norms, n, x.device())?.to_dtype(x.dtype())?.recip()?;
                (g.broadcast_mul(&per_sample(&inv, &x)?)? * spec.step_size)?
            }
        };
        let next = clip_delta(
            &x,
            &project_ball(&(&delta + stepv.broadcast_mul(&active)?)?, spec.norm, spec.eps)?,
        )?;
        delta = next;
    }
    Ok((x + best_delta)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is divided by `decay_factor` every `decay_every` epochs (0 disables).
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 256,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_every: 30,
            decay_factor: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub clean_loss: f64,
    pub adv_loss: f64,
}

fn correct(logits: &Tensor, labels: &[u32]) -> Result<usize> {
    let pred = logits.argmax(1)?.to_vec1::<u32>()?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count())
}

/// Minibatch SGD on cross-entropy of PGD-perturbed samples; `AttackSpec::none()` gives
/// standard training. On a non-finite loss the parameters from before that step are restored
/// and an error is returned.
pub fn adversarial_train<M>(
    model: &M,
    data: &Dataset,
    spec: &AttackSpec,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>>
where
    M: TrainableClassifier + ?Sized,
{
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Data("adversarial training needs a nonempty dataset".into()));
    }
    if schedule.epochs == 0 || !(schedule.lr > 0.0) {
        return Err(Error::Config("training needs epochs >= 1 and lr > 0".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut attack_rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ ATTACK_STREAM);
    let mut opt = Sgd::new(
        model.params().trainable_vars(),
        schedule.lr,
        schedule.momentum,
        schedule.weight_decay,
    );
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        opt.set_learning_rate(step_decay(
            schedule.lr,
            epoch,
            schedule.decay_every,
            schedule.decay_factor,
        ));
        let (mut clean_ok, mut adv_ok, mut clean_sum, mut adv_sum) = (0usize, 0usize, 0.0, 0.0);
        for batch in data.batches(schedule.batch_size, Some(&mut order_rng))? {
            let n = batch.labels.len();
            let perturbed = !spec.is_identity();
            if perturbed {
                let clean = model.logits(&batch.images)?;
                clean_ok += correct(&clean, &batch.labels)?;
                clean_sum += ops::scalar_f64(&cross_entropy(&clean, &batch.labels)?)? * n as f64;
            }
            let x = pgd_attack(model, &batch, spec, &mut attack_rng)?;
            let snapshot = model.params().snapshot()?;
            let logits = model.train_logits(&x)?;
            let loss = cross_entropy(&logits, &batch.labels)?;
            let lv = ops::scalar_f64(&loss)?;
            if !lv.is_finite() {
                model.params().restore(&snapshot)?;
                return Err(Error::NonFinite(format!(
                    "training loss {lv} at epoch {epoch}; parameters restored to the previous step"
                )));
            }
            adv_ok += correct(&logits, &batch.labels)?;
            adv_sum += lv * n as f64;
            if !perturbed {
                clean_ok = adv_ok;
                clean_sum = adv_sum;
            }
            opt.step(&loss.backward()?)?;
        }
        let total = data.len() as f64;
        let stats = EpochStats {
            epoch,
            lr: opt.learning_rate(),
            clean_acc: clean_ok as f64 / total,
            adv_acc: adv_ok as f64 / total,
            clean_loss: clean_sum / total,
            adv_loss: adv_sum / total,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Fraction of samples still classified correctly after [`pgd_attack`].
pub fn evaluate_robust_accuracy<C>(
    model: &C,
    data: &Dataset,
    spec: &AttackSpec,
    batch_size: usize,
    seed: u64,
) -> Result<f64>
where
    C: Classifier + ?Sized,
{
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ATTACK_STREAM);
    let mut ok = 0;
    for batch in data.batches::<ChaCha8Rng>(batch_size, None)? {
        let x = pgd_attack(model, &batch, spec, &mut rng)?;
        ok += correct(&model.logits(&x)?, &batch.labels)?;
    }
    Ok(ok as f64 / data.len() as f64)
}

pub fn evaluate_accuracy<C: Classifier + ?Sized>(model: &C, data: &Dataset, batch_size: usize) -> Result<f64> {
    evaluate_robust_accuracy(model, data, &AttackSpec::none(), batch_size, 0)
}
