//! Image quality metrics: PSNR, SSIM, Gram loss and an encoder-feature distance.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::architectures::{LayerTag, Mode, Network};
use crate::ops::to_f64_vec;
use crate::{Error, Result};

/// Value written to CSV files in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricReport {
    /// Population statistics over `values`; infinite entries are replaced by `PSNR_CAP` first.
    pub fn new(metric: impl Into<String>, values: Vec<f64>) -> Self {
        let capped: Vec<f64> = values.iter().map(|v| cap(*v)).collect();
        let n = capped.len().max(1) as f64;
        let mean = capped.iter().sum::<f64>() / n;
        let var = capped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            metric: metric.into(),
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

pub fn cap(v: f64) -> f64 {
    if v == f64::INFINITY {
        PSNR_CAP
    } else {
        v
    }
}

fn check_pair(x: &Tensor, y: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    if x.dims() != y.dims() {
        return Err(Error::shape(what, format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    Ok(x.dims4()?)
}

/// Per-sample peak signal-to-noise ratio in dB; identical images give `+∞`.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<Vec<f64>> {
    let (n, ..) = check_pair(x, y, "psnr")?;
    let mse = (x.to_dtype(DType::F64)? - y.to_dtype(DType::F64)?)?
        .sqr()?
        .reshape((n, ()))?
        .mean(1)?;
    Ok(to_f64_vec(&mse)?
        .into_iter()
        .map(|m| {
            if m == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (peak * peak / m).log10()
            }
        })
        .collect())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let ks = k.len();
    let ow = w - ks + 1;
    let oh = h - ks + 1;
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..ks).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..ks).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

fn grayscale(x: &Tensor) -> Result<Vec<f64>> {
    Ok(to_f64_vec(&x.to_dtype(DType::F64)?.mean(1)?)?)
}

/// Per-sample mean structural similarity on the channel-mean grayscale image.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    let (n, _, h, w) = check_pair(x, y, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Geometry(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let gx = grayscale(x)?;
    let gy = grayscale(y)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let a = &gx[s * plane..(s + 1) * plane];
        let b = &gy[s * plane..(s + 1) * plane];
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(a, h, w, &k);
        let mu_b = filter_valid(b, h, w, &k);
        let aa = filter_valid(&prod(a, a), h, w, &k);
        let bb = filter_valid(&prod(b, b), h, w, &k);
        let ab = filter_valid(&prod(a, b), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        out.push(acc / mu_a.len() as f64);
    }
    Ok(out)
}

/// Per-sample Gram matrices `F Fᵀ / HW`, shape `(N, C, C)`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = f.dims4()?;
    let flat = f.to_dtype(DType::F64)?.contiguous()?.reshape((n, c, h * w))?;
    let grams = (0..n)
        .map(|i| {
            let m = flat.get(i)?;
            Ok((m.matmul(&m.t()?)? / (h * w) as f64)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&grams, 0)?.contiguous()?)
}

/// `Σ_l ‖G(a_l) − G(b_l)‖²_F / C_l²`, averaged over the batch.
pub fn gram_loss(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "gram loss over {} vs {} layers",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (l, (fa, fb)) in a.iter().zip(b).enumerate() {
        check_pair(fa, fb, &format!("gram layer {l}"))?;
        let (n, c, ..) = fa.dims4()?;
        let d = (gram(fa)? - gram(fb)?)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        total += d / (c * c) as f64 / n as f64;
    }
    Ok(total)
}

fn unit_channels(f: &Tensor) -> Result<Tensor> {
    let f = f.to_dtype(DType::F64)?;
    let norm = (f.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
    Ok(f.broadcast_div(&norm)?)
}

/// Per-sample perceptual distance: for each tag, channel-normalized features are compared by
/// squared distance per position and averaged spatially; tags are summed.
pub fn feature_distance(x: &Tensor, y: &Tensor, encoder: &Network, tags: &[LayerTag]) -> Result<Vec<f64>> {
    let (n, ..) = check_pair(x, y, "feature distance")?;
    let fx = encoder.forward_taps(x, tags, Mode::Eval)?;
    let fy = encoder.forward_taps(y, tags, Mode::Eval)?;
    let mut total = vec![0.0; n];
    for (a, b) in fx.iter().zip(&fy) {
        let d = (unit_channels(&a.tensor)? - unit_channels(&b.tensor)?)?
            .sqr()?
            .sum(1)?
            .reshape((n, ()))?
            .mean(1)?;
        for (t, v) in total.iter_mut().zip(to_f64_vec(&d)?) {
            *t += v;
        }
    }
    Ok(total)
}
