//! Whitening-coloring transform and the coarse-to-fine stylization cascade.

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::architectures::{LayerTag, Mode, NetRole, Network};
use crate::error::{Error, Result, ResultExt};
use crate::inversion::to_unit_range;
use crate::ops::to_f64_vec;

/// Eigenvalues below this are set to zero and their directions dropped.
pub const EIGEN_CLAMP: f64 = 1e-8;

/// First and second moments of one image's feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    /// Orthonormal eigenvectors of the channel covariance, one per column.
    pub eigenvectors: DMatrix<f64>,
    /// Matching eigenvalues, clamped to zero below [`EIGEN_CLAMP`].
    pub eigenvalues: DVector<f64>,
}

impl FeatureStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `E diag(λ) Eᵀ` from the stored (clamped) decomposition.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.eigenvectors * DMatrix::from_diagonal(&self.eigenvalues) * self.eigenvectors.transpose()
    }

    /// `E diag(g(λ)) Eᵀ` over the retained directions.
    fn spectral_map(&self, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.eigenvalues.map(|l| if l > 0.0 { g(l) } else { 0.0 });
        &self.eigenvectors * DMatrix::from_diagonal(&d) * self.eigenvectors.transpose()
    }
}

/// Covariance `(F−μ)(F−μ)ᵀ/(HW−1)` of a `C × HW` matrix.
pub fn covariance(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let positions = m.ncols();
    if positions < 2 {
        return Err(Error::Geometry(format!(
            "covariance needs at least 2 spatial positions, got {positions}"
        )));
    }
    let mean = m.column_mean();
    let mut centered = m.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / (positions as f64 - 1.0);
    Ok((mean, cov))
}

pub fn stats_from_matrix(m: &DMatrix<f64>) -> Result<FeatureStats> {
    let (mean, cov) = covariance(m)?;
    let eig = SymmetricEigen::new(cov);
    Ok(FeatureStats {
        mean,
        eigenvectors: eig.eigenvectors,
        eigenvalues: eig.eigenvalues.map(|l| if l < EIGEN_CLAMP { 0.0 } else { l }),
    })
}

/// Per-image `C × HW` matrices of a `(N, C, H, W)` feature map.
pub fn feature_matrices(f: &Tensor) -> Result<Vec<DMatrix<f64>>> {
    let (n, c, h, w) = f.dims4()?;
    let v = to_f64_vec(f)?;
    let per = c * h * w;
    Ok((0..n)
        .map(|i| DMatrix::from_row_slice(c, h * w, &v[i * per..(i + 1) * per]))
        .collect())
}

fn to_tensor(
    ms: &[DMatrix<f64>],
    shape: (usize, usize, usize, usize),
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data: Vec<f64> = Vec::with_capacity(shape.0 * shape.1 * shape.2 * shape.3);
    for m in ms {
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
    }
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Statistics of every image in the batch.
pub fn compute_stats(f: &Tensor) -> Result<Vec<FeatureStats>> {
    feature_matrices(f)?.iter().map(stats_from_matrix).collect()
}

fn check_stats(c: usize, n: usize, stats: &[FeatureStats]) -> Result<()> {
    if stats.len() != 1 && stats.len() != n {
        return Err(Error::Config(format!(
            "{} style statistics for a batch of {n}",
            stats.len()
        )));
    }
    if let Some(s) = stats.iter().find(|s| s.channels() != c) {
        return Err(Error::shape(
            "wct",
            format!("content has {c} channels, style statistics have {}", s.channels()),
        ));
    }
    Ok(())
}

fn whiten_matrix(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = stats_from_matrix(m)?;
    let mut centered = m.clone();
    for mut col in centered.column_iter_mut() {
        col -= &s.mean;
    }
    Ok(s.spectral_map(|l| l.powf(-0.5)) * centered)
}

/// `E D^{-1/2} Eᵀ (f − μ)` per image.
pub fn whiten(f: &Tensor) -> Result<Tensor> {
    let ms = feature_matrices(f)?;
    let out = ms.iter().map(whiten_matrix).collect::<Result<Vec<_>>>()?;
    to_tensor(&out, f.dims4()?, f.dtype(), f.device())
}

/// Whitens each content image with its own statistics and colors it with the style statistics
/// (one entry per image, or a single entry for the whole batch).
pub fn wct(content: &Tensor, style: &[FeatureStats]) -> Result<Tensor> {
    let (n, c, ..) = content.dims4()?;
    check_stats(c, n, style)?;
    let ms = feature_matrices(content)?;
    let mut out = Vec::with_capacity(n);
    for (i, m) in ms.iter().enumerate() {
        let s = &style[if style.len() == 1 { 0 } else { i }];
        let mut colored = s.spectral_map(f64::sqrt) * whiten_matrix(m)?;
        for mut col in colored.column_iter_mut() {
            col += &s.mean;
        }
        out.push(colored);
    }
    to_tensor(&out, content.dims4()?, content.dtype(), content.device())
}

/// A shared encoder and one decoder per level, coarse to fine.
#[derive(Debug, Clone)]
pub struct StylePipeline {
    pub encoder: Network,
    pub decoders: Vec<Network>,
}

fn depth(tag: LayerTag) -> usize {
    LayerTag::ALL.iter().position(|t| *t == tag).unwrap_or(0)
}

impl StylePipeline {
    pub fn new(encoder: Network, decoders: Vec<Network>) -> Result<Self> {
        let p = Self { encoder, decoders };
        let tags = p.tags()?;
        if tags.is_empty() {
            return Err(Error::Config("style pipeline needs at least one level".into()));
        }
        if tags.windows(2).any(|w| depth(w[0]) <= depth(w[1])) {
            return Err(Error::Config(format!(
                "style levels must go from deep to shallow layers, got {tags:?}"
            )));
        }
        Ok(p)
    }

    /// The layer each decoder inverts, in cascade order.
    pub fn tags(&self) -> Result<Vec<LayerTag>> {
        self.decoders
            .iter()
            .map(|d| match d.role {
                NetRole::StyleDecoder(t) => Ok(t),
                NetRole::Decoder => Ok(LayerTag::Conv5),
                r => Err(Error::Config(format!("{r:?} network in a style pipeline"))),
            })
            .collect()
    }
}

/// Runs every level in order: encode the current image, transfer the style statistics at that
/// layer, decode. The first level starts from the content image.
pub fn stylize_multilevel(content: &Tensor, style: &Tensor, pipeline: &StylePipeline) -> Result<Tensor> {
    let tags = pipeline.tags()?;
    let mut x = content.clone();
    for (level, (tag, decoder)) in tags.iter().zip(&pipeline.decoders).enumerate() {
        let step = || -> Result<Tensor> {
            let fs = pipeline.encoder.forward_features(style, *tag, Mode::Eval)?.tensor;
            let stats = compute_stats(&fs)?;
            let fc = pipeline.encoder.forward_features(&x, *tag, Mode::Eval)?.tensor;
            let t = wct(&fc, &stats)?;
            Ok(to_unit_range(&decoder.decode(&t, Mode::Eval)?)?.clamp(0.0, 1.0)?)
        };
        x = step().context(format!("style level {} ({tag})", level + 1))?;
    }
    Ok(x)
}
