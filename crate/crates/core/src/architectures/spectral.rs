//! Power-iteration spectral normalization.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::error::Result;
use crate::ops::randn;

/// Below this the weight is treated as zero and left unscaled.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Persistent left/right singular-vector estimates for one weight matrix.
#[derive(Debug, Clone)]
pub struct SpectralState {
    /// Left estimate, length `rows`.
    pub u: Tensor,
    /// Right estimate, length `cols`.
    pub v: Tensor,
}

impl SpectralState {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, dtype: DType) -> Result<Self> {
        let dev = candle_core::Device::Cpu;
        let u = l2_normalize(&randn(rng, &[rows], 1.0, dtype, &dev)?)?;
        let v = l2_normalize(&randn(rng, &[cols], 1.0, dtype, &dev)?)?;
        Ok(Self { u, v })
    }

    /// One power-iteration step against `matrix` (`rows × cols`); returns the updated state.
    pub fn step(&self, matrix: &Tensor) -> Result<Self> {
        let m = matrix.detach();
        let v = l2_normalize(&m.t()?.matmul(&self.u.unsqueeze(1)?)?.squeeze(1)?)?;
        let u = l2_normalize(&m.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
        Ok(Self { u, v })
    }

    /// `uᵀ M v` with the singular vectors held constant, so gradients flow only through `M`.
    pub fn sigma(&self, matrix: &Tensor) -> Result<Tensor> {
        let u = self.u.detach().unsqueeze(0)?;
        let v = self.v.detach().unsqueeze(1)?;
        Ok(u.matmul(&matrix.matmul(&v)?)?.reshape(())?)
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_all()?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// Reshapes a conv weight to `(out, rest)`. Transposed-conv weights are `(in, out, kh, kw)`,
/// so their output axis is moved first.
pub fn weight_matrix(weight: &Tensor, transposed: bool) -> Result<Tensor> {
    let w = if transposed {
        weight.transpose(0, 1)?.contiguous()?
    } else {
        weight.contiguous()?
    };
    let rows = w.dim(0)?;
    let cols = w.elem_count() / rows.max(1);
    Ok(w.reshape((rows, cols))?)
}

/// Divides `weight` by its estimated top singular value after one power-iteration step.
pub fn spectral_normalize(weight: &Tensor, state: &SpectralState, transposed: bool) -> Result<(Tensor, SpectralState)> {
    let matrix = weight_matrix(weight, transposed)?;
    let next = state.step(&matrix)?;
    let normalized = apply_spectral(weight, &next, transposed)?;
    Ok((normalized, next))
}

/// Scales `weight` by the σ implied by `state` without advancing the iteration.
pub fn apply_spectral(weight: &Tensor, state: &SpectralState, transposed: bool) -> Result<Tensor> {
    let matrix = weight_matrix(weight, transposed)?;
    let sigma = state.sigma(&matrix)?;
    let s = sigma.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() || s.abs() < SIGMA_FLOOR {
        return Ok(weight.clone());
    }
    Ok(weight.broadcast_div(&sigma)?)
}
