//! Tensor primitives the stock candle kernels either lack or differentiate slowly.
//!
//! Convolutions are lowered to `im2col` + one large matmul. The column buffer is laid out
//! as `(C·kh·kw, N·Ho·Wo)` so that both the forward product and the two backward products
//! are single GEMMs over the whole batch.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Sliding-window geometry of one convolution input plane stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
}

impl WindowGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel.0) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel.1) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col<T: Copy + Default>(src: &[T], batch: usize, g: WindowGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let positions = ho * wo;
    let row_len = batch * positions;
    let mut out = vec![T::default(); g.rows() * row_len];
    let plane = g.height * g.width;
    for b in 0..batch {
        for c in 0..g.channels {
            let src_plane = &src[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
            for ki in 0..g.kernel.0 {
                for kj in 0..g.kernel.1 {
                    let r = (c * g.kernel.0 + ki) * g.kernel.1 + kj;
                    let dst = &mut out[r * row_len + b * positions..r * row_len + (b + 1) * positions];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src_plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + AddAssign>(src: &[T], batch: usize, g: WindowGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let positions = ho * wo;
    let row_len = batch * positions;
    let plane = g.height * g.width;
    let mut out = vec![T::default(); batch * g.channels * plane];
    for b in 0..batch {
        for c in 0..g.channels {
            let dst_plane = &mut out[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
            for ki in 0..g.kernel.0 {
                for kj in 0..g.kernel.1 {
                    let r = (c * g.kernel.0 + ki) * g.kernel.1 + kj;
                    let s = &src[r * row_len + b * positions..r * row_len + (b + 1) * positions];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst_plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += s[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} requires a contiguous input"),
    }
}

struct Im2Col(WindowGeometry);
struct Col2Im(WindowGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let dims = layout.dims();
        if dims.len() != 4 || dims[1] != g.channels || dims[2] != g.height || dims[3] != g.width {
            candle_core::bail!("im2col: input {dims:?} does not match {g:?}");
        }
        let batch = dims[0];
        let shape = Shape::from((g.rows(), batch * g.positions()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout, "im2col")?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout, "im2col")?, batch, g)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let dims = layout.dims();
        if dims.len() != 2 || dims[0] != g.rows() || dims[1] % g.positions() != 0 {
            candle_core::bail!("col2im: input {dims:?} does not match {g:?}");
        }
        let batch = dims[1] / g.positions();
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout, "col2im")?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout, "col2im")?, batch, g)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution. `weight` is `(out, in, kh, kw)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, kh, kw) = weight.dims4()?;
    if c != ci {
        return Err(Error::Geometry(format!(
            "conv2d: input has {c} channels, kernel expects {ci}"
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Geometry(format!(
            "conv2d: {h}x{w} input (pad {pad}) smaller than {kh}x{kw} kernel"
        )));
    }
    let g = WindowGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: (kh, kw),
        stride,
        pad,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wm = weight.contiguous()?.reshape((o, c * kh * kw))?;
    let y = wm
        .matmul(&cols)?
        .reshape((o, n, g.out_height(), g.out_width()))?
        .transpose(0, 1)?
        .contiguous()?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, o, 1, 1))?)?),
        None => Ok(y),
    }
}

/// Output side length of a transposed convolution.
pub fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((size - 1) * stride + kernel).checked_sub(2 * pad)
}

/// Transposed 2-D convolution. `weight` is `(in, out, kh, kw)` (the PyTorch layout).
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ci, o, kh, kw) = weight.dims4()?;
    if c != ci {
        return Err(Error::Geometry(format!(
            "conv_transpose2d: input has {c} channels, kernel expects {ci}"
        )));
    }
    let (ho, wo) = match (
        conv_transpose_out(h, kh, stride, pad),
        conv_transpose_out(w, kw, stride, pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::Geometry(format!(
                "conv_transpose2d: degenerate output for {h}x{w}"
            )))
        }
    };
    let g = WindowGeometry {
        channels: o,
        height: ho,
        width: wo,
        kernel: (kh, kw),
        stride,
        pad,
    };
    debug_assert_eq!((g.out_height(), g.out_width()), (h, w));
    let xm = x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * w))?;
    let wm = weight.contiguous()?.reshape((c, o * kh * kw))?;
    let cols = wm.t()?.matmul(&xm)?.contiguous()?;
    let y = cols.apply_op1(Col2Im(g))?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, o, 1, 1))?)?),
        None => Ok(y),
    }
}

fn index_tensor(idx: Vec<u32>, device: &Device) -> Result<Tensor> {
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, device)?)
}

/// Max pooling with arbitrary (possibly overlapping) windows, no padding.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h < kernel || w < kernel {
        return Err(Error::Geometry(format!(
            "max_pool2d: {h}x{w} smaller than window {kernel}"
        )));
    }
    if kernel == stride && h % kernel == 0 && w % kernel == 0 {
        return Ok(x.max_pool2d(kernel)?);
    }
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut out: Option<Tensor> = None;
    for ki in 0..kernel {
        let rows = index_tensor((0..ho).map(|o| (o * stride + ki) as u32).collect(), x.device())?;
        let xr = x.index_select(&rows, 2)?;
        for kj in 0..kernel {
            let cols = index_tensor((0..wo).map(|o| (o * stride + kj) as u32).collect(), x.device())?;
            let v = xr.index_select(&cols, 3)?;
            out = Some(match out {
                None => v,
                Some(m) => m.maximum(&v)?,
            });
        }
    }
    Ok(out.expect("kernel >= 1"))
}

fn reflect_index(i: isize, n: usize) -> u32 {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    // Reflection without edge repetition; `i` is at most one period outside.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as u32
}

/// Reflection padding `(top, bottom, left, right)`.
pub fn reflection_pad(x: &Tensor, pads: (usize, usize, usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (top, bottom, left, right) = pads;
    if top >= h || bottom >= h || left >= w || right >= w {
        return Err(Error::Geometry(format!(
            "reflection_pad: pads {pads:?} too large for {h}x{w}"
        )));
    }
    let rows: Vec<u32> = (0..h + top + bottom)
        .map(|i| reflect_index(i as isize - top as isize, h))
        .collect();
    let cols: Vec<u32> = (0..w + left + right)
        .map(|j| reflect_index(j as isize - left as isize, w))
        .collect();
    let y = x.index_select(&index_tensor(rows, x.device())?, 2)?;
    Ok(y.index_select(&index_tensor(cols, x.device())?, 3)?)
}

/// Row-stochastic bilinear interpolation matrix (half-pixel centres, edge clamped).
fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for o in 0..dst {
        let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        m[o * src + i0] += 1.0 - frac;
        m[o * src + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of a `(N, C, H, W)` batch.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let ry = Tensor::from_vec(bilinear_matrix(h, height), (height, h), x.device())?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(w, width), (width, w), x.device())?.to_dtype(x.dtype())?;
    let cols = x.contiguous()?.reshape((n * c * h, w))?.matmul(&rx.t()?)?;
    let cols = cols.reshape((n * c, h, width))?.transpose(1, 2)?.contiguous()?;
    let y = cols.reshape((n * c * width, h))?.matmul(&ry.t()?)?;
    let y = y.reshape((n * c, width, height))?.transpose(1, 2)?.contiguous()?;
    Ok(y.reshape((n, c, height, width))?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable log-softmax over the last dimension of a `(N, K)` tensor.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn one_hot(labels: &[u32], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Data(format!("label {l} outside [0, {classes})")));
        }
        v[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes), device)?.to_dtype(dtype)?)
}

/// Per-sample cross-entropy, shape `(N,)`.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let target = one_hot(labels, k, logits.dtype(), logits.device())?;
    Ok((log_softmax(logits)? * target)?.sum(1)?.neg()?)
}

pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    Ok(cross_entropy_per_sample(logits, labels)?.mean_all()?)
}

/// Gaussian tensor drawn from a caller-owned RNG so results are reproducible.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

pub fn rand_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    lo: f64,
    hi: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
