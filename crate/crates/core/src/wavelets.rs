//! Orthonormal 2-D Haar analysis and synthesis on `(N, C, H, W)` tensors.
//!
//! For a 2×2 block `(a, b; c, d)`:
//! `LL = (a+b+c+d)/2`, `LH = (a-b+c-d)/2`, `HL = (a+b-c-d)/2`, `HH = (a-b-c+d)/2`.
//! Both directions are built from differentiable tensor ops so they can sit inside a
//! network as pooling/unpooling layers.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::ops::reflection_pad;

/// How an odd spatial extent is made even before the 2×2 transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OddPolicy {
    /// Reflection-pad the trailing row/column; synthesis crops it again (exact inverse).
    #[default]
    Reflect,
    /// Drop the trailing row/column; synthesis returns the even extent.
    Truncate,
}

#[derive(Debug, Clone)]
pub struct WaveletSubbands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    pub odd_height: bool,
    pub odd_width: bool,
    pub policy: OddPolicy,
}

impl WaveletSubbands {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.ll.dims4().expect("subbands are rank 4")
    }

    /// Spatial extent of the signal these subbands were computed from.
    pub fn source_hw(&self) -> (usize, usize) {
        let (_, _, h, w) = self.dims();
        match self.policy {
            OddPolicy::Reflect => (2 * h - self.odd_height as usize, 2 * w - self.odd_width as usize),
            OddPolicy::Truncate => (2 * h + self.odd_height as usize, 2 * w + self.odd_width as usize),
        }
    }

    pub fn details(&self) -> [&Tensor; 3] {
        [&self.lh, &self.hl, &self.hh]
    }

    fn check(&self) -> Result<()> {
        let d = self.ll.dims();
        for (name, t) in [("LH", &self.lh), ("HL", &self.hl), ("HH", &self.hh)] {
            if t.dims() != d {
                return Err(Error::Geometry(format!(
                    "subband {name} has shape {:?}, LL has {:?}",
                    t.dims(),
                    d
                )));
            }
        }
        Ok(())
    }
}

pub fn haar_analysis(x: &Tensor) -> Result<WaveletSubbands> {
    haar_analysis_with(x, OddPolicy::Reflect)
}

pub fn haar_analysis_with(x: &Tensor, policy: OddPolicy) -> Result<WaveletSubbands> {
    let (n, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::Geometry(format!("haar analysis needs H, W >= 2, got {h}x{w}")));
    }
    let (odd_h, odd_w) = (h % 2 == 1, w % 2 == 1);
    let even = match policy {
        OddPolicy::Reflect if odd_h || odd_w => reflection_pad(x, (0, odd_h as usize, 0, odd_w as usize))?,
        OddPolicy::Truncate if odd_h || odd_w => {
            x.narrow(2, 0, h - odd_h as usize)?.narrow(3, 0, w - odd_w as usize)?
        }
        _ => x.clone(),
    };
    let (_, _, eh, ew) = even.dims4()?;
    let (h2, w2) = (eh / 2, ew / 2);
    let blocks = even.contiguous()?.reshape((n, c, h2, 2, w2, 2))?;
    let pick = |dy: usize, dx: usize| -> Result<Tensor> {
        Ok(blocks
            .narrow(3, dy, 1)?
            .narrow(5, dx, 1)?
            .contiguous()?
            .reshape((n, c, h2, w2))?)
    };
    let (a, b, cc, d) = (pick(0, 0)?, pick(0, 1)?, pick(1, 0)?, pick(1, 1)?);
    let ll = ((((&a + &b)? + &cc)? + &d)? * 0.5)?;
    let lh = ((((&a - &b)? + &cc)? - &d)? * 0.5)?;
    let hl = ((((&a + &b)? - &cc)? - &d)? * 0.5)?;
    let hh = ((((&a - &b)? - &cc)? + &d)? * 0.5)?;
    Ok(WaveletSubbands {
        ll,
        lh,
        hl,
        hh,
        odd_height: odd_h,
        odd_width: odd_w,
        policy,
    })
}

/// Inverse of [`haar_analysis_with`]. Under [`OddPolicy::Reflect`] the padding is cropped;
/// under [`OddPolicy::Truncate`] the result has the even extent `2·h × 2·w`.
pub fn haar_synthesis(s: &WaveletSubbands) -> Result<Tensor> {
    s.check()?;
    let (n, c, h2, w2) = s.dims();
    let (ll, lh, hl, hh) = (&s.ll, &s.lh, &s.hl, &s.hh);
    let a = ((((ll + lh)? + hl)? + hh)? * 0.5)?;
    let b = ((((ll - lh)? + hl)? - hh)? * 0.5)?;
    let cc = ((((ll + lh)? - hl)? - hh)? * 0.5)?;
    let d = ((((ll - lh)? - hl)? + hh)? * 0.5)?;
    let top = Tensor::stack(&[&a, &b], 4)?.reshape((n, c, h2, 2 * w2))?;
    let bottom = Tensor::stack(&[&cc, &d], 4)?.reshape((n, c, h2, 2 * w2))?;
    let full = Tensor::stack(&[&top, &bottom], 3)?.reshape((n, c, 2 * h2, 2 * w2))?;
    match s.policy {
        OddPolicy::Reflect if s.odd_height || s.odd_width => Ok(full
            .narrow(2, 0, 2 * h2 - s.odd_height as usize)?
            .narrow(3, 0, 2 * w2 - s.odd_width as usize)?),
        _ => Ok(full),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{randn, to_f64_vec};
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn constant_image_has_only_approximation() {
        let x = Tensor::full(0.3f64, (1, 2, 4, 6), &Device::Cpu).unwrap();
        let s = haar_analysis(&x).unwrap();
        assert!(to_f64_vec(&s.ll).unwrap().iter().all(|v| (v - 0.6).abs() < 1e-12));
        for d in s.details() {
            assert!(to_f64_vec(d).unwrap().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn single_corner_block() {
        let s = haar_analysis(&t(&[1.0, 0.0, 0.0, 0.0], (1, 1, 2, 2))).unwrap();
        for band in [&s.ll, &s.lh, &s.hl, &s.hh] {
            assert_eq!(to_f64_vec(band).unwrap(), vec![0.5]);
        }
    }

    #[test]
    fn hh_impulse_is_checkerboard() {
        let z = t(&[0.0], (1, 1, 1, 1));
        let s = WaveletSubbands {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: t(&[1.0], (1, 1, 1, 1)),
            odd_height: false,
            odd_width: false,
            policy: OddPolicy::Reflect,
        };
        assert_eq!(
            to_f64_vec(&haar_synthesis(&s).unwrap()).unwrap(),
            vec![0.5, -0.5, -0.5, 0.5]
        );
    }

    #[test]
    fn constant_approximation_synthesizes_constant() {
        let ll = Tensor::full(2.0 * 0.7f64, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let z = ll.zeros_like().unwrap();
        let s = WaveletSubbands {
            ll,
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
            odd_height: false,
            odd_width: false,
            policy: OddPolicy::Reflect,
        };
        let x = haar_synthesis(&s).unwrap();
        assert_eq!(x.dims(), &[1, 1, 6, 6]);
        assert!(to_f64_vec(&x).unwrap().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn energy_is_conserved_on_even_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[1, 1, 8, 8], 1.0, DType::F64, &Device::Cpu).unwrap();
        let direct: f64 = to_f64_vec(&x).unwrap().iter().map(|v| v * v).sum();
        let s = haar_analysis(&x).unwrap();
        let bands: f64 = [&s.ll, &s.lh, &s.hl, &s.hh]
            .iter()
            .map(|b| to_f64_vec(b).unwrap().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!((direct - bands).abs() / direct < 1e-6);
    }

    #[test]
    fn rejects_tiny_inputs() {
        let x = Tensor::zeros((1, 1, 1, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(haar_analysis(&x), Err(Error::Geometry(_))));
    }

    #[test]
    fn mismatched_subbands_are_rejected() {
        let a = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let s = WaveletSubbands {
            ll: a.clone(),
            lh: a.clone(),
            hl: b,
            hh: a,
            odd_height: false,
            odd_width: false,
            policy: OddPolicy::Reflect,
        };
        assert!(haar_synthesis(&s).is_err());
    }

    #[test]
    fn truncation_keeps_floor_geometry() {
        let x = Tensor::zeros((1, 4, 55, 55), DType::F32, &Device::Cpu).unwrap();
        let s = haar_analysis_with(&x, OddPolicy::Truncate).unwrap();
        assert_eq!(s.dims(), (1, 4, 27, 27));
        assert_eq!(haar_synthesis(&s).unwrap().dims(), &[1, 4, 54, 54]);
        let s = haar_analysis(&x).unwrap();
        assert_eq!(s.dims(), (1, 4, 28, 28));
        assert_eq!(s.source_hw(), (55, 55));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn perfect_reconstruction(h in 2usize..12, w in 2usize..12, c in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, &[2, c, h, w], 1.0, DType::F64, &Device::Cpu).unwrap();
            let y = haar_synthesis(&haar_analysis(&x).unwrap()).unwrap();
            prop_assert_eq!(y.dims(), x.dims());
            let err = to_f64_vec(&(y - &x).unwrap().abs().unwrap()).unwrap().into_iter().fold(0.0, f64::max);
            prop_assert!(err < 1e-6);
        }

        #[test]
        fn analysis_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, &[1, 2, 5, 6], 1.0, DType::F64, &Device::Cpu).unwrap();
            let y = randn(&mut rng, &[1, 2, 5, 6], 1.0, DType::F64, &Device::Cpu).unwrap();
            let combo = ((&x * alpha).unwrap() + (&y * beta).unwrap()).unwrap();
            let (sx, sy, sc) = (haar_analysis(&x).unwrap(), haar_analysis(&y).unwrap(), haar_analysis(&combo).unwrap());
            for (bx, (by, bc)) in [&sx.ll, &sx.lh, &sx.hl, &sx.hh].into_iter()
                .zip([&sy.ll, &sy.lh, &sy.hl, &sy.hh].into_iter().zip([&sc.ll, &sc.lh, &sc.hl, &sc.hh]))
            {
                let lin = ((bx * alpha).unwrap() + (by * beta).unwrap()).unwrap();
                let err = to_f64_vec(&(lin - bc).unwrap().abs().unwrap()).unwrap().into_iter().fold(0.0, f64::max);
                prop_assert!(err < 1e-6);
            }
        }
    }
}
