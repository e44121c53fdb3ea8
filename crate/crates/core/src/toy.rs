//! Tiny networks on 8×8 images and a finite-difference gradient checker, for tests and sanity
//! checks of the training code.

use candle_core::{DType, Tensor};

use crate::architectures::{build_custom, ArchId, BuildOptions, LayerSpec, LayerTag, NetRole, Network, RowSpec, Stage};
use crate::ops::to_f64_vec;
use crate::Result;

pub const SIDE: usize = 8;
pub const FEATURES: usize = 2;

fn opts(seed: u64, dtype: DType, spectral: bool) -> BuildOptions {
    BuildOptions {
        seed,
        dtype,
        num_classes: 2,
        spectral,
    }
}

/// 3×8×8 → 2×4×4, tapped as conv5; 62 parameters.
pub fn encoder(seed: u64, dtype: DType) -> Result<Network> {
    let enc = Stage::new(
        "enc",
        vec![RowSpec::new(
            "1a",
            [3, SIDE, SIDE],
            [FEATURES, SIDE / 2, SIDE / 2],
            vec![LayerSpec::conv(3, FEATURES, 3, 2, 1).with_bias(), LayerSpec::relu()],
        )],
    );
    let head = Stage::new(
        "head",
        vec![RowSpec::new(
            "fc",
            [FEATURES, SIDE / 2, SIDE / 2],
            [2, 1, 1],
            vec![LayerSpec::global_average_pool(), LayerSpec::linear(FEATURES, 2)],
        )],
    );
    build_custom(
        ArchId::Tiny32,
        NetRole::Encoder,
        vec![enc, head],
        vec![(LayerTag::Conv5, "1a".into())],
        &opts(seed, dtype, false),
    )
}

/// 2×4×4 → 3×8×8 in `[-1,1]`; 99 parameters.
pub fn decoder(seed: u64, dtype: DType, spectral: bool) -> Result<Network> {
    let dec = Stage::new(
        "dec",
        vec![RowSpec::new(
            "1a",
            [FEATURES, SIDE / 2, SIDE / 2],
            [3, SIDE, SIDE],
            vec![LayerSpec::tconv(FEATURES, 3, 4, 2, 1).with_bias(), LayerSpec::tanh()],
        )],
    );
    build_custom(
        ArchId::Tiny32,
        NetRole::Decoder,
        vec![dec],
        vec![],
        &opts(seed, dtype, spectral),
    )
}

/// Image branch, feature branch and joint head; 185 parameters.
pub fn discriminator(seed: u64, dtype: DType, spectral: bool) -> Result<Network> {
    let d1 = Stage::new(
        "d1",
        vec![
            RowSpec::new(
                "1",
                [3, SIDE, SIDE],
                [4, SIDE / 2, SIDE / 2],
                vec![LayerSpec::conv(3, 4, 3, 2, 1).with_bias(), LayerSpec::leaky_relu()],
            ),
            RowSpec::new(
                "2",
                [4, SIDE / 2, SIDE / 2],
                [4, 1, 1],
                vec![LayerSpec::global_average_pool()],
            ),
        ],
    );
    let feat = FEATURES * (SIDE / 2) * (SIDE / 2);
    let d2 = Stage::new(
        "d2",
        vec![RowSpec::new(
            "1",
            [feat, 1, 1],
            [2, 1, 1],
            vec![LayerSpec::linear(feat, 2), LayerSpec::relu()],
        )],
    );
    let d3 = Stage::new(
        "d3",
        vec![RowSpec::new(
            "1",
            [6, 1, 1],
            [1, 1, 1],
            vec![LayerSpec::linear(6, 1), LayerSpec::sigmoid()],
        )],
    );
    build_custom(
        ArchId::Tiny32,
        NetRole::Discriminator,
        vec![d1, d2, d3],
        vec![],
        &opts(seed, dtype, spectral),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all trainable entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub params: usize,
}

/// Compares the backprop gradient of `loss` with respect to every trainable parameter of `net`
/// against central differences with step `h`. `loss` must be a pure function of the current
/// parameter values.
pub fn check_gradients(net: &Network, h: f64, loss: impl Fn() -> Result<Tensor>) -> Result<GradCheck> {
    let grads = loss()?.backward()?;
    let (mut diff, mut an, mut nn, mut count) = (0.0, 0.0, 0.0, 0);
    for entry in net.params.entries().iter().filter(|e| e.trainable) {
        let base = entry.var.as_tensor().copy()?;
        let shape = base.dims().to_vec();
        let values = to_f64_vec(&base)?;
        let analytic = match grads.get(entry.var.as_tensor()) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; values.len()],
        };
        for i in 0..values.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = values.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, shape.as_slice(), base.device())?.to_dtype(base.dtype())?;
                entry.var.set(&t)?;
                Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            an += analytic[i].powi(2);
            nn += numeric.powi(2);
            count += 1;
        }
        entry.var.set(&base)?;
    }
    let scale = an.sqrt().max(nn.sqrt()).max(f64::MIN_POSITIVE);
    Ok(GradCheck {
        rel_error: diff.sqrt() / scale,
        analytic_norm: an.sqrt(),
        params: count,
    })
}
