//! Table-driven network definitions and a small interpreter that runs them.
//!
//! Every network is a list of [`Stage`]s made of numbered [`RowSpec`]s. Parameters are named
//! `<stage>.<row>.<layer>.<param>`, e.g. `dec.2a.0.weight`.

mod layers;
mod params;
pub mod spectral;
mod tables;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{LayerKind, LayerSpec, RowSpec, Stage, LEAKY_SLOPE};
pub use params::{ModelParams, ParamEntry};
pub use spectral::{spectral_normalize, SpectralState};

use crate::error::{Error, Result};
use crate::ops;
use crate::wavelets::{haar_analysis_with, haar_synthesis, WaveletSubbands};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
/// Power iterations run at construction so the first σ estimate is already sensible.
const SPECTRAL_WARMUP: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Alexnet224,
    Tiny32,
    SmallResnet32,
}

impl ArchId {
    pub const ALL: [ArchId; 3] = [ArchId::Alexnet224, ArchId::Tiny32, ArchId::SmallResnet32];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Alexnet224 => "alexnet224",
            ArchId::Tiny32 => "tiny32",
            ArchId::SmallResnet32 => "small_resnet32",
        }
    }

    /// Expected `(C, H, W)` of input images.
    pub fn input_geometry(self) -> [usize; 3] {
        match self {
            ArchId::Alexnet224 => [3, 224, 224],
            ArchId::Tiny32 | ArchId::SmallResnet32 => [3, 32, 32],
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arch_id `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    Conv1,
    Conv2,
    Block3,
    Conv5,
}

impl LayerTag {
    pub const ALL: [LayerTag; 4] = [LayerTag::Conv1, LayerTag::Conv2, LayerTag::Block3, LayerTag::Conv5];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::Conv1 => "conv1",
            LayerTag::Conv2 => "conv2",
            LayerTag::Block3 => "block3",
            LayerTag::Conv5 => "conv5",
        }
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer tag `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    Encoder,
    Decoder,
    StyleDecoder(LayerTag),
    Discriminator,
    Denoiser,
}

/// Batch-norm behaviour for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Encoder activations at a named layer.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub tag: LayerTag,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub seed: u64,
    pub dtype: DType,
    pub num_classes: usize,
    /// Spectrally normalize conv weights (decoders and discriminators).
    pub spectral: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
            num_classes: 10,
            spectral: true,
        }
    }
}

impl BuildOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchId,
    pub role: NetRole,
    pub stages: Vec<Stage>,
    /// Encoder rows after which each tag is read.
    pub taps: Vec<(LayerTag, String)>,
    pub params: ModelParams,
}

/// Anything that maps `[0,1]` images to a feature map.
pub trait FeatureExtractor {
    fn extract(&self, x: &Tensor) -> Result<Tensor>;
}

/// An encoder read at one tag with inference-mode batch norm.
#[derive(Debug, Clone, Copy)]
pub struct EncoderTap<'a> {
    pub net: &'a Network,
    pub tag: LayerTag,
}

impl FeatureExtractor for EncoderTap<'_> {
    fn extract(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward_features(x, self.tag, Mode::Eval)?.tensor)
    }
}

pub fn build_encoder(arch: ArchId, opts: &BuildOptions) -> Result<Network> {
    let (trunk, taps) = tables::encoder_trunk(arch);
    let head = tables::classifier_head(256, opts.num_classes);
    let bottleneck = trunk.rows.last().map(|r| r.output).unwrap_or_default();
    let taps = taps.into_iter().map(|(t, r)| (t, r.to_string())).collect();
    let mut params = ModelParams::new(format!("{arch}/encoder"), arch.input_geometry(), bottleneck);
    init_params(&mut params, &[&trunk, &head], opts, false)?;
    Ok(Network {
        arch,
        role: NetRole::Encoder,
        stages: vec![trunk, head],
        taps,
        params,
    })
}

pub fn build_mirror_decoder(arch: ArchId, opts: &BuildOptions) -> Result<Network> {
    decoder_network(arch, NetRole::Decoder, tables::mirror_decoder(arch), opts)
}

pub fn build_style_decoder(arch: ArchId, level: LayerTag, opts: &BuildOptions) -> Result<Network> {
    let stage = tables::style_decoder(arch, level)
        .ok_or_else(|| Error::Config(format!("no style decoder for {arch} at {level}")))?;
    decoder_network(arch, NetRole::StyleDecoder(level), stage, opts)
}

fn decoder_network(arch: ArchId, role: NetRole, stage: Stage, opts: &BuildOptions) -> Result<Network> {
    let input = stage.rows[0].input;
    let mut params = ModelParams::new(format!("{arch}/{}", role_label(role)), input, input);
    init_params(&mut params, &[&stage], opts, opts.spectral)?;
    Ok(Network {
        arch,
        role,
        stages: vec![stage],
        taps: vec![],
        params,
    })
}

pub fn build_discriminator(arch: ArchId, opts: &BuildOptions) -> Result<Network> {
    let stages = tables::discriminator(arch);
    let feat = stages[1].rows[0].input;
    let mut params = ModelParams::new(format!("{arch}/discriminator"), arch.input_geometry(), feat);
    let refs: Vec<&Stage> = stages.iter().collect();
    init_params(&mut params, &refs, opts, opts.spectral)?;
    Ok(Network {
        arch,
        role: NetRole::Discriminator,
        stages,
        taps: vec![],
        params,
    })
}

/// Skip-connected autoencoder. Encoder weights share names with [`build_encoder`], so a trained
/// encoder can be copied in with [`ModelParams::copy_matching`].
pub fn build_denoiser(arch: ArchId, opts: &BuildOptions) -> Result<Network> {
    let (enc, dec) = tables::denoiser(arch).ok_or_else(|| Error::Config(format!("no denoiser layout for {arch}")))?;
    let bottleneck = enc.rows.last().map(|r| r.output).unwrap_or_default();
    let mut params = ModelParams::new(format!("{arch}/denoiser"), arch.input_geometry(), bottleneck);
    init_params(&mut params, &[&enc], opts, false)?;
    let mut dec_params = ModelParams::new("", [0; 3], [0; 3]);
    init_params(
        &mut dec_params,
        &[&dec],
        &BuildOptions {
            seed: opts.seed ^ 0x9e37,
            ..*opts
        },
        opts.spectral,
    )?;
    for e in dec_params.entries() {
        params.insert(e.name.clone(), e.var.as_tensor().clone(), e.trainable)?;
    }
    params.spectral = dec_params.spectral.clone();
    Ok(Network {
        arch,
        role: NetRole::Denoiser,
        stages: vec![enc, dec],
        taps: vec![],
        params,
    })
}

/// Assembles a network from hand-written stages. Input geometry is taken from the first row,
/// the bottleneck from the last row of the first stage. Spectral norm follows `opts.spectral`.
pub fn build_custom(
    arch: ArchId,
    role: NetRole,
    stages: Vec<Stage>,
    taps: Vec<(LayerTag, String)>,
    opts: &BuildOptions,
) -> Result<Network> {
    let first = stages
        .first()
        .and_then(|s| s.rows.first())
        .ok_or_else(|| Error::Config("custom network has no rows".into()))?;
    let bottleneck = stages[0].rows.last().map(|r| r.output).unwrap_or_default();
    let mut params = ModelParams::new(format!("{arch}/custom-{}", role_label(role)), first.input, bottleneck);
    let refs: Vec<&Stage> = stages.iter().collect();
    init_params(&mut params, &refs, opts, opts.spectral)?;
    Ok(Network {
        arch,
        role,
        stages,
        taps,
        params,
    })
}

pub fn count_parameters(params: &ModelParams) -> usize {
    params.count_trainable()
}

fn role_label(role: NetRole) -> String {
    match role {
        NetRole::Encoder => "encoder".into(),
        NetRole::Decoder => "decoder".into(),
        NetRole::StyleDecoder(t) => format!("style-decoder-{t}"),
        NetRole::Discriminator => "discriminator".into(),
        NetRole::Denoiser => "denoiser".into(),
    }
}

fn layer_prefix(stage: &str, row: &str, branch: Option<&str>, idx: usize) -> String {
    match branch {
        Some(b) => format!("{stage}.{row}.{b}.{idx}"),
        None => format!("{stage}.{row}.{idx}"),
    }
}

fn init_params(params: &mut ModelParams, stages: &[&Stage], opts: &BuildOptions, spectral: bool) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dev = Device::Cpu;
    let dt = opts.dtype;
    for stage in stages {
        for row in &stage.rows {
            let branches = std::iter::once((None, &row.layers)).chain(row.shortcut.iter().map(|s| (Some("skip"), s)));
            for (branch, layers) in branches {
                for (i, l) in layers.iter().enumerate() {
                    let p = layer_prefix(&stage.name, &row.id, branch, i);
                    match l.kind {
                        LayerKind::Conv | LayerKind::TransposedConv => {
                            let (kh, kw) = l.kernel;
                            let fan_in = l.in_channels * kh * kw;
                            let shape = if l.kind == LayerKind::Conv {
                                [l.out_channels, l.in_channels, kh, kw]
                            } else {
                                [l.in_channels, l.out_channels, kh, kw]
                            };
                            let w = ops::randn(&mut rng, &shape, (2.0 / fan_in as f64).sqrt(), dt, &dev)?;
                            if spectral {
                                let m = spectral::weight_matrix(&w, l.kind == LayerKind::TransposedConv)?;
                                let (r, c) = m.dims2()?;
                                let mut st = SpectralState::random(&mut rng, r, c, dt)?;
                                for _ in 0..SPECTRAL_WARMUP {
                                    st = st.step(&m)?;
                                }
                                params.insert(format!("{p}.weight_u"), st.u, false)?;
                                params.insert(format!("{p}.weight_v"), st.v, false)?;
                                params.spectral.push(format!("{p}.weight"));
                            }
                            params.insert(format!("{p}.weight"), w, true)?;
                            if l.bias {
                                params.insert(format!("{p}.bias"), Tensor::zeros(l.out_channels, dt, &dev)?, true)?;
                            }
                        }
                        LayerKind::Linear => {
                            let std = (1.0 / (3.0 * l.in_channels as f64)).sqrt();
                            let w = ops::randn(&mut rng, &[l.out_channels, l.in_channels], std, dt, &dev)?;
                            params.insert(format!("{p}.weight"), w, true)?;
                            params.insert(format!("{p}.bias"), Tensor::zeros(l.out_channels, dt, &dev)?, true)?;
                        }
                        LayerKind::BatchNorm => {
                            let c = l.in_channels;
                            params.insert(format!("{p}.weight"), Tensor::ones(c, dt, &dev)?, true)?;
                            params.insert(format!("{p}.bias"), Tensor::zeros(c, dt, &dev)?, true)?;
                            params.insert(format!("{p}.running_mean"), Tensor::zeros(c, dt, &dev)?, false)?;
                            params.insert(format!("{p}.running_var"), Tensor::ones(c, dt, &dev)?, false)?;
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    Ok(())
}

/// Wavelet details pushed by pooling layers and consumed (last in, first out) by unpooling.
#[derive(Debug, Default)]
pub struct SkipStack {
    pub levels: Vec<WaveletSubbands>,
}

impl Network {
    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn stage(&self, name: &str) -> Result<&Stage> {
        self.stages
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("network has no stage `{name}`")))
    }

    pub fn tags(&self) -> Vec<LayerTag> {
        self.taps.iter().map(|(t, _)| *t).collect()
    }

    fn tap_row(&self, tag: LayerTag) -> Result<usize> {
        let (_, row) = self
            .taps
            .iter()
            .find(|(t, _)| *t == tag)
            .ok_or_else(|| Error::Config(format!("layer tag `{tag}` does not exist for {}", self.arch)))?;
        self.stage("enc")?
            .row_index(row)
            .ok_or_else(|| Error::Config(format!("tap row `{row}` missing")))
    }

    /// Declared `(C, H, W)` of the features at `tag`.
    pub fn feature_geometry(&self, tag: LayerTag) -> Result<[usize; 3]> {
        let idx = self.tap_row(tag)?;
        Ok(self.stage("enc")?.rows[idx].output)
    }

    /// Advances every spectral-norm power iteration by one step.
    pub fn spectral_step(&self) -> Result<()> {
        for name in &self.params.spectral {
            let w = self.params.tensor(name)?;
            let transposed = self.is_transposed(name);
            let state = self.spectral_state(name)?;
            let m = spectral::weight_matrix(&w, transposed)?;
            let next = state.step(&m)?;
            self.params.set(&format!("{name}_u"), &next.u)?;
            self.params.set(&format!("{name}_v"), &next.v)?;
        }
        Ok(())
    }

    fn spectral_state(&self, name: &str) -> Result<SpectralState> {
        Ok(SpectralState {
            u: self.params.tensor(&format!("{name}_u"))?,
            v: self.params.tensor(&format!("{name}_v"))?,
        })
    }

    fn is_transposed(&self, weight_name: &str) -> bool {
        self.find_layer(weight_name)
            .map(|l| l.kind == LayerKind::TransposedConv)
            .unwrap_or(false)
    }

    fn find_layer(&self, param_name: &str) -> Option<&LayerSpec> {
        let parts: Vec<&str> = param_name.split('.').collect();
        let stage = self.stages.iter().find(|s| s.name == parts[0])?;
        let row = stage
            .rows
            .iter()
            .find(|r| r.id == parts.get(1).copied().unwrap_or(""))?;
        match parts.as_slice() {
            [_, _, "skip", i, ..] => row.shortcut.as_ref()?.get(i.parse::<usize>().ok()?),
            [_, _, i, ..] => row.layers.get(i.parse::<usize>().ok()?),
            _ => None,
        }
    }

    fn weight(&self, name: &str, transposed: bool) -> Result<Tensor> {
        let w = self.params.tensor(name)?;
        if self.params.is_spectral(name) {
            let state = self.spectral_state(name)?;
            return spectral::apply_spectral(&w, &state, transposed);
        }
        Ok(w)
    }

    fn cast(&self, x: &Tensor) -> Result<Tensor> {
        let dt = self.dtype();
        if x.dtype() == dt {
            Ok(x.clone())
        } else {
            Ok(x.to_dtype(dt)?)
        }
    }

    /// Encoder activations at `tag` for `[0,1]` images.
    pub fn forward_features(&self, x: &Tensor, tag: LayerTag, mode: Mode) -> Result<FeatureMap> {
        let mut out = self.forward_taps(x, &[tag], mode)?;
        Ok(out.remove(0))
    }

    /// Several taps from a single pass; returned in the order requested.
    pub fn forward_taps(&self, x: &Tensor, tags: &[LayerTag], mode: Mode) -> Result<Vec<FeatureMap>> {
        let enc = self.stage("enc")?;
        let rows: Vec<usize> = tags.iter().map(|t| self.tap_row(*t)).collect::<Result<_>>()?;
        let last = rows.iter().copied().max().unwrap_or(0);
        let mut h = self.cast(x)?;
        let mut skips = SkipStack::default();
        let mut found: Vec<Option<Tensor>> = vec![None; tags.len()];
        for (i, row) in enc.rows.iter().enumerate().take(last + 1) {
            h = self.run_row(&enc.name, row, &h, &mut skips, mode)?;
            for (slot, r) in found.iter_mut().zip(&rows) {
                if *r == i {
                    *slot = Some(h.clone());
                }
            }
        }
        Ok(found
            .into_iter()
            .zip(tags)
            .map(|(t, tag)| FeatureMap {
                tensor: t.expect("every tap row is visited"),
                tag: *tag,
            })
            .collect())
    }

    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.run_stage("enc", &self.cast(x)?, &mut SkipStack::default(), mode)?;
        self.run_stage("head", &h, &mut SkipStack::default(), mode)
    }

    /// Features to `[-1,1]` images.
    pub fn decode(&self, f: &Tensor, mode: Mode) -> Result<Tensor> {
        self.run_stage("dec", &self.cast(f)?, &mut SkipStack::default(), mode)
    }

    /// Probability that `(image, features)` is a real pair, one value per sample.
    pub fn discriminate(&self, image: &Tensor, features: &Tensor, mode: Mode) -> Result<Tensor> {
        let [_, h, w] = self.params.input_geometry;
        let mut img = self.cast(image)?;
        let (_, _, ih, iw) = img.dims4()?;
        if (ih, iw) != (h, w) {
            img = ops::resize_bilinear(&img, h, w)?;
        }
        let n = img.dim(0)?;
        let d1 = self
            .run_stage("d1", &img, &mut SkipStack::default(), mode)?
            .reshape((n, ()))?;
        let d2 = self.run_stage("d2", &self.cast(features)?, &mut SkipStack::default(), mode)?;
        let joint = Tensor::cat(&[&d1, &d2], 1)?;
        Ok(self
            .run_stage("d3", &joint, &mut SkipStack::default(), mode)?
            .reshape(n)?)
    }

    /// Full skip-connected pass for the denoiser; input in `[0,1]`, output in `[-1,1]`.
    pub fn denoise_forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.denoise_forward_split(x, mode, mode)
    }

    /// As [`Network::denoise_forward`] with separate batch-norm modes for the encoder half and
    /// the decoder half, so a frozen encoder can keep its running statistics.
    pub fn denoise_forward_split(&self, x: &Tensor, enc_mode: Mode, dec_mode: Mode) -> Result<Tensor> {
        let mut skips = SkipStack::default();
        let h = self.run_stage("enc", &self.cast(x)?, &mut skips, enc_mode)?;
        let out = self.run_stage("dec", &h, &mut skips, dec_mode)?;
        if !skips.levels.is_empty() {
            return Err(Error::Config(format!(
                "{} unconsumed wavelet skip levels",
                skips.levels.len()
            )));
        }
        Ok(out)
    }

    pub fn run_stage(&self, stage: &str, x: &Tensor, skips: &mut SkipStack, mode: Mode) -> Result<Tensor> {
        let stage = self.stage(stage)?;
        let mut h = x.clone();
        for row in &stage.rows {
            h = self.run_row(&stage.name, row, &h, skips, mode)?;
        }
        Ok(h)
    }

    /// Runs a single row; used by the table shape tests.
    pub fn run_row_by_id(
        &self,
        stage: &str,
        row: &str,
        x: &Tensor,
        skips: &mut SkipStack,
        mode: Mode,
    ) -> Result<Tensor> {
        let s = self.stage(stage)?;
        let r = s
            .rows
            .iter()
            .find(|r| r.id == row)
            .ok_or_else(|| Error::Config(format!("stage `{stage}` has no row `{row}`")))?;
        self.run_row(stage, r, &self.cast(x)?, skips, mode)
    }

    fn run_row(&self, stage: &str, row: &RowSpec, x: &Tensor, skips: &mut SkipStack, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in row.layers.iter().enumerate() {
            h = self.run_layer(&layer_prefix(stage, &row.id, None, i), l, &h, skips, mode)?;
        }
        if let Some(shortcut) = &row.shortcut {
            let mut s = x.clone();
            for (i, l) in shortcut.iter().enumerate() {
                s = self.run_layer(&layer_prefix(stage, &row.id, Some("skip"), i), l, &s, skips, mode)?;
            }
            if s.dims() != h.dims() {
                return Err(Error::shape(
                    format!("{stage}.{}", row.id),
                    format!(
                        "residual branch {:?} does not match main branch {:?}",
                        s.dims(),
                        h.dims()
                    ),
                ));
            }
            h = (h + s)?.relu()?;
        }
        Ok(h)
    }

    fn run_layer(&self, name: &str, l: &LayerSpec, x: &Tensor, skips: &mut SkipStack, mode: Mode) -> Result<Tensor> {
        let label = format!("{name} ({})", l.kind.label());
        self.layer_impl(name, l, x, skips, mode).map_err(|e| match e {
            Error::Shape { .. } => e,
            other => Error::shape(label, other.to_string()),
        })
    }

    fn check_spatial(&self, name: &str, l: &LayerSpec, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let label = format!("{name} ({})", l.kind.label());
        let dims = x
            .dims4()
            .map_err(|_| Error::shape(&label, format!("expected a rank-4 input, got {:?}", x.dims())))?;
        let (_, c, h, w) = dims;
        if l.in_channels != 0 && c != l.in_channels {
            return Err(Error::shape(
                label,
                format!("expected {} channels, got {c}", l.in_channels),
            ));
        }
        let (kh, kw) = l.kernel;
        if matches!(l.kind, LayerKind::Conv | LayerKind::MaxPool) && (h + 2 * l.pad < kh || w + 2 * l.pad < kw) {
            return Err(Error::shape(
                label,
                format!("input {h}x{w} is smaller than the {kh}x{kw} window"),
            ));
        }
        Ok(dims)
    }

    fn layer_impl(&self, name: &str, l: &LayerSpec, x: &Tensor, skips: &mut SkipStack, mode: Mode) -> Result<Tensor> {
        let bias = |this: &Self| -> Result<Option<Tensor>> {
            if l.bias {
                Ok(Some(this.params.tensor(&format!("{name}.bias"))?))
            } else {
                Ok(None)
            }
        };
        match l.kind {
            LayerKind::Conv => {
                self.check_spatial(name, l, x)?;
                let w = self.weight(&format!("{name}.weight"), false)?;
                ops::conv2d(x, &w, bias(self)?.as_ref(), l.stride, l.pad)
            }
            LayerKind::TransposedConv => {
                self.check_spatial(name, l, x)?;
                let w = self.weight(&format!("{name}.weight"), true)?;
                ops::conv_transpose2d(x, &w, bias(self)?.as_ref(), l.stride, l.pad)
            }
            LayerKind::BatchNorm => {
                self.check_spatial(name, l, x)?;
                self.batch_norm(name, x, mode)
            }
            LayerKind::Relu => Ok(x.relu()?),
            LayerKind::LeakyRelu => ops::leaky_relu(x, LEAKY_SLOPE),
            LayerKind::Tanh => Ok(x.tanh()?),
            LayerKind::Sigmoid => ops::sigmoid(x),
            LayerKind::NearestUpsample => {
                let (_, _, h, w) = self.check_spatial(name, l, x)?;
                Ok(x.upsample_nearest2d(h * l.stride, w * l.stride)?)
            }
            LayerKind::AveragePool => {
                self.check_spatial(name, l, x)?;
                if l.kernel == (0, 0) {
                    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
                } else {
                    Ok(x.avg_pool2d_with_stride(l.kernel, (l.stride, l.stride))?)
                }
            }
            LayerKind::MaxPool => {
                self.check_spatial(name, l, x)?;
                ops::max_pool2d(x, l.kernel.0, l.stride)
            }
            LayerKind::WaveletPool => {
                self.check_spatial(name, l, x)?;
                let s = haar_analysis_with(x, l.odd)?;
                let ll = s.ll.clone();
                skips.levels.push(s);
                Ok(ll)
            }
            LayerKind::WaveletUnpool => {
                let (_, c, h, w) = self.check_spatial(name, l, x)?;
                let skip = skips
                    .levels
                    .pop()
                    .ok_or_else(|| Error::shape(name, "no pooled details left to unpool with"))?;
                let (_, sc, sh, sw) = skip.dims();
                if (sc, sh, sw) != (c, h, w) {
                    return Err(Error::shape(
                        name,
                        format!("skip details are {sc}x{sh}x{sw}, decoder activation is {c}x{h}x{w}"),
                    ));
                }
                let merged = WaveletSubbands { ll: x.clone(), ..skip };
                let y = haar_synthesis(&merged)?;
                if l.pad > 0 {
                    ops::reflection_pad(&y, (0, l.pad, 0, l.pad))
                } else {
                    Ok(y)
                }
            }
            LayerKind::ReflectionPad => {
                self.check_spatial(name, l, x)?;
                ops::reflection_pad(x, (0, l.pad, 0, l.pad))
            }
            LayerKind::Linear => {
                let n = x.dim(0)?;
                let flat = x.reshape((n, ()))?;
                let features = flat.dim(1)?;
                if features != l.in_channels {
                    return Err(Error::shape(
                        format!("{name} (linear)"),
                        format!("expected {} input features, got {features}", l.in_channels),
                    ));
                }
                let w = self.params.tensor(&format!("{name}.weight"))?;
                let b = self.params.tensor(&format!("{name}.bias"))?;
                Ok(flat.matmul(&w.t()?)?.broadcast_add(&b)?)
            }
        }
    }

    fn batch_norm(&self, name: &str, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let gamma = self.params.tensor(&format!("{name}.weight"))?.reshape((1, c, 1, 1))?;
        let beta = self.params.tensor(&format!("{name}.bias"))?.reshape((1, c, 1, 1))?;
        let rm_name = format!("{name}.running_mean");
        let rv_name = format!("{name}.running_var");
        let (mean, var) = match mode {
            Mode::Eval => (
                self.params.tensor(&rm_name)?.reshape((1, c, 1, 1))?,
                self.params.tensor(&rv_name)?.reshape((1, c, 1, 1))?,
            ),
            Mode::Train => {
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let count = x.elem_count() / c;
                let unbiased = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                let rm = self.params.tensor(&rm_name)?;
                let rv = self.params.tensor(&rv_name)?;
                let new_rm = ((rm * (1.0 - BN_MOMENTUM))? + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
                let new_rv = ((rv * (1.0 - BN_MOMENTUM))? + (var.detach().flatten_all()? * (BN_MOMENTUM * unbiased))?)?;
                self.params.set(&rm_name, &new_rm)?;
                self.params.set(&rv_name, &new_rv)?;
                (mean, var)
            }
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}
