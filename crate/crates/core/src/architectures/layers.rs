use serde::{Deserialize, Serialize};

use crate::wavelets::OddPolicy;

/// Negative slope used by every leaky ReLU in the discriminators.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
    BatchNorm,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    /// Nearest-neighbour upsampling by `stride`.
    NearestUpsample,
    /// `kernel == (0, 0)` means global average pooling.
    AveragePool,
    MaxPool,
    WaveletPool,
    /// Haar synthesis using the most recent pooled details; `pad` reflection-pads bottom/right after.
    WaveletUnpool,
    /// Reflection-pads `pad` rows/columns on the bottom and right.
    ReflectionPad,
    Linear,
}

impl LayerKind {
    pub fn has_weight(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::TransposedConv | LayerKind::BatchNorm | LayerKind::Linear
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::TransposedConv => "tconv",
            LayerKind::BatchNorm => "batch-norm",
            LayerKind::Relu => "relu",
            LayerKind::LeakyRelu => "leaky-relu",
            LayerKind::Tanh => "tanh",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::NearestUpsample => "nearest-upsample",
            LayerKind::AveragePool => "average-pool",
            LayerKind::MaxPool => "max-pool",
            LayerKind::WaveletPool => "wavelet-pool",
            LayerKind::WaveletUnpool => "wavelet-unpool",
            LayerKind::ReflectionPad => "reflection-pad",
            LayerKind::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub bias: bool,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub odd: OddPolicy,
}

impl LayerSpec {
    fn base(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            kernel: (0, 0),
            bias: false,
            stride: 1,
            pad: 0,
            in_channels: channels,
            out_channels: channels,
            odd: OddPolicy::default(),
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride,
            pad,
            in_channels,
            out_channels,
            ..Self::base(LayerKind::Conv, 0)
        }
    }

    pub fn tconv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::TransposedConv,
            ..Self::conv(in_channels, out_channels, kernel, stride, pad)
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Self {
            bias: true,
            in_channels: in_features,
            out_channels: out_features,
            ..Self::base(LayerKind::Linear, 0)
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn batch_norm(channels: usize) -> Self {
        Self::base(LayerKind::BatchNorm, channels)
    }

    pub fn relu() -> Self {
        Self::base(LayerKind::Relu, 0)
    }

    pub fn leaky_relu() -> Self {
        Self::base(LayerKind::LeakyRelu, 0)
    }

    pub fn tanh() -> Self {
        Self::base(LayerKind::Tanh, 0)
    }

    pub fn sigmoid() -> Self {
        Self::base(LayerKind::Sigmoid, 0)
    }

    pub fn upsample(scale: usize) -> Self {
        Self {
            stride: scale,
            ..Self::base(LayerKind::NearestUpsample, 0)
        }
    }

    pub fn global_average_pool() -> Self {
        Self::base(LayerKind::AveragePool, 0)
    }

    pub fn max_pool(kernel: usize, stride: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride,
            ..Self::base(LayerKind::MaxPool, 0)
        }
    }

    pub fn wavelet_pool(odd: OddPolicy) -> Self {
        Self {
            stride: 2,
            odd,
            ..Self::base(LayerKind::WaveletPool, 0)
        }
    }

    pub fn wavelet_unpool(pad: usize) -> Self {
        Self {
            stride: 2,
            pad,
            ..Self::base(LayerKind::WaveletUnpool, 0)
        }
    }

    pub fn reflection_pad(pad: usize) -> Self {
        Self {
            pad,
            ..Self::base(LayerKind::ReflectionPad, 0)
        }
    }
}

/// One numbered row of an architecture table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub id: String,
    pub layers: Vec<LayerSpec>,
    /// Projection applied to the row input before the residual sum; `Some(vec![])` is identity.
    #[serde(default)]
    pub shortcut: Option<Vec<LayerSpec>>,
    /// Declared `(C, H, W)`; fully connected rows use `(features, 1, 1)`.
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl RowSpec {
    pub fn new(id: &str, input: [usize; 3], output: [usize; 3], layers: Vec<LayerSpec>) -> Self {
        Self {
            id: id.to_string(),
            layers,
            shortcut: None,
            input,
            output,
        }
    }

    pub fn residual(mut self, shortcut: Vec<LayerSpec>) -> Self {
        self.shortcut = Some(shortcut);
        self
    }

    pub fn is_linear(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::Linear)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub rows: Vec<RowSpec>,
}

impl Stage {
    pub fn new(name: &str, rows: Vec<RowSpec>) -> Self {
        Self {
            name: name.to_string(),
            rows,
        }
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.id == id)
    }
}

pub(crate) fn conv_bn_relu(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(cin, cout, kernel, stride, pad),
        LayerSpec::batch_norm(cout),
        LayerSpec::relu(),
    ]
}

pub(crate) fn tconv_bn_relu(cin: usize, cout: usize, stride: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::tconv(cin, cout, 4, stride, 1),
        LayerSpec::batch_norm(cout),
        LayerSpec::relu(),
    ]
}

pub(crate) fn conv_bias_relu(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(cin, cout, kernel, stride, pad).with_bias(),
        LayerSpec::relu(),
    ]
}

pub(crate) fn conv_tanh(channels: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::conv(channels, 3, 3, 1, 1).with_bias(), LayerSpec::tanh()]
}
