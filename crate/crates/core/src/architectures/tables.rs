//! Row-by-row layouts for every supported network.

use super::layers::{conv_bias_relu, conv_bn_relu, conv_tanh, tconv_bn_relu, LayerSpec as L, RowSpec, Stage};
use super::{ArchId, LayerTag};
use crate::wavelets::OddPolicy;

fn row(id: &str, input: [usize; 3], output: [usize; 3], layers: Vec<L>) -> RowSpec {
    RowSpec::new(id, input, output, layers)
}

fn residual(id: &str, cin: usize, cout: usize, stride: usize, hw_in: usize, hw_out: usize) -> RowSpec {
    let mut main = conv_bn_relu(cin, cout, 3, stride, 1);
    main.push(L::conv(cout, cout, 3, 1, 1));
    main.push(L::batch_norm(cout));
    let shortcut = if stride != 1 || cin != cout {
        vec![L::conv(cin, cout, 1, stride, 0), L::batch_norm(cout)]
    } else {
        vec![]
    };
    row(id, [cin, hw_in, hw_in], [cout, hw_out, hw_out], main).residual(shortcut)
}

/// Classifier trunk. The second element maps each tag to the row after which it is read.
pub(crate) fn encoder_trunk(arch: ArchId) -> (Stage, Vec<(LayerTag, &'static str)>) {
    match arch {
        ArchId::Alexnet224 => {
            let rows = vec![
                row("1a", [3, 224, 224], [64, 55, 55], conv_bias_relu(3, 64, 11, 4, 2)),
                row("2a", [64, 55, 55], [64, 27, 27], vec![L::max_pool(3, 2)]),
                row("2b", [64, 27, 27], [192, 27, 27], conv_bias_relu(64, 192, 5, 1, 2)),
                row("3a", [192, 27, 27], [192, 13, 13], vec![L::max_pool(3, 2)]),
                row("3b", [192, 13, 13], [384, 13, 13], conv_bias_relu(192, 384, 3, 1, 1)),
                row("3c", [384, 13, 13], [256, 13, 13], conv_bias_relu(384, 256, 3, 1, 1)),
                row("3d", [256, 13, 13], [256, 13, 13], conv_bias_relu(256, 256, 3, 1, 1)),
                row("4a", [256, 13, 13], [256, 6, 6], vec![L::max_pool(3, 2)]),
            ];
            let taps = vec![
                (LayerTag::Conv1, "2a"),
                (LayerTag::Conv2, "3a"),
                (LayerTag::Block3, "3d"),
                (LayerTag::Conv5, "4a"),
            ];
            (Stage::new("enc", rows), taps)
        }
        ArchId::Tiny32 => {
            let rows = vec![
                row("1a", [3, 32, 32], [64, 32, 32], conv_bn_relu(3, 64, 3, 1, 1)),
                row("2a", [64, 32, 32], [128, 16, 16], conv_bn_relu(64, 128, 3, 2, 1)),
                row("3a", [128, 16, 16], [256, 8, 8], conv_bn_relu(128, 256, 3, 2, 1)),
                row("4a", [256, 8, 8], [256, 4, 4], conv_bn_relu(256, 256, 3, 2, 1)),
            ];
            let taps = vec![
                (LayerTag::Conv1, "1a"),
                (LayerTag::Conv2, "2a"),
                (LayerTag::Block3, "3a"),
                (LayerTag::Conv5, "4a"),
            ];
            (Stage::new("enc", rows), taps)
        }
        ArchId::SmallResnet32 => {
            let rows = vec![
                row("1a", [3, 32, 32], [64, 32, 32], conv_bn_relu(3, 64, 3, 1, 1)),
                residual("2a", 64, 64, 1, 32, 32),
                residual("3a", 64, 128, 2, 32, 16),
                residual("4a", 128, 256, 2, 16, 8),
                residual("5a", 256, 256, 2, 8, 4),
            ];
            let taps = vec![
                (LayerTag::Conv1, "1a"),
                (LayerTag::Conv2, "3a"),
                (LayerTag::Block3, "4a"),
                (LayerTag::Conv5, "5a"),
            ];
            (Stage::new("enc", rows), taps)
        }
    }
}

pub(crate) fn classifier_head(channels: usize, classes: usize) -> Stage {
    Stage::new(
        "head",
        vec![row(
            "fc",
            [channels, 1, 1],
            [classes, 1, 1],
            vec![L::global_average_pool(), L::linear(channels, classes)],
        )],
    )
}

/// Decoder from the deepest features back to pixels.
pub(crate) fn mirror_decoder(arch: ArchId) -> Stage {
    let rows = match arch {
        ArchId::Alexnet224 => vec![
            row("1a", [256, 6, 6], [256, 6, 6], conv_bn_relu(256, 256, 3, 1, 1)),
            row("2a", [256, 6, 6], [256, 7, 7], tconv_bn_relu(256, 256, 1)),
            row("2b", [256, 7, 7], [256, 7, 7], conv_bn_relu(256, 256, 3, 1, 1)),
            row("3a", [256, 7, 7], [256, 14, 14], tconv_bn_relu(256, 256, 2)),
            row("3b", [256, 14, 14], [256, 14, 14], conv_bn_relu(256, 256, 3, 1, 1)),
            row("4a", [256, 14, 14], [256, 28, 28], tconv_bn_relu(256, 256, 2)),
            row("4b", [256, 28, 28], [128, 28, 28], conv_bn_relu(256, 128, 3, 1, 1)),
            row("5a", [128, 28, 28], [128, 56, 56], tconv_bn_relu(128, 128, 2)),
            row("5b", [128, 56, 56], [64, 56, 56], conv_bn_relu(128, 64, 3, 1, 1)),
            row("6a", [64, 56, 56], [64, 112, 112], tconv_bn_relu(64, 64, 2)),
            row("6b", [64, 112, 112], [32, 112, 112], conv_bn_relu(64, 32, 3, 1, 1)),
            row("7a", [32, 112, 112], [32, 224, 224], tconv_bn_relu(32, 32, 2)),
            row("7b", [32, 224, 224], [3, 224, 224], conv_bn_relu(32, 3, 3, 1, 1)),
            row("7c", [3, 224, 224], [3, 224, 224], conv_tanh(3)),
        ],
        ArchId::Tiny32 | ArchId::SmallResnet32 => vec![
            row("1a", [256, 4, 4], [256, 4, 4], conv_bn_relu(256, 256, 3, 1, 1)),
            row("2a", [256, 4, 4], [256, 8, 8], tconv_bn_relu(256, 256, 2)),
            row("2b", [256, 8, 8], [128, 8, 8], conv_bn_relu(256, 128, 3, 1, 1)),
            row("3a", [128, 8, 8], [128, 16, 16], tconv_bn_relu(128, 128, 2)),
            row("3b", [128, 16, 16], [64, 16, 16], conv_bn_relu(128, 64, 3, 1, 1)),
            row("4a", [64, 16, 16], [64, 32, 32], tconv_bn_relu(64, 64, 2)),
            row("4b", [64, 32, 32], [32, 32, 32], conv_bn_relu(64, 32, 3, 1, 1)),
            row("4c", [32, 32, 32], [3, 32, 32], conv_bn_relu(32, 3, 3, 1, 1)),
            row("4d", [3, 32, 32], [3, 32, 32], conv_tanh(3)),
        ],
    };
    Stage::new("dec", rows)
}

/// Shallow-level decoders; they upsample with nearest-neighbour interpolation instead of
/// transposed convolutions. Returns `None` when `tag` has no dedicated layout.
pub(crate) fn style_decoder(arch: ArchId, tag: LayerTag) -> Option<Stage> {
    let rows = match (arch, tag) {
        (_, LayerTag::Conv5) => return Some(mirror_decoder(arch)),
        (ArchId::Alexnet224, LayerTag::Conv1) => vec![
            row("1a", [64, 27, 27], [64, 27, 27], conv_bn_relu(64, 64, 3, 1, 1)),
            row("2a", [64, 27, 27], [64, 28, 28], tconv_bn_relu(64, 64, 1)),
            row("2b", [64, 28, 28], [64, 28, 28], conv_bn_relu(64, 64, 3, 1, 1)),
            row("3a", [64, 28, 28], [64, 56, 56], vec![L::upsample(2)]),
            row("3b", [64, 56, 56], [64, 56, 56], conv_bn_relu(64, 64, 3, 1, 1)),
            row("3c", [64, 56, 56], [32, 56, 56], conv_bn_relu(64, 32, 3, 1, 1)),
            row("4a", [32, 56, 56], [32, 112, 112], vec![L::upsample(2)]),
            row("4b", [32, 112, 112], [32, 112, 112], conv_bn_relu(32, 32, 3, 1, 1)),
            row("5a", [32, 112, 112], [32, 224, 224], vec![L::upsample(2)]),
            row("5b", [32, 224, 224], [16, 224, 224], conv_bn_relu(32, 16, 3, 1, 1)),
            row("5c", [16, 224, 224], [3, 224, 224], conv_bn_relu(16, 3, 3, 1, 1)),
            row("5d", [3, 224, 224], [3, 224, 224], conv_tanh(3)),
        ],
        (ArchId::Alexnet224, LayerTag::Conv2) => vec![
            row("1a", [192, 13, 13], [192, 13, 13], conv_bn_relu(192, 192, 3, 1, 1)),
            row("2a", [192, 13, 13], [192, 14, 14], tconv_bn_relu(192, 192, 1)),
            row("2b", [192, 14, 14], [96, 14, 14], conv_bn_relu(192, 96, 3, 1, 1)),
            row("3a", [96, 14, 14], [96, 28, 28], vec![L::upsample(2)]),
            row("3b", [96, 28, 28], [96, 28, 28], conv_bn_relu(96, 96, 3, 1, 1)),
            row("3c", [96, 28, 28], [64, 28, 28], conv_bn_relu(96, 64, 3, 1, 1)),
            row("4a", [64, 28, 28], [64, 56, 56], vec![L::upsample(2)]),
            row("4b", [64, 56, 56], [64, 56, 56], conv_bn_relu(64, 64, 3, 1, 1)),
            row("5a", [64, 56, 56], [64, 112, 112], vec![L::upsample(2)]),
            row("5b", [64, 112, 112], [64, 112, 112], conv_bn_relu(64, 64, 3, 1, 1)),
            row("6a", [64, 112, 112], [64, 224, 224], vec![L::upsample(2)]),
            row("6b", [64, 224, 224], [32, 224, 224], conv_bn_relu(64, 32, 3, 1, 1)),
            row("6c", [32, 224, 224], [3, 224, 224], conv_bn_relu(32, 3, 3, 1, 1)),
            row("6d", [3, 224, 224], [3, 224, 224], conv_tanh(3)),
        ],
        (ArchId::Tiny32 | ArchId::SmallResnet32, LayerTag::Conv1) => vec![
            row("1a", [64, 32, 32], [64, 32, 32], conv_bn_relu(64, 64, 3, 1, 1)),
            row("2a", [64, 32, 32], [32, 32, 32], conv_bn_relu(64, 32, 3, 1, 1)),
            row("2b", [32, 32, 32], [3, 32, 32], conv_bn_relu(32, 3, 3, 1, 1)),
            row("2c", [3, 32, 32], [3, 32, 32], conv_tanh(3)),
        ],
        (ArchId::Tiny32 | ArchId::SmallResnet32, LayerTag::Conv2) => vec![
            row("1a", [128, 16, 16], [128, 16, 16], conv_bn_relu(128, 128, 3, 1, 1)),
            row("2a", [128, 16, 16], [128, 32, 32], vec![L::upsample(2)]),
            row("2b", [128, 32, 32], [64, 32, 32], conv_bn_relu(128, 64, 3, 1, 1)),
            row("2c", [64, 32, 32], [32, 32, 32], conv_bn_relu(64, 32, 3, 1, 1)),
            row("2d", [32, 32, 32], [3, 32, 32], conv_bn_relu(32, 3, 3, 1, 1)),
            row("2e", [3, 32, 32], [3, 32, 32], conv_tanh(3)),
        ],
        _ => return None,
    };
    Some(Stage::new("dec", rows))
}

/// Three-part discriminator: image branch, feature branch, joint head.
pub(crate) fn discriminator(arch: ArchId) -> Vec<Stage> {
    let lrelu =
        |cin: usize, cout: usize, k: usize, s: usize| vec![L::conv(cin, cout, k, s, 1).with_bias(), L::leaky_relu()];
    let (image_rows, feature_len) = match arch {
        ArchId::Alexnet224 => (
            vec![
                row("1a", [3, 224, 224], [32, 56, 56], lrelu(3, 32, 3, 4)),
                row("2a", [32, 56, 56], [64, 54, 54], lrelu(32, 64, 5, 1)),
                row("2b", [64, 54, 54], [128, 27, 27], lrelu(64, 128, 3, 2)),
                row("3a", [128, 27, 27], [256, 27, 27], lrelu(128, 256, 3, 1)),
                row("3b", [256, 27, 27], [256, 14, 14], lrelu(256, 256, 3, 2)),
                row("4", [256, 14, 14], [256, 1, 1], vec![L::global_average_pool()]),
            ],
            256 * 6 * 6,
        ),
        ArchId::Tiny32 | ArchId::SmallResnet32 => (
            vec![
                row("1a", [3, 32, 32], [32, 16, 16], lrelu(3, 32, 3, 2)),
                row("2a", [32, 16, 16], [64, 16, 16], lrelu(32, 64, 3, 1)),
                row("2b", [64, 16, 16], [128, 8, 8], lrelu(64, 128, 3, 2)),
                row("3a", [128, 8, 8], [256, 8, 8], lrelu(128, 256, 3, 1)),
                row("3b", [256, 8, 8], [256, 4, 4], lrelu(256, 256, 3, 2)),
                row("4", [256, 4, 4], [256, 1, 1], vec![L::global_average_pool()]),
            ],
            256 * 4 * 4,
        ),
    };
    let feature_rows = vec![
        row(
            "4a",
            [feature_len, 1, 1],
            [1024, 1, 1],
            vec![L::linear(feature_len, 1024), L::relu()],
        ),
        row("4b", [1024, 1, 1], [512, 1, 1], vec![L::linear(1024, 512), L::relu()]),
    ];
    let joint_rows = vec![
        row("5a", [768, 1, 1], [512, 1, 1], vec![L::linear(768, 512), L::relu()]),
        row("5b", [512, 1, 1], [1, 1, 1], vec![L::linear(512, 1), L::sigmoid()]),
    ];
    vec![
        Stage::new("d1", image_rows),
        Stage::new("d2", feature_rows),
        Stage::new("d3", joint_rows),
    ]
}

/// Skip-connected autoencoder: the encoder trunk with pools replaced by Haar analysis and a
/// decoder whose upsampling steps are Haar synthesis with the matching details.
pub(crate) fn denoiser(arch: ArchId) -> Option<(Stage, Stage)> {
    let wp = |odd| vec![L::wavelet_pool(odd)];
    match arch {
        ArchId::Alexnet224 => {
            let t = OddPolicy::Truncate;
            let enc = vec![
                row("1a", [3, 224, 224], [64, 55, 55], conv_bias_relu(3, 64, 11, 4, 2)),
                row("2a", [64, 55, 55], [64, 27, 27], wp(t)),
                row("2b", [64, 27, 27], [192, 27, 27], conv_bias_relu(64, 192, 5, 1, 2)),
                row("3a", [192, 27, 27], [192, 13, 13], wp(t)),
                row("3b", [192, 13, 13], [384, 13, 13], conv_bias_relu(192, 384, 3, 1, 1)),
                row("3c", [384, 13, 13], [256, 13, 13], conv_bias_relu(384, 256, 3, 1, 1)),
                row("3d", [256, 13, 13], [256, 13, 13], conv_bias_relu(256, 256, 3, 1, 1)),
                row("4a", [256, 13, 13], [256, 6, 6], wp(t)),
            ];
            let dec = vec![
                row("1a", [256, 6, 6], [256, 6, 6], conv_bn_relu(256, 256, 3, 1, 1)),
                row("2a", [256, 6, 6], [256, 12, 12], vec![L::wavelet_unpool(0)]),
                row("2b", [256, 12, 12], [256, 12, 12], conv_bn_relu(256, 256, 3, 1, 1)),
                row("2c", [256, 12, 12], [256, 13, 13], vec![L::reflection_pad(1)]),
                row("2d", [256, 13, 13], [256, 13, 13], conv_bn_relu(256, 256, 3, 1, 1)),
                row("2e", [256, 13, 13], [192, 13, 13], conv_bn_relu(256, 192, 3, 1, 1)),
                row("3a", [192, 13, 13], [192, 26, 26], vec![L::wavelet_unpool(0)]),
                row("3b", [192, 26, 26], [192, 27, 27], vec![L::reflection_pad(1)]),
                row("3c", [192, 27, 27], [128, 27, 27], conv_bn_relu(192, 128, 3, 1, 1)),
                row("3d", [128, 27, 27], [64, 27, 27], conv_bn_relu(128, 64, 3, 1, 1)),
                row("4a", [64, 27, 27], [64, 55, 55], vec![L::wavelet_unpool(1)]),
                row("4b", [64, 55, 55], [64, 56, 56], vec![L::reflection_pad(1)]),
                row("4c", [64, 56, 56], [64, 56, 56], conv_bn_relu(64, 64, 3, 1, 1)),
                row("5a", [64, 56, 56], [64, 112, 112], vec![L::upsample(2)]),
                row("5b", [64, 112, 112], [32, 112, 112], conv_bn_relu(64, 32, 3, 1, 1)),
                row("5c", [32, 112, 112], [32, 112, 112], conv_bn_relu(32, 32, 3, 1, 1)),
                row("6a", [32, 112, 112], [32, 224, 224], vec![L::upsample(2)]),
                row("6b", [32, 224, 224], [3, 224, 224], conv_bn_relu(32, 3, 3, 1, 1)),
                row("6c", [3, 224, 224], [3, 224, 224], conv_bn_relu(3, 3, 3, 1, 1)),
                row("6d", [3, 224, 224], [3, 224, 224], conv_tanh(3)),
            ];
            Some((Stage::new("enc", enc), Stage::new("dec", dec)))
        }
        ArchId::Tiny32 => {
            let r = OddPolicy::Reflect;
            let enc = vec![
                row("1a", [3, 32, 32], [64, 32, 32], conv_bn_relu(3, 64, 3, 1, 1)),
                row("2p", [64, 32, 32], [64, 16, 16], wp(r)),
                row("2a", [64, 16, 16], [128, 16, 16], conv_bn_relu(64, 128, 3, 1, 1)),
                row("3a", [128, 16, 16], [256, 8, 8], conv_bn_relu(128, 256, 3, 2, 1)),
                row("4a", [256, 8, 8], [256, 4, 4], conv_bn_relu(256, 256, 3, 2, 1)),
            ];
            let dec = vec![
                row("1a", [256, 4, 4], [256, 4, 4], conv_bn_relu(256, 256, 3, 1, 1)),
                row("2a", [256, 4, 4], [256, 8, 8], tconv_bn_relu(256, 256, 2)),
                row("2b", [256, 8, 8], [128, 8, 8], conv_bn_relu(256, 128, 3, 1, 1)),
                row("3a", [128, 8, 8], [128, 16, 16], tconv_bn_relu(128, 128, 2)),
                row("3b", [128, 16, 16], [64, 16, 16], conv_bn_relu(128, 64, 3, 1, 1)),
                row("4a", [64, 16, 16], [64, 32, 32], vec![L::wavelet_unpool(0)]),
                row("4b", [64, 32, 32], [32, 32, 32], conv_bn_relu(64, 32, 3, 1, 1)),
                row("4c", [32, 32, 32], [3, 32, 32], conv_bn_relu(32, 3, 3, 1, 1)),
                row("4d", [3, 32, 32], [3, 32, 32], conv_tanh(3)),
            ];
            Some((Stage::new("enc", enc), Stage::new("dec", dec)))
        }
        ArchId::SmallResnet32 => None,
    }
}
