//! Reference architectures and their default three-way partitions.
//!
//! Each architecture is described as an ordered list of blocks; a partition
//! is a pair of cut points `(a, b)` into that list with
//! `beginning = blocks[..a]`, `intermediate = blocks[a..b]`, `final = blocks[b..]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{
    BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Flatten, GlobalAvgPool, Layer, Linear,
    MaxPool2d, Relu, Reshape, Residual, Sigmoid,
};
use crate::model::PartitionedModel;
use crate::sequential::Sequential;
use crate::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Mlp,
    Cnn,
    Vgg16,
    Resnet18,
    AutoencoderAe,
    /// Hand-assembled segments (tests, generators).
    Custom,
}

impl ArchId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Mlp => "mlp",
            ArchId::Cnn => "cnn",
            ArchId::Vgg16 => "vgg16",
            ArchId::Resnet18 => "resnet18",
            ArchId::AutoencoderAe => "autoencoder_ae",
            ArchId::Custom => "custom",
        }
    }

    /// Default cut points (see module docs).
    pub fn default_cuts(self) -> (usize, usize) {
        match self {
            ArchId::Mlp => (1, 2),
            ArchId::Cnn => (2, 4),
            ArchId::Vgg16 => (2, 5),
            ArchId::Resnet18 => (2, 4),
            ArchId::AutoencoderAe => (2, 4),
            ArchId::Custom => (1, 2),
        }
    }
}

impl std::str::FromStr for ArchId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(ArchId::Mlp),
            "cnn" => Ok(ArchId::Cnn),
            "vgg16" => Ok(ArchId::Vgg16),
            "resnet18" => Ok(ArchId::Resnet18),
            "autoencoder_ae" | "ae" => Ok(ArchId::AutoencoderAe),
            other => Err(format!("unknown architecture '{other}'")),
        }
    }
}

/// Architecture plus its size knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: ArchId,
    /// Hidden width of MLP layers and dense heads.
    pub hidden: usize,
    /// Base channel count of convolutional stages.
    pub width: usize,
    /// Dropout probability in dense heads.
    pub dropout: f64,
}

impl ArchSpec {
    pub fn mlp(hidden: usize) -> Self {
        Self {
            arch: ArchId::Mlp,
            hidden,
            width: 0,
            dropout: 0.0,
        }
    }

    pub fn cnn(width: usize, hidden: usize) -> Self {
        Self {
            arch: ArchId::Cnn,
            hidden,
            width,
            dropout: 0.25,
        }
    }

    pub fn vgg16(width: usize) -> Self {
        Self {
            arch: ArchId::Vgg16,
            hidden: 8 * width,
            width,
            dropout: 0.5,
        }
    }

    pub fn resnet18(width: usize) -> Self {
        Self {
            arch: ArchId::Resnet18,
            hidden: 0,
            width,
            dropout: 0.0,
        }
    }

    pub fn autoencoder(width: usize, hidden: usize) -> Self {
        Self {
            arch: ArchId::AutoencoderAe,
            hidden,
            width,
            dropout: 0.0,
        }
    }

    /// Full-size defaults per architecture.
    pub fn standard(arch: ArchId) -> Self {
        match arch {
            ArchId::Mlp | ArchId::Custom => Self::mlp(512),
            ArchId::Cnn => Self::cnn(32, 256),
            ArchId::Vgg16 => Self::vgg16(64),
            ArchId::Resnet18 => Self::resnet18(64),
            ArchId::AutoencoderAe => Self::autoencoder(32, 256),
        }
    }
}

/// Classifier heads that can replace the final segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadArch {
    /// Flatten followed by two linear layers.
    Mlp { hidden: usize },
    /// Two conv-bn-relu stages, max-pool, then a linear classifier.
    Cnn { width: usize },
}

fn relu() -> Layer {
    Layer::Relu(Relu::default())
}

fn conv_bn_relu(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    vec![
        Layer::Conv2d(Conv2d::new(cin, cout, 3, 1, 1, true, rng)),
        Layer::BatchNorm2d(BatchNorm2d::new(cout)),
        relu(),
    ]
}

fn dense_head(inputs: usize, hidden: usize, classes: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut v = vec![
        Layer::Flatten(Flatten::default()),
        Layer::Linear(Linear::new(inputs, hidden, true, rng)),
        relu(),
    ];
    if dropout > 0.0 {
        v.push(Layer::Dropout(Dropout::new(dropout)));
    }
    v.push(Layer::Linear(Linear::new(hidden, classes, true, rng)));
    v
}

fn arch_err(spec: &ArchSpec, input: &[usize], reason: impl Into<String>) -> NnError {
    NnError::ArchInput {
        arch: spec.arch.as_str().into(),
        input: input.to_vec(),
        reason: reason.into(),
    }
}

fn blocks(spec: &ArchSpec, input: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Layer>>> {
    if input.len() != 3 || input.iter().any(|&d| d == 0) {
        return Err(arch_err(spec, input, "input must be [channels, height, width]"));
    }
    let (c, h, w) = (input[0], input[1], input[2]);
    let b = match spec.arch {
        ArchId::Mlp | ArchId::Custom => {
            let d = c * h * w;
            vec![
                vec![
                    Layer::Flatten(Flatten::default()),
                    Layer::Linear(Linear::new(d, spec.hidden, true, rng)),
                    relu(),
                ],
                vec![Layer::Linear(Linear::new(spec.hidden, spec.hidden, true, rng)), relu()],
                vec![Layer::Linear(Linear::new(spec.hidden, classes, true, rng))],
            ]
        }
        ArchId::Cnn => {
            if h < 2 || w < 2 {
                return Err(arch_err(spec, input, "needs at least 2x2 spatial input"));
            }
            let wd = spec.width;
            let mut last = conv_bn_relu(2 * wd, 2 * wd, rng);
            last.push(Layer::MaxPool2d(MaxPool2d::new(2)));
            vec![
                conv_bn_relu(c, wd, rng),
                conv_bn_relu(wd, wd, rng),
                conv_bn_relu(wd, 2 * wd, rng),
                last,
                dense_head(2 * wd * (h / 2) * (w / 2), spec.hidden, classes, spec.dropout, rng),
            ]
        }
        ArchId::Vgg16 => {
            if h % 32 != 0 || w % 32 != 0 {
                return Err(arch_err(spec, input, "spatial size must be a multiple of 32"));
            }
            let wd = spec.width;
            let stages: [&[usize]; 5] = [
                &[wd, wd],
                &[2 * wd, 2 * wd],
                &[4 * wd, 4 * wd, 4 * wd],
                &[8 * wd, 8 * wd, 8 * wd],
                &[8 * wd, 8 * wd, 8 * wd],
            ];
            let mut out = Vec::new();
            let mut cin = c;
            for stage in stages {
                let mut blk = Vec::new();
                for &cout in stage {
                    blk.extend(conv_bn_relu(cin, cout, rng));
                    cin = cout;
                }
                blk.push(Layer::MaxPool2d(MaxPool2d::new(2)));
                out.push(blk);
            }
            let flat = cin * (h / 32) * (w / 32);
            out.push(dense_head(flat, spec.hidden, classes, spec.dropout, rng));
            out
        }
        ArchId::Resnet18 => {
            let wd = spec.width;
            let stage = |cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng| {
                vec![
                    Layer::Residual(Box::new(Residual::basic(cin, cout, stride, rng))),
                    Layer::Residual(Box::new(Residual::basic(cout, cout, 1, rng))),
                ]
            };
            let stem = vec![
                Layer::Conv2d(Conv2d::new(c, wd, 3, 1, 1, false, rng)),
                Layer::BatchNorm2d(BatchNorm2d::new(wd)),
                relu(),
            ];
            vec![
                stem,
                stage(wd, wd, 1, rng),
                stage(wd, 2 * wd, 2, rng),
                stage(2 * wd, 4 * wd, 2, rng),
                stage(4 * wd, 8 * wd, 2, rng),
                vec![
                    Layer::GlobalAvgPool(GlobalAvgPool::default()),
                    Layer::Linear(Linear::new(8 * wd, classes, true, rng)),
                ],
            ]
        }
        ArchId::AutoencoderAe => {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(arch_err(spec, input, "spatial size must be a multiple of 4"));
            }
            let wd = spec.width;
            vec![
                vec![Layer::Conv2d(Conv2d::new(c, wd, 3, 2, 1, true, rng)), relu()],
                vec![Layer::Conv2d(Conv2d::new(wd, 2 * wd, 3, 2, 1, true, rng)), relu()],
                vec![
                    Layer::ConvTranspose2d(ConvTranspose2d::new(2 * wd, wd, 4, 2, 1, true, rng)),
                    relu(),
                ],
                vec![
                    Layer::ConvTranspose2d(ConvTranspose2d::new(wd, c, 4, 2, 1, true, rng)),
                    Layer::Sigmoid(Sigmoid::default()),
                ],
                dense_head(c * h * w, spec.hidden, classes, spec.dropout, rng),
            ]
        }
    };
    Ok(b)
}

/// Build a partitioned classifier. `cuts` defaults to the architecture's
/// standard partition.
pub fn build_model(
    spec: &ArchSpec,
    input_shape: &[usize],
    class_count: usize,
    cuts: Option<(usize, usize)>,
    seed: u64,
) -> Result<PartitionedModel> {
    if class_count == 0 {
        return Err(arch_err(spec, input_shape, "class count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = blocks(spec, input_shape, class_count, &mut rng)?;
    let (a, b) = cuts.unwrap_or_else(|| spec.arch.default_cuts());
    let n = blocks.len();
    if !(1 <= a && a < b && b < n) {
        return Err(NnError::Partition(format!(
            "cuts ({a}, {b}) must satisfy 1 <= a < b < {n} for {}",
            spec.arch.as_str()
        )));
    }
    let mut segs: [Vec<Layer>; 3] = Default::default();
    for (i, blk) in blocks.into_iter().enumerate() {
        let s = if i < a {
            0
        } else if i < b {
            1
        } else {
            2
        };
        segs[s].extend(blk);
    }
    let [s0, s1, s2] = segs;
    let segments = [Sequential::new(s0), Sequential::new(s1), Sequential::new(s2)];
    // validate shapes before assembling so errors name the architecture
    let mut shape = input_shape.to_vec();
    for s in &segments {
        shape = s
            .output_shape(&shape)
            .map_err(|e| arch_err(spec, input_shape, e.to_string()))?;
    }
    PartitionedModel::from_segments(spec.arch, input_shape, class_count, (a, b), segments, seed)
}

/// Build a replacement final segment for per-sample input `input_shape`.
pub fn build_head(
    head: &HeadArch,
    input_shape: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<Sequential> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: usize = input_shape.iter().product();
    let layers = match *head {
        HeadArch::Mlp { hidden } => dense_head(flat, hidden, class_count, 0.0, &mut rng),
        HeadArch::Cnn { width } => {
            if input_shape.len() != 3 || input_shape[1] < 2 || input_shape[2] < 2 {
                return Err(NnError::Shape(format!(
                    "cnn head needs image-shaped input, got {input_shape:?}"
                )));
            }
            let mut v = conv_bn_relu(input_shape[0], width, &mut rng);
            v.extend(conv_bn_relu(width, 2 * width, &mut rng));
            v.push(Layer::MaxPool2d(MaxPool2d::new(2)));
            v.push(Layer::Flatten(Flatten::default()));
            let f = 2 * width * (input_shape[1] / 2) * (input_shape[2] / 2);
            v.push(Layer::Linear(Linear::new(f, class_count, true, &mut rng)));
            v
        }
    };
    let seq = Sequential::new(layers);
    seq.output_shape(input_shape)?;
    Ok(seq)
}

/// Wrap a flat vector into per-sample `shape` (used by generators).
pub fn reshape_layer(shape: &[usize]) -> Layer {
    Layer::Reshape(Reshape::new(shape.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Segment;

    #[test]
    fn mlp_default_partition_is_one_linear_per_segment() {
        let m = build_model(&ArchSpec::mlp(32), &[3, 32, 32], 10, Some((1, 2)), 0).unwrap();
        for seg in Segment::ALL {
            let linears = m
                .segment(seg)
                .layers
                .iter()
                .filter(|l| matches!(l, Layer::Linear(_)))
                .count();
            assert_eq!(linears, 1, "{}", seg.name());
        }
        let counts = m.param_counts();
        assert_eq!(counts[0], 3072 * 32 + 32);
        assert_eq!(counts[2], 32 * 10 + 10);
    }

    #[test]
    fn cnn_beginning_holds_two_conv_blocks() {
        let m = build_model(&ArchSpec::cnn(8, 32), &[3, 32, 32], 10, Some((2, 4)), 0).unwrap();
        let convs = |seg| {
            m.segment(seg)
                .layers
                .iter()
                .filter(|l| matches!(l, Layer::Conv2d(_)))
                .count()
        };
        assert_eq!(convs(Segment::Beginning), 2);
        assert_eq!(convs(Segment::Intermediate), 2);
        assert_eq!(convs(Segment::Final), 0);
    }

    #[test]
    fn cuts_out_of_range_are_rejected() {
        let spec = ArchSpec::mlp(8);
        assert!(matches!(
            build_model(&spec, &[1, 4, 4], 2, Some((0, 2)), 0),
            Err(NnError::Partition(_))
        ));
        assert!(matches!(
            build_model(&spec, &[1, 4, 4], 2, Some((2, 3)), 0),
            Err(NnError::Partition(_))
        ));
    }

    #[test]
    fn architecture_input_mismatch_is_rejected() {
        assert!(matches!(
            build_model(&ArchSpec::vgg16(2), &[1, 8, 8], 2, None, 0),
            Err(NnError::ArchInput { .. })
        ));
        assert!(matches!(
            build_model(&ArchSpec::autoencoder(2, 8), &[1, 6, 6], 2, None, 0),
            Err(NnError::ArchInput { .. })
        ));
    }

    #[test]
    fn autoencoder_body_preserves_image_shape() {
        let m = build_model(&ArchSpec::autoencoder(4, 16), &[3, 8, 8], 4, None, 0).unwrap();
        assert_eq!(m.output_shape_of(Segment::Intermediate).unwrap(), vec![3, 8, 8]);
    }

    #[test]
    fn resnet18_has_expected_depth() {
        let m = build_model(&ArchSpec::resnet18(2), &[3, 8, 8], 10, None, 0).unwrap();
        let convs = m.layer_groups().iter().filter(|g| g.1 == "conv2d").count();
        // 1 stem + 16 block convs + 3 projection shortcuts
        assert_eq!(convs, 20);
    }

    #[test]
    fn heads_fit_image_inputs() {
        let h = build_head(&HeadArch::Cnn { width: 4 }, &[1, 8, 8], 3, 0).unwrap();
        assert_eq!(h.output_shape(&[1, 8, 8]).unwrap(), vec![3]);
        let h = build_head(&HeadArch::Mlp { hidden: 5 }, &[1, 8, 8], 3, 0).unwrap();
        assert_eq!(h.output_shape(&[1, 8, 8]).unwrap(), vec![3]);
    }
}
