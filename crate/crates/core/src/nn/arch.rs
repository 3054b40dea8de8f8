use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Width of the shared feature layer sitting between the trunk and the heads.
pub const FEATURE_DIM: usize = 512;
/// Number of basic expression classes predicted by the expression head.
pub const NUM_EXPRESSIONS: usize = 7;
/// Number of action units predicted by the AU head.
pub const NUM_AUS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Per-sample output shape for a per-sample input shape, or `None` if incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => {
                (input == [in_dim] && in_dim > 0 && out_dim > 0).then(|| vec![out_dim])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
            } => {
                if input.len() != 3
                    || input[0] != in_channels
                    || out_channels == 0
                    || kernel_size == 0
                    || stride == 0
                    || input[1] < kernel_size
                    || input[2] < kernel_size
                {
                    return None;
                }
                let oh = (input[1] - kernel_size) / stride + 1;
                let ow = (input[2] - kernel_size) / stride + 1;
                Some(vec![out_channels, oh, ow])
            }
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
        }
    }
}

/// Trunk presets shipped with the tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkPreset {
    /// flatten → dense 128 → relu
    Mlp,
    /// conv 3→8 k3 s2 → relu → conv 8→16 k3 s2 → relu → flatten → dense 128 → relu
    SmallCnn,
}

impl TrunkPreset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mlp" => Some(TrunkPreset::Mlp),
            "smallcnn" | "small_cnn" => Some(TrunkPreset::SmallCnn),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrunkPreset::Mlp => "mlp",
            TrunkPreset::SmallCnn => "smallcnn",
        }
    }

    /// Full-width preset for square RGB input of the given side length.
    pub fn architecture(&self, image_size: usize) -> Result<Architecture> {
        self.for_input(&[3, image_size, image_size])
    }

    /// Full-width preset for a `[channels, height, width]` input.
    pub fn for_input(&self, input_shape: &[usize]) -> Result<Architecture> {
        match self {
            TrunkPreset::Mlp => Architecture::mlp(input_shape, 128),
            TrunkPreset::SmallCnn => Architecture::small_cnn(input_shape, 8, 16, 128),
        }
    }
}

/// Model topology: per-sample input shape, trunk layers and the feature width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub trunk: Vec<LayerSpec>,
    pub feature_dim: usize,
}

impl Architecture {
    pub fn new(input_shape: &[usize], trunk: Vec<LayerSpec>) -> Result<Self> {
        Self::with_feature_dim(input_shape, trunk, FEATURE_DIM)
    }

    /// Same as [`Architecture::new`] with a non-default feature width. Only
    /// gradient-check sized models should need this.
    pub fn with_feature_dim(
        input_shape: &[usize],
        trunk: Vec<LayerSpec>,
        feature_dim: usize,
    ) -> Result<Self> {
        let arch = Architecture {
            input_shape: input_shape.to_vec(),
            trunk,
            feature_dim,
        };
        arch.layer_shapes()?;
        Ok(arch)
    }

    /// flatten → dense `hidden` → relu
    pub fn mlp(input_shape: &[usize], hidden: usize) -> Result<Self> {
        let flat = input_shape.iter().product();
        Self::new(
            input_shape,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: flat,
                    out_dim: hidden,
                },
                LayerSpec::Relu,
            ],
        )
    }

    /// Two stride-2 3x3 convolutions with ReLU, then flatten → dense `hidden` → relu.
    pub fn small_cnn(input_shape: &[usize], c1: usize, c2: usize, hidden: usize) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(Error::Config(format!(
                "smallcnn expects [channels, height, width] input, got {input_shape:?}"
            )));
        }
        let conv1 = LayerSpec::Conv2d {
            in_channels: input_shape[0],
            out_channels: c1,
            kernel_size: 3,
            stride: 2,
        };
        let conv2 = LayerSpec::Conv2d {
            in_channels: c1,
            out_channels: c2,
            kernel_size: 3,
            stride: 2,
        };
        let s1 = conv1.output_shape(input_shape).ok_or_else(|| {
            Error::Config(format!("input {input_shape:?} too small for smallcnn"))
        })?;
        let s2 = conv2
            .output_shape(&s1)
            .ok_or_else(|| Error::Config(format!("input {input_shape:?} too small for smallcnn")))?;
        Self::new(
            input_shape,
            vec![
                conv1,
                LayerSpec::Relu,
                conv2,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: s2.iter().product(),
                    out_dim: hidden,
                },
                LayerSpec::Relu,
            ],
        )
    }

    /// Per-sample shapes entering each trunk layer, followed by the trunk output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {:?} must be non-empty with positive dimensions",
                self.input_shape
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.trunk.iter().enumerate() {
            let current = shapes.last().expect("non-empty");
            let next = layer.output_shape(current).ok_or_else(|| {
                let from = if i == 0 {
                    format!("input {current:?}")
                } else {
                    format!(
                        "layer {} ({}) output {current:?}",
                        i - 1,
                        self.trunk[i - 1].name()
                    )
                };
                Error::Config(format!(
                    "inconsistent layer chain: {from} does not fit layer {i} ({layer:?})"
                ))
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Flattened per-sample width of the trunk output (the feature layer's fan-in).
    pub fn trunk_output_dim(&self) -> usize {
        self.layer_shapes()
            .ok()
            .and_then(|s| s.last().map(|l| l.iter().product()))
            .unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Stable 64-bit fingerprint of the topology, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let canonical = serde_json::to_vec(self).expect("architecture serializes");
        let digest = Sha256::digest(&canonical);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
