//! Architecture hyperparameters and the tensor plan derived from them.

use super::NnError;
use serde::{Deserialize, Serialize};

/// Byte value space plus one padding token.
pub const DEFAULT_VOCAB: usize = 257;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    MalConv,
    Bbdnn,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::MalConv => "malconv",
            Arch::Bbdnn => "bbdnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Two logits, softmax; the malware score is component 1.
    Softmax2,
    /// One logit, sigmoid; the malware score is the sigmoid output.
    Sigmoid1,
}

impl OutputHead {
    pub fn dim(&self) -> usize {
        match self {
            OutputHead::Softmax2 => 2,
            OutputHead::Sigmoid1 => 1,
        }
    }
}

/// One convolution + max-pool block of the deeper architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool_width: usize,
    pub pool_stride: usize,
}

/// Convolutional topology of the network body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPlan {
    /// Two parallel convolutions gated elementwise (`a * sigmoid(b)`),
    /// then a global max-pool per channel.
    Gated {
        channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Stacked conv+ReLU+max-pool blocks, then a global max-pool.
    ConvPool { blocks: Vec<ConvBlock> },
}

/// Name and shape of one expected weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Full hyperparameter set of one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub layers: LayerPlan,
    pub output: OutputHead,
}

impl ModelConfig {
    /// Gated single-conv detector over a 1 MB window.
    pub fn malconv() -> Self {
        Self {
            arch: Arch::MalConv,
            vocab: DEFAULT_VOCAB,
            embed_dim: 8,
            window: 1 << 20,
            layers: LayerPlan::Gated {
                channels: 128,
                kernel: 512,
                stride: 512,
            },
            output: OutputHead::Softmax2,
        }
    }

    /// Five conv+pool blocks over a 100 KB window.
    pub fn bbdnn() -> Self {
        let blocks = [16, 32, 64, 96, 128]
            .iter()
            .map(|&channels| ConvBlock {
                channels,
                kernel: 8,
                stride: 1,
                pool_width: 4,
                pool_stride: 4,
            })
            .collect();
        Self {
            arch: Arch::Bbdnn,
            vocab: DEFAULT_VOCAB,
            embed_dim: 10,
            window: 102_400,
            layers: LayerPlan::ConvPool { blocks },
            output: OutputHead::Sigmoid1,
        }
    }

    /// Scaled-down gated model for gradient checks and toy training.
    pub fn malconv_small(window: usize) -> Self {
        Self {
            arch: Arch::MalConv,
            vocab: DEFAULT_VOCAB,
            embed_dim: 4,
            window,
            layers: LayerPlan::Gated {
                channels: 8,
                kernel: 16,
                stride: 8,
            },
            output: OutputHead::Softmax2,
        }
    }

    /// Scaled-down conv+pool model for gradient checks.
    pub fn bbdnn_small(window: usize) -> Self {
        let blocks = [5, 7, 8]
            .iter()
            .map(|&channels| ConvBlock {
                channels,
                kernel: 3,
                stride: 1,
                pool_width: 2,
                pool_stride: 2,
            })
            .collect();
        Self {
            arch: Arch::Bbdnn,
            vocab: DEFAULT_VOCAB,
            embed_dim: 4,
            window,
            layers: LayerPlan::ConvPool { blocks },
            output: OutputHead::Sigmoid1,
        }
    }

    /// Channels entering the fully connected head.
    pub fn head_inputs(&self) -> usize {
        match &self.layers {
            LayerPlan::Gated { channels, .. } => *channels,
            LayerPlan::ConvPool { blocks } => blocks.last().map(|b| b.channels).unwrap_or(0),
        }
    }

    /// Expected tensors, in storage order.
    pub fn tensor_plan(&self) -> Vec<TensorSpec> {
        let mut plan = vec![TensorSpec {
            name: "embedding".into(),
            shape: vec![self.vocab, self.embed_dim],
        }];
        match &self.layers {
            LayerPlan::Gated {
                channels,
                kernel,
                stride: _,
            } => {
                for half in ["conv_a", "conv_b"] {
                    plan.push(TensorSpec {
                        name: format!("{half}.weight"),
                        shape: vec![*channels, self.embed_dim, *kernel],
                    });
                    plan.push(TensorSpec {
                        name: format!("{half}.bias"),
                        shape: vec![*channels],
                    });
                }
            }
            LayerPlan::ConvPool { blocks } => {
                let mut in_channels = self.embed_dim;
                for (i, b) in blocks.iter().enumerate() {
                    plan.push(TensorSpec {
                        name: format!("conv{i}.weight"),
                        shape: vec![b.channels, in_channels, b.kernel],
                    });
                    plan.push(TensorSpec {
                        name: format!("conv{i}.bias"),
                        shape: vec![b.channels],
                    });
                    in_channels = b.channels;
                }
            }
        }
        plan.push(TensorSpec {
            name: "fc.weight".into(),
            shape: vec![self.output.dim(), self.head_inputs()],
        });
        plan.push(TensorSpec {
            name: "fc.bias".into(),
            shape: vec![self.output.dim()],
        });
        plan
    }

    /// Sequence lengths after each conv/pool stage, ending with the
    /// length the global max-pool sees.  Fails when a stage would
    /// produce an empty output.
    pub fn stage_lengths(&self) -> Result<Vec<usize>, NnError> {
        let conv_out = |len: usize, k: usize, s: usize, what: &str| -> Result<usize, NnError> {
            if k == 0 || s == 0 || len < k {
                return Err(NnError::InvalidConfig(format!(
                    "{what}: kernel {k} stride {s} cannot consume length {len}"
                )));
            }
            Ok((len - k) / s + 1)
        };
        let mut lens = vec![self.window];
        match &self.layers {
            LayerPlan::Gated {
                kernel, stride, ..
            } => {
                lens.push(conv_out(self.window, *kernel, *stride, "gated conv")?);
            }
            LayerPlan::ConvPool { blocks } => {
                if blocks.is_empty() {
                    return Err(NnError::InvalidConfig("no conv blocks".into()));
                }
                let mut len = self.window;
                for (i, b) in blocks.iter().enumerate() {
                    len = conv_out(len, b.kernel, b.stride, &format!("conv{i}"))?;
                    len = conv_out(len, b.pool_width, b.pool_stride, &format!("pool{i}"))?;
                    lens.push(len);
                }
            }
        }
        Ok(lens)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.vocab < DEFAULT_VOCAB {
            return Err(NnError::InvalidConfig(format!(
                "vocab {} cannot embed the padding token",
                self.vocab
            )));
        }
        if self.embed_dim == 0 || self.window == 0 {
            return Err(NnError::InvalidConfig(
                "embed_dim and window must be positive".into(),
            ));
        }
        let arch_ok = matches!(
            (self.arch, &self.layers),
            (Arch::MalConv, LayerPlan::Gated { .. }) | (Arch::Bbdnn, LayerPlan::ConvPool { .. })
        );
        if !arch_ok {
            return Err(NnError::InvalidConfig(format!(
                "arch {} does not match the layer plan",
                self.arch.name()
            )));
        }
        if let LayerPlan::Gated { channels, .. } = &self.layers {
            if *channels == 0 {
                return Err(NnError::InvalidConfig("gated conv needs channels".into()));
            }
        }
        if let LayerPlan::ConvPool { blocks } = &self.layers {
            if blocks.iter().any(|b| b.channels == 0) {
                return Err(NnError::InvalidConfig("conv block needs channels".into()));
            }
        }
        self.stage_lengths()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate() {
        ModelConfig::malconv().validate().unwrap();
        ModelConfig::bbdnn().validate().unwrap();
        ModelConfig::malconv_small(64).validate().unwrap();
        ModelConfig::bbdnn_small(64).validate().unwrap();
    }

    #[test]
    fn malconv_plan_shapes() {
        let plan = ModelConfig::malconv().tensor_plan();
        let names: Vec<&str> = plan.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "embedding",
                "conv_a.weight",
                "conv_a.bias",
                "conv_b.weight",
                "conv_b.bias",
                "fc.weight",
                "fc.bias"
            ]
        );
        assert_eq!(plan[0].shape, vec![257, 8]);
        assert_eq!(plan[1].shape, vec![128, 8, 512]);
        assert_eq!(plan[5].shape, vec![2, 128]);
    }

    #[test]
    fn bbdnn_stage_lengths() {
        let lens = ModelConfig::bbdnn().stage_lengths().unwrap();
        assert_eq!(lens, vec![102_400, 25_598, 6_397, 1_597, 397, 97]);
    }

    #[test]
    fn window_below_kernel_is_invalid() {
        let mut cfg = ModelConfig::malconv_small(8);
        cfg.window = 8;
        assert!(cfg.validate().is_err()); // kernel 16 > window 8
    }

    #[test]
    fn arch_layer_mismatch_is_invalid() {
        let mut cfg = ModelConfig::malconv_small(64);
        cfg.arch = Arch::Bbdnn;
        assert!(matches!(cfg.validate(), Err(NnError::InvalidConfig(_))));
    }
}
