use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Convolutional trunk followed by three fully connected layers.
    Memnet,
    /// Convolutional trunk features concatenated with a residual backbone
    /// feature vector.
    Resmem,
    /// Resmem plus downscaled semantic segmentation features.
    M3m,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Memnet => "memnet",
            Variant::Resmem => "resmem",
            Variant::M3m => "m3m",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memnet" => Ok(Variant::Memnet),
            "resmem" => Ok(Variant::Resmem),
            "m3m" => Ok(Variant::M3m),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// AlexNet-style convolutional trunk. Each layer is conv → ReLU → optional
/// 2×2 max pool; convolutions pad by `kernel / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvFeatureConfig {
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub pooling: Vec<bool>,
    /// Output widths of the three fully connected layers of the memnet head;
    /// the last one must be 1.
    pub fc_widths: Vec<usize>,
}

impl ConvFeatureConfig {
    pub fn n_conv_layers(&self) -> usize {
        self.channels.len()
    }

    /// `(channels, side)` of the trunk output for a square input.
    pub fn output_shape(&self, input_size: usize) -> (usize, usize) {
        let mut side = input_size;
        for i in 0..self.channels.len() {
            let k = self.kernel_sizes[i];
            let pad = k / 2;
            side = if side + 2 * pad >= k {
                (side + 2 * pad - k) / self.strides[i] + 1
            } else {
                0
            };
            if self.pooling[i] {
                side /= 2;
            }
        }
        (*self.channels.last().unwrap_or(&3), side)
    }

    pub fn feature_width(&self, input_size: usize) -> usize {
        let (c, s) = self.output_shape(input_size);
        c * s * s
    }
}

/// Residual feature extractor: a stem convolution (+ 2×2 pool), a stack of
/// two-convolution residual blocks, global average pooling and one fully
/// connected layer producing `feature_dim` values.
///
/// `depth` counts weighted layers the usual way: stem + 2 per block + the
/// final fully connected layer, so `(depth - 2) / 2` blocks are built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBackboneConfig {
    pub depth: usize,
    pub feature_dim: usize,
    pub base_channels: usize,
    pub frozen: bool,
}

impl ResidualBackboneConfig {
    pub fn n_blocks(&self) -> usize {
        self.depth.saturating_sub(2) / 2
    }

    /// Blocks per stage; channels double and resolution halves at every stage
    /// after the first. At most four stages.
    pub fn stage_plan(&self) -> Vec<usize> {
        let n = self.n_blocks();
        if n == 0 {
            return Vec::new();
        }
        let stages = n.div_ceil(2).clamp(1, 4);
        (0..stages)
            .map(|s| n / stages + usize::from(s < n % stages))
            .collect()
    }
}

/// Per-pixel class-probability branch plus the small CNN that downscales it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationFeatureConfig {
    pub n_classes: usize,
    /// Hidden 3×3 conv widths of the per-pixel classifier.
    pub classifier_channels: Vec<usize>,
    /// Conv → ReLU → 2×2 pool stages of the downscaler.
    pub downscaler_channels: Vec<usize>,
}

impl SegmentationFeatureConfig {
    pub fn feature_width(&self, input_size: usize) -> usize {
        let side = input_size >> self.downscaler_channels.len();
        let c = *self.downscaler_channels.last().unwrap_or(&self.n_classes);
        c * side * side
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub conv: ConvFeatureConfig,
    pub backbone: Option<ResidualBackboneConfig>,
    pub segmentation: Option<SegmentationFeatureConfig>,
    /// Output widths of the fully connected head of resmem / m3m; the last
    /// one must be 1.
    pub head_widths: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Reference,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "reference" => Ok(Preset::Reference),
            other => Err(format!("unknown preset `{other}`")),
        }
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset, variant: Variant) -> ModelConfig {
        match preset {
            Preset::Tiny => Self::tiny(variant),
            Preset::Small => Self::small(variant),
            Preset::Reference => Self::reference(variant),
        }
    }

    /// 32×32 input, 3-layer trunk, depth-10 backbone with 64 features.
    pub fn tiny(variant: Variant) -> ModelConfig {
        let conv = ConvFeatureConfig {
            channels: vec![8, 16, 16],
            kernel_sizes: vec![3, 3, 3],
            strides: vec![1, 1, 1],
            pooling: vec![true, true, true],
            fc_widths: vec![64, 32, 1],
        };
        let backbone = ResidualBackboneConfig {
            depth: 10,
            feature_dim: 64,
            base_channels: 8,
            frozen: false,
        };
        let seg = SegmentationFeatureConfig {
            n_classes: 5,
            classifier_channels: vec![8],
            downscaler_channels: vec![8, 8, 8],
        };
        Self::assemble(variant, 32, conv, backbone, seg, vec![64, 32, 1])
    }

    /// 64×64 input, 5-layer trunk, depth-18 backbone with 256 features.
    pub fn small(variant: Variant) -> ModelConfig {
        let conv = ConvFeatureConfig {
            channels: vec![16, 32, 48, 48, 32],
            kernel_sizes: vec![5, 3, 3, 3, 3],
            strides: vec![1, 1, 1, 1, 1],
            pooling: vec![true, true, false, false, true],
            fc_widths: vec![256, 128, 1],
        };
        let backbone = ResidualBackboneConfig {
            depth: 18,
            feature_dim: 256,
            base_channels: 16,
            frozen: false,
        };
        let seg = SegmentationFeatureConfig {
            n_classes: 5,
            classifier_channels: vec![16],
            downscaler_channels: vec![8, 8, 8],
        };
        Self::assemble(variant, 64, conv, backbone, seg, vec![256, 128, 1])
    }

    /// Full-size configuration: AlexNet's published filter counts (the
    /// original memnet counts differ but are unpublished), a depth-150
    /// backbone with a 1000-wide feature vector and 21 segmentation classes.
    pub fn reference(variant: Variant) -> ModelConfig {
        let conv = ConvFeatureConfig {
            channels: vec![96, 256, 384, 384, 256],
            kernel_sizes: vec![11, 5, 3, 3, 3],
            strides: vec![4, 1, 1, 1, 1],
            pooling: vec![true, true, false, false, true],
            fc_widths: vec![4096, 4096, 1],
        };
        let backbone = ResidualBackboneConfig {
            depth: 150,
            feature_dim: 1000,
            base_channels: 64,
            frozen: false,
        };
        let seg = SegmentationFeatureConfig {
            n_classes: 21,
            classifier_channels: vec![64],
            downscaler_channels: vec![16, 16, 16, 16],
        };
        Self::assemble(variant, 224, conv, backbone, seg, vec![4096, 1024, 1])
    }

    fn assemble(
        variant: Variant,
        input_size: usize,
        conv: ConvFeatureConfig,
        backbone: ResidualBackboneConfig,
        seg: SegmentationFeatureConfig,
        head_widths: Vec<usize>,
    ) -> ModelConfig {
        ModelConfig {
            variant,
            input_size,
            conv,
            backbone: (variant != Variant::Memnet).then_some(backbone),
            segmentation: (variant == Variant::M3m).then_some(seg),
            head_widths,
        }
    }

    /// Width of the vector entering the fully connected head.
    pub fn head_input_width(&self) -> usize {
        let mut w = self.conv.feature_width(self.input_size);
        if let Some(b) = &self.backbone {
            w += b.feature_dim;
        }
        if let Some(s) = &self.segmentation {
            w += s.feature_width(self.input_size);
        }
        w
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        let c = &self.conv;
        if c.channels.is_empty() {
            return bad("conv trunk needs at least one layer");
        }
        let n = c.channels.len();
        if c.kernel_sizes.len() != n || c.strides.len() != n || c.pooling.len() != n {
            return bad("conv channels, kernel_sizes, strides and pooling must have equal length");
        }
        if c.channels.contains(&0) || c.kernel_sizes.contains(&0) || c.strides.contains(&0) {
            return bad("conv channels, kernels and strides must be positive");
        }
        if self.input_size == 0 {
            return bad("input_size must be positive");
        }
        if c.output_shape(self.input_size).1 == 0 {
            return bad("conv trunk reduces the input to nothing");
        }
        match (self.variant, &self.backbone, &self.segmentation) {
            (Variant::Memnet, None, None) => {}
            (Variant::Memnet, _, _) => return bad("memnet takes neither backbone nor segmentation config"),
            (Variant::Resmem, Some(_), None) => {}
            (Variant::Resmem, _, _) => return bad("resmem needs a backbone and no segmentation config"),
            (Variant::M3m, Some(_), Some(_)) => {}
            (Variant::M3m, _, _) => return bad("m3m needs both backbone and segmentation configs"),
        }
        if self.variant == Variant::Memnet {
            if c.fc_widths.len() != 3 || c.fc_widths[2] != 1 || c.fc_widths.contains(&0) {
                return bad("memnet head must be exactly 3 fully connected layers ending in width 1");
            }
        } else if self.head_widths.is_empty()
            || *self.head_widths.last().unwrap() != 1
            || self.head_widths.contains(&0)
        {
            return bad("head_widths must be positive and end in width 1");
        }
        if let Some(b) = &self.backbone {
            if b.depth < 2 {
                return bad("backbone depth must be >= 2");
            }
            if b.feature_dim == 0 || b.base_channels == 0 {
                return bad("backbone feature_dim and base_channels must be positive");
            }
            let stages = b.stage_plan().len();
            if (self.input_size / 2) >> stages.saturating_sub(1) == 0 {
                return bad("backbone downsamples the input to nothing");
            }
        }
        if let Some(s) = &self.segmentation {
            if s.n_classes < 2 {
                return bad("segmentation needs at least 2 classes");
            }
            if s.classifier_channels.contains(&0) || s.downscaler_channels.contains(&0) {
                return bad("segmentation channel counts must be positive");
            }
            if self.input_size >> s.downscaler_channels.len() == 0 {
                return bad("segmentation downscaler reduces the input to nothing");
            }
        }
        Ok(())
    }
}
