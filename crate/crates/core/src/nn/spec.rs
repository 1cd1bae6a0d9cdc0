use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::raster::NormalEncoding;

/// Encoder downsampling factor: four skip levels plus the bottleneck.
pub const ENCODER_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderFamily {
    /// Densely connected blocks behind a strided stem (reference topology).
    DenseSkip,
    /// Two plain 3x3 convolutions per level (desk scale).
    PlainConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    /// Skip widths at input/2, /4, /8 and /16.
    pub skip_channels: [usize; 4],
    /// Width at input/32.
    pub bottleneck_channels: usize,
    /// Growth rate and layer count of each dense block (dense-skip only).
    pub growth: usize,
    pub dense_layers: usize,
}

impl EncoderSpec {
    pub fn reference() -> Self {
        Self {
            family: EncoderFamily::DenseSkip,
            skip_channels: [64, 256, 512, 1024],
            bottleneck_channels: 1024,
            growth: 32,
            dense_layers: 2,
        }
    }

    pub fn desk() -> Self {
        Self {
            family: EncoderFamily::PlainConv,
            skip_channels: [8, 32, 64, 128],
            bottleneck_channels: 128,
            growth: 8,
            dense_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskSpec {
    /// `(height, width, channels)` of one input crop.
    pub input_size: (usize, usize, usize),
    pub encoder: EncoderSpec,
    pub stage_widths: [usize; 5],
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub normal_encoding: NormalEncoding,
}

impl MultiTaskSpec {
    pub fn paper_reference(num_classes: usize) -> Self {
        Self {
            input_size: (320, 320, 3),
            encoder: EncoderSpec::reference(),
            stage_widths: [1024, 512, 256, 64, 32],
            num_classes,
            dropout_rate: 0.2,
            normal_encoding: NormalEncoding::PaperLiteral,
        }
    }

    /// Reference topology with widths divided by 8.
    pub fn desk(num_classes: usize, crop: usize) -> Self {
        Self {
            input_size: (crop, crop, 3),
            encoder: EncoderSpec::desk(),
            stage_widths: [128, 64, 32, 8, 4],
            ..Self::paper_reference(num_classes)
        }
    }

    /// Minimal configuration for gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            input_size: (32, 32, 3),
            encoder: EncoderSpec {
                family: EncoderFamily::PlainConv,
                skip_channels: [4, 4, 4, 4],
                bottleneck_channels: 8,
                growth: 4,
                dense_layers: 1,
            },
            stage_widths: [8, 8, 8, 8, 8],
            num_classes,
            dropout_rate: 0.0,
            normal_encoding: NormalEncoding::PaperLiteral,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_size;
        if c != 3 {
            return Err(invalid(format!("multi-task input must be RGB, got {c} channels")));
        }
        if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(invalid(format!(
                "input {h}x{w} is not divisible by the encoder stride {ENCODER_STRIDE}"
            )));
        }
        if self.stage_widths.contains(&0)
            || self.encoder.skip_channels.contains(&0)
            || self.encoder.bottleneck_channels == 0
        {
            return Err(invalid("layer widths must be positive"));
        }
        if self.encoder.family == EncoderFamily::DenseSkip
            && (self.encoder.growth == 0 || self.encoder.dense_layers == 0)
        {
            return Err(invalid("dense-skip encoder needs positive growth and layer count"));
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Which stage-1 outputs the refiner sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefinerInputMode {
    /// RGB, height, class probabilities and normals.
    #[default]
    Full,
    /// Only the height channel; the others are masked to zero.
    HeightOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerSpec {
    /// `(height, width)` of one input crop.
    pub input_size: (usize, usize),
    pub num_classes: usize,
    /// Must equal `3 + 1 + num_classes + 3`.
    pub input_channels: usize,
    pub encoder_widths: [usize; 5],
    pub decoder_widths: [usize; 4],
    #[serde(default)]
    pub input_mode: RefinerInputMode,
    /// Predict a correction added to the `P_h` channel instead of the height
    /// itself; the output conv starts at zero so the untrained refiner is the
    /// identity on `P_h`.
    #[serde(default)]
    pub residual: bool,
}

impl RefinerSpec {
    pub fn paper_reference(num_classes: usize) -> Self {
        Self {
            input_size: (320, 320),
            num_classes,
            input_channels: 7 + num_classes,
            encoder_widths: [64, 128, 256, 512, 1024],
            decoder_widths: [512, 256, 128, 64],
            input_mode: RefinerInputMode::Full,
            residual: false,
        }
    }

    pub fn desk(num_classes: usize, crop: usize) -> Self {
        Self {
            input_size: (crop, crop),
            encoder_widths: [8, 16, 32, 64, 128],
            decoder_widths: [64, 32, 16, 8],
            residual: true,
            ..Self::paper_reference(num_classes)
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self {
            input_size: (32, 32),
            encoder_widths: [4, 4, 4, 4, 4],
            decoder_widths: [4, 4, 4, 4],
            ..Self::paper_reference(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(invalid(format!(
                "refiner input {h}x{w} is not divisible by 16 (four pooling levels)"
            )));
        }
        if self.input_channels != 7 + self.num_classes {
            return Err(invalid(format!(
                "refiner expects 7 + num_classes = {} input channels, spec says {}",
                7 + self.num_classes,
                self.input_channels
            )));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(())
    }
}
