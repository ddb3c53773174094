use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::CellUpdate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SpatiotemporalLstm,
    BaselineCnn2d,
}

/// Architecture description shared by both model kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// (T, C, H, W) of one input segment.
    pub input_shape: [usize; 4],
    pub conv_lstm_filters: Vec<usize>,
    pub conv_lstm_kernel: usize,
    pub conv3d_filters: usize,
    pub conv3d_kernel: usize,
    pub dense_hidden: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub model_kind: ModelKind,
    #[serde(default)]
    pub cell_update: CellUpdate,
}

/// Baseline conv stack: (filters, kernel, stride), all same-padded.
pub const BASELINE_CONVS: [(usize, usize, usize); 4] = [(16, 8, 4), (32, 5, 2), (48, 5, 2), (64, 3, 1)];

impl NetworkSpec {
    pub fn spatiotemporal(height: usize, width: usize) -> Self {
        Self {
            input_shape: [3, 3, height, width],
            conv_lstm_filters: vec![64, 32, 16, 8],
            conv_lstm_kernel: 3,
            conv3d_filters: 3,
            conv3d_kernel: 3,
            dense_hidden: 512,
            dropout_rate: 0.5,
            leaky_slope: 0.2,
            model_kind: ModelKind::SpatiotemporalLstm,
            cell_update: CellUpdate::Standard,
        }
    }

    pub fn baseline(height: usize, width: usize) -> Self {
        Self { model_kind: ModelKind::BaselineCnn2d, ..Self::spatiotemporal(height, width) }
    }

    /// The small configuration used for whole-model gradient checks.
    pub fn tiny(height: usize, width: usize) -> Self {
        Self {
            conv_lstm_filters: vec![2, 2, 2, 2],
            dense_hidden: 8,
            dropout_rate: 0.0,
            ..Self::spatiotemporal(height, width)
        }
    }

    pub fn frames(&self) -> usize {
        self.input_shape[0]
    }

    pub fn channels(&self) -> usize {
        self.input_shape[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.input_shape[2], self.input_shape[3])
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.input_shape.contains(&0) {
            return cfg(format!("input shape must be positive, got {:?}", self.input_shape));
        }
        if self.dense_hidden == 0 {
            return cfg("dense_hidden must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return cfg(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return cfg(format!("leaky slope must be in (0, 1), got {}", self.leaky_slope));
        }
        match self.model_kind {
            ModelKind::SpatiotemporalLstm => {
                if self.frames() != 3 {
                    return cfg(format!("spatiotemporal model expects 3 frames per segment, got {}", self.frames()));
                }
                if self.conv3d_kernel != self.frames() {
                    return cfg(format!(
                        "conv3d kernel depth {} must equal the segment length {}",
                        self.conv3d_kernel,
                        self.frames()
                    ));
                }
                if self.conv_lstm_filters.len() != 4 {
                    return cfg(format!("expected 4 ConvLSTM layers, got {}", self.conv_lstm_filters.len()));
                }
                if self.conv_lstm_filters.contains(&0) || self.conv3d_filters == 0 {
                    return cfg("all filter counts must be at least 1".into());
                }
                if self.conv_lstm_kernel.is_multiple_of(2) || self.conv3d_kernel == 0 {
                    return cfg(format!("ConvLSTM kernel must be odd, got {}", self.conv_lstm_kernel));
                }
            }
            ModelKind::BaselineCnn2d => {}
        }
        Ok(())
    }
}
