use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "2d")]
    Cnn2d,
    #[serde(rename = "3d")]
    Cnn3d,
    #[serde(rename = "2p1d")]
    Cnn2p1dBase,
    #[serde(rename = "proposed")]
    Proposed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cnn2d, Variant::Cnn3d, Variant::Cnn2p1dBase, Variant::Proposed];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cnn2d => "2d",
            Variant::Cnn3d => "3d",
            Variant::Cnn2p1dBase => "2p1d",
            Variant::Proposed => "proposed",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected 2d, 3d, 2p1d or proposed)")))
    }
}

/// How the 2D baseline consumes a clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoDMode {
    /// Classify frame `T / 2` only.
    #[default]
    CenterFrame,
    /// Classify every frame and average the logits.
    FrameVote,
}

fn default_filters() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

fn default_dropout() -> f64 {
    0.5
}

fn default_kernel() -> [usize; 3] {
    [3, 3, 3]
}

/// Declarative description of a network. The variant and these fields fully
/// determine the layer graph; `seed` determines the initial weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub num_classes: usize,
    /// `(C, T, H, W)` of one sample.
    pub input_shape: [usize; 4],
    #[serde(default = "default_filters")]
    pub stage_filters: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 3],
    /// ReLU between the spatial and temporal halves of factored convolutions.
    #[serde(default)]
    pub interleaved_relu: bool,
    /// Fixed intermediate width for factored convolutions instead of the
    /// parameter-matched one.
    #[serde(default)]
    pub mid_channels: Option<usize>,
    #[serde(default)]
    pub two_d_mode: TwoDMode,
    /// Explicit `(T, H, W)` resize target before each stage after the first.
    #[serde(default)]
    pub resize_targets: Option<Vec<[usize; 3]>>,
}

impl ModelSpec {
    /// Defaults: 12 classes, `(1, 16, 64, 64)` input, widths `[8, 16, 32, 64]`.
    pub fn new(variant: Variant) -> Self {
        ModelSpec {
            variant,
            num_classes: 12,
            input_shape: [1, 16, 64, 64],
            stage_filters: default_filters(),
            seed: 0,
            dropout: default_dropout(),
            kernel: default_kernel(),
            interleaved_relu: false,
            mid_channels: None,
            two_d_mode: TwoDMode::CenterFrame,
            resize_targets: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.stage_filters.is_empty() || self.stage_filters.contains(&0) {
            return Err(Error::Config("stage_filters must be nonempty and positive".into()));
        }
        if self.stage_filters.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("stage_filters must be nondecreasing, got {:?}", self.stage_filters)));
        }
        if self.input_shape.contains(&0) || self.kernel.contains(&0) {
            return Err(Error::Config("input_shape and kernel extents must be positive".into()));
        }
        if self.mid_channels == Some(0) {
            return Err(Error::Config("mid_channels override must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Resize targets between stages. By default every boundary halves
    /// height and width and the last one also halves time (time stays at one
    /// frame for the 2D baseline).
    pub fn stage_targets(&self) -> Result<Vec<[usize; 3]>> {
        let boundaries = self.stage_filters.len() - 1;
        if let Some(targets) = &self.resize_targets {
            if targets.len() != boundaries || targets.iter().any(|t| t.contains(&0)) {
                return Err(Error::Config(format!(
                    "resize_targets needs {boundaries} positive entries, got {targets:?}"
                )));
            }
            return Ok(targets.clone());
        }
        let [_, t, h, w] = self.input_shape;
        let mut ext = [if self.variant == Variant::Cnn2d { 1 } else { t }, h, w];
        let mut out = Vec::with_capacity(boundaries);
        for b in 0..boundaries {
            ext[1] /= 2;
            ext[2] /= 2;
            if b + 1 == boundaries && self.variant != Variant::Cnn2d {
                ext[0] /= 2;
            }
            if ext.contains(&0) {
                return Err(Error::Config(format!(
                    "input {:?} is too small for {} stages",
                    self.input_shape,
                    self.stage_filters.len()
                )));
            }
            out.push(ext);
        }
        Ok(out)
    }
}
