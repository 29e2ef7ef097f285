use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAMES_PER_VIDEO: usize = 5;
pub const FEATURES_PER_FRAME: usize = 29;
/// Width of each stream's output before concatenation.
pub const STREAM_WIDTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    /// Square frame extent S.
    pub image_size: usize,
    pub image_channels: usize,
    pub frames: usize,
    pub features: usize,
    pub convlstm_channels: Vec<usize>,
    /// Input-to-state (valid) kernel extent.
    pub input_kernel: usize,
    /// State-to-state (same-padded) kernel extent.
    pub state_kernel: usize,
    pub cnn_dense: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    pub fusion_dense: Vec<usize>,
    pub dropout: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            image_size: 128,
            image_channels: 3,
            frames: FRAMES_PER_VIDEO,
            features: FEATURES_PER_FRAME,
            convlstm_channels: vec![4, 8, 14, 16],
            input_kernel: 3,
            state_kernel: 3,
            cnn_dense: vec![1024, 4],
            mlp_hidden: vec![64, 16, 4],
            fusion_dense: vec![16, 8, 1],
            dropout: 0.5,
        }
    }
}

/// Spatial extents of one conv/pool block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub conv: usize,
    pub pool: usize,
    pub channels: usize,
}

impl ArchitectureConfig {
    pub fn with_image_size(mut self, s: usize) -> Self {
        self.image_size = s;
        self
    }

    /// A small configuration for gradient checks: S = 18 with 2×2 input kernels
    /// (3×3 kernels need S ≥ 31 to keep four blocks positive).
    pub fn tiny() -> Self {
        ArchitectureConfig {
            image_size: 18,
            convlstm_channels: vec![2, 2, 2, 2],
            input_kernel: 2,
            cnn_dense: vec![6, STREAM_WIDTH],
            mlp_hidden: vec![8, 6, STREAM_WIDTH],
            fusion_dense: vec![6, 5, 1],
            ..Self::default()
        }
    }

    /// Conv `s → s − k + 1`, pool `s → ceil(s/2)`, per block.
    pub fn shape_chain(&self) -> Result<Vec<BlockShape>> {
        let mut s = self.image_size;
        let mut out = Vec::with_capacity(self.convlstm_channels.len());
        for (b, &channels) in self.convlstm_channels.iter().enumerate() {
            if s < self.input_kernel {
                return Err(Error::Config(format!(
                    "image size {} too small: block {} receives {s}×{s} but its kernel is {}×{}",
                    self.image_size,
                    b + 1,
                    self.input_kernel,
                    self.input_kernel
                )));
            }
            let conv = s - self.input_kernel + 1;
            let pool = conv.div_ceil(2);
            out.push(BlockShape {
                conv,
                pool,
                channels,
            });
            s = pool;
        }
        Ok(out)
    }

    pub fn flatten_width(&self) -> Result<usize> {
        let chain = self.shape_chain()?;
        let last = chain
            .last()
            .ok_or_else(|| Error::Config("no ConvLSTM blocks".into()))?;
        Ok(self.frames * last.pool * last.pool * last.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames != FRAMES_PER_VIDEO {
            return Err(Error::Config(format!(
                "frames per video is fixed at {FRAMES_PER_VIDEO}, got {}",
                self.frames
            )));
        }
        if self.features != FEATURES_PER_FRAME {
            return Err(Error::Config(format!(
                "feature width is fixed at {FEATURES_PER_FRAME}, got {}",
                self.features
            )));
        }
        if self.image_channels == 0 || self.input_kernel == 0 {
            return Err(Error::Config("image channels and kernel extent must be ≥ 1".into()));
        }
        if self.state_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "state kernel must be odd for same padding, got {}",
                self.state_kernel
            )));
        }
        if self.convlstm_channels.is_empty() || self.convlstm_channels.contains(&0) {
            return Err(Error::Config("ConvLSTM channel list must be non-empty and positive".into()));
        }
        for (name, widths) in [
            ("cnn_dense", &self.cnn_dense),
            ("mlp_hidden", &self.mlp_hidden),
            ("fusion_dense", &self.fusion_dense),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::Config(format!("{name} must be non-empty and positive")));
            }
        }
        if *self.cnn_dense.last().unwrap() != STREAM_WIDTH || *self.mlp_hidden.last().unwrap() != STREAM_WIDTH {
            return Err(Error::Config(format!(
                "both streams must end in {STREAM_WIDTH} units (cnn_dense {:?}, mlp_hidden {:?})",
                self.cnn_dense, self.mlp_hidden
            )));
        }
        if *self.fusion_dense.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "fusion head must end in a single unit, got {:?}",
                self.fusion_dense
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.shape_chain()?;
        Ok(())
    }
}

/// The four networks compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// CNN-LSTM stream + MLP stream + fusion head.
    Full,
    /// CNN-LSTM stream with a sigmoid head; no geometric features.
    FramesOnly,
    /// MLP stream with a sigmoid head; frames are ignored.
    FeaturesOnly,
    /// Per-frame CNN + per-frame MLP fused per frame, frame scores averaged.
    NoLstm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::FramesOnly,
        Variant::FeaturesOnly,
        Variant::NoLstm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FramesOnly => "frames_only",
            Variant::FeaturesOnly => "features_only",
            Variant::NoLstm => "no_lstm",
        }
    }

    pub fn uses_frames(self) -> bool {
        self != Variant::FeaturesOnly
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
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model variant {s:?} (expected full, frames_only, features_only or no_lstm)"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extents(chain: &[BlockShape]) -> Vec<usize> {
        chain.iter().flat_map(|b| [b.conv, b.pool]).collect()
    }

    #[test]
    fn default_chain_matches_documented_extents() {
        let cfg = ArchitectureConfig::default();
        cfg.validate().unwrap();
        let chain = cfg.shape_chain().unwrap();
        assert_eq!(extents(&chain), vec![126, 63, 61, 31, 29, 15, 13, 7]);
        assert_eq!(cfg.flatten_width().unwrap(), 3920);
    }

    #[test]
    fn small_frames_chain() {
        let cfg = ArchitectureConfig::default().with_image_size(32);
        assert_eq!(
            extents(&cfg.shape_chain().unwrap()),
            vec![30, 15, 13, 7, 5, 3, 1, 1]
        );
        assert_eq!(cfg.flatten_width().unwrap(), 80);
    }

    #[test]
    fn too_small_names_block() {
        let err = ArchitectureConfig::default()
            .with_image_size(18)
            .validate()
            .unwrap_err()
            .to_string();
        assert!(err.contains("block 4"), "{err}");
        ArchitectureConfig::default().with_image_size(31).validate().unwrap();
        assert!(ArchitectureConfig::default().with_image_size(30).validate().is_err());
        ArchitectureConfig::tiny().validate().unwrap();
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("vgg16".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn stream_widths_enforced() {
        let mut cfg = ArchitectureConfig::default();
        cfg.mlp_hidden = vec![64, 16, 8];
        assert!(cfg.validate().is_err());
        let mut cfg = ArchitectureConfig::default();
        cfg.fusion_dense = vec![16, 2];
        assert!(cfg.validate().is_err());
    }
}
