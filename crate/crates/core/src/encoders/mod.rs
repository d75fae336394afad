//! Feature-extraction contracts for the visual, audio and text streams.
//!
//! The toy backbones are small bias-free conv stacks that are fully
//! determined by [`EncoderConfig::seed`]. Anything else can be plugged in by
//! implementing [`TextEncoder`] or by producing the feature types directly.

mod audio;
mod text;
mod visual;

pub use audio::{AudioCache, AudioEncoder};
pub use text::{FixtureTextEncoder, TextEncoder};
pub use visual::{from_grid_layout, to_grid_layout, VisualCache, VisualEncoder};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Visual feature map laid out as (B, w, h, c): `w` runs along the image
/// x axis, `h` along y.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureMap {
    pub data: Array4<f64>,
}

impl VisualFeatureMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (_, w, h, c) = data.dim();
        ensure(w >= 1 && h >= 1, || format!("empty spatial grid {w}x{h}"))?;
        ensure(c >= 2, || format!("need at least 2 channels, got {c}"))?;
        ensure(data.iter().all(|v| v.is_finite()), || {
            "visual features contain non-finite values".into()
        })?;
        Ok(Self { data })
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        let (_, w, h, _) = self.data.dim();
        (w, h)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioEmbedding {
    pub data: Array2<f64>,
}

impl AudioEmbedding {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        ensure(data.iter().all(|v| v.is_finite()), || {
            "audio embedding contains non-finite values".into()
        })?;
        Ok(Self { data })
    }

    pub fn batch(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

/// Caption-derived anchors: `foreground` is (B, K, c), `background` (B, c).
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEmbeddings {
    pub foreground: Array3<f64>,
    pub background: Array2<f64>,
}

impl ReferenceEmbeddings {
    pub fn new(foreground: Array3<f64>, background: Array2<f64>) -> Result<Self> {
        let (b, k, c) = foreground.dim();
        ensure(k >= 1, || "need at least one foreground reference".into())?;
        if background.dim() != (b, c) {
            return Err(Error::Dimension(format!(
                "background refs {:?} do not match foreground (B={b}, c={c})",
                background.dim()
            )));
        }
        ensure(
            foreground.iter().chain(background.iter()).all(|v| v.is_finite()),
            || "reference embeddings contain non-finite values".into(),
        )?;
        Ok(Self {
            foreground,
            background,
        })
    }

    pub fn batch(&self) -> usize {
        self.foreground.dim().0
    }

    pub fn sources(&self) -> usize {
        self.foreground.dim().1
    }

    pub fn channels(&self) -> usize {
        self.foreground.dim().2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ToyConv,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone_kind: BackboneKind,
    pub feature_channels: usize,
    pub hidden_channels: usize,
    pub spatial_downsample: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone_kind: BackboneKind::ToyConv,
            feature_channels: 16,
            hidden_channels: 16,
            spatial_downsample: 32,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.feature_channels >= 2, || {
            format!("feature_channels must be >= 2, got {}", self.feature_channels)
        })?;
        ensure(self.hidden_channels >= 1, || "hidden_channels must be >= 1".into())?;
        ensure(self.spatial_downsample >= 1, || {
            "spatial_downsample must be >= 1".into()
        })?;
        if self.backbone_kind == BackboneKind::External {
            return Err(Error::Validation(
                "external backbones are supplied by the caller; no toy weights to build".into(),
            ));
        }
        Ok(())
    }

    /// Splits the downsample factor into a parameter-free pooling stem and up
    /// to three stride-2 conv blocks.
    pub(crate) fn stem_and_blocks(&self) -> (usize, usize) {
        let blocks = self.spatial_downsample.trailing_zeros().min(3) as usize;
        (self.spatial_downsample >> blocks, blocks)
    }
}

/// Runs the seeded toy visual backbone on a (B, 3, H, W) batch.
pub fn encode_visual(images: &Array4<f64>, cfg: &EncoderConfig) -> Result<VisualFeatureMap> {
    VisualEncoder::new(cfg)?.encode(images)
}

/// Runs the seeded toy audio backbone on a (B, 1, F, T) batch.
pub fn encode_audio(spectrograms: &Array4<f64>, cfg: &EncoderConfig) -> Result<AudioEmbedding> {
    AudioEncoder::new(cfg)?.encode(spectrograms)
}

/// Fixture text encoding: seeded hashed bag of words, rows L2-normalised.
pub fn encode_text(captions: &[String], cfg: &EncoderConfig) -> Result<Array2<f64>> {
    FixtureTextEncoder::new(cfg.feature_channels, cfg.seed).encode(captions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_split() {
        let mut cfg = EncoderConfig::default();
        assert_eq!(cfg.stem_and_blocks(), (4, 3));
        cfg.spatial_downsample = 1;
        assert_eq!(cfg.stem_and_blocks(), (1, 0));
        cfg.spatial_downsample = 12;
        assert_eq!(cfg.stem_and_blocks(), (3, 2));
    }

    #[test]
    fn external_backbone_has_no_toy_weights() {
        let cfg = EncoderConfig {
            backbone_kind: BackboneKind::External,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reference_shapes_checked() {
        let fg = Array3::zeros((2, 1, 4));
        let bg = Array2::zeros((2, 3));
        assert!(matches!(
            ReferenceEmbeddings::new(fg, bg),
            Err(Error::Dimension(_))
        ));
    }
}
