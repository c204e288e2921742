//! Tiny anchor-free detector: a strided convolutional backbone, a three-level
//! top-down feature pyramid and two decoupled single-class heads.

mod checkpoint;
mod decode;
pub mod layers;
mod network;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Stage};
pub use decode::{assign_level, decode, encode, postprocess, predict, Detections};
pub use network::{Detector, FeatureCache, HeadCache, HeadOutput, LevelOutput};
pub use params::{DetectorParams, Segment};

use crate::error::{Error, Result};
use crate::geometry::Klass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub strides: Vec<usize>,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub num_heads: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 256,
            strides: vec![8, 16, 32],
            width_mult: 1.0,
            depth_mult: 1.0,
            num_heads: 2,
        }
    }
}

impl DetectorConfig {
    /// Small configuration used for the synthetic desk-scale corpus.
    pub fn desk() -> Self {
        DetectorConfig { input_size: 64, strides: vec![4, 8, 16], width_mult: 0.5, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads != 2 {
            return Err(Error::Config(format!("num_heads must be 2, got {}", self.num_heads)));
        }
        let s0 = *self.strides.first().unwrap_or(&0);
        if self.strides.len() != 3
            || s0 < 2
            || !s0.is_power_of_two()
            || self.strides[1] != 2 * s0
            || self.strides[2] != 4 * s0
        {
            return Err(Error::Config(format!(
                "strides must be [s, 2s, 4s] with s a power of two >= 2, got {:?}",
                self.strides
            )));
        }
        if self.input_size == 0 || self.input_size % self.strides[2] != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by the largest stride {}",
                self.input_size, self.strides[2]
            )));
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(Error::Config("width_mult must be positive".into()));
        }
        if !(self.depth_mult >= 0.0 && self.depth_mult.is_finite()) {
            return Err(Error::Config("depth_mult must be non-negative".into()));
        }
        Ok(())
    }

    /// Grid side per pyramid level.
    pub fn grid_sizes(&self) -> Vec<usize> {
        self.strides.iter().map(|s| self.input_size / s).collect()
    }
}

/// Head trained at a given optimizer step: face on even steps, body on odd ones.
pub fn alternate_head(iteration: u64) -> Klass {
    if iteration % 2 == 0 {
        Klass::Face
    } else {
        Klass::Body
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternation() {
        assert_eq!(alternate_head(0), Klass::Face);
        assert_eq!(alternate_head(1), Klass::Body);
        assert_eq!(alternate_head(2), Klass::Face);
        for i in 0..100 {
            assert_eq!(alternate_head(i), alternate_head(i + 2));
        }
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        assert!(DetectorConfig::desk().validate().is_ok());
        let bad = DetectorConfig { input_size: 100, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DetectorConfig { strides: vec![8, 16], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DetectorConfig { num_heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(DetectorConfig::default().grid_sizes(), vec![32, 16, 8]);
    }
}
