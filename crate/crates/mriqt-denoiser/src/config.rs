//! Model hyperparameters, serialized into checkpoint headers.

use crate::error::{DenoiserError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channels at full resolution; deeper levels use `base * mult`.
    pub base_channels: usize,
    /// One entry per resolution level; the network downsamples
    /// `channel_mults.len() - 1` times.
    pub channel_mults: Vec<usize>,
    pub attn_at_bottleneck: bool,
    pub time_embed_dim: usize,
    /// Always 2: noised volume ⊕ condition volume.
    pub in_channels: usize,
    /// Always 1: the predicted velocity.
    pub out_channels: usize,
}

impl Default for DenoiserConfig {
    /// Desk-scale default: small enough to train on a single CPU core.
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_mults: vec![1, 2, 4],
            attn_at_bottleneck: true,
            time_embed_dim: 64,
            in_channels: 2,
            out_channels: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DenoiserError::ConfigInvalid(m));
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.channel_mults.is_empty() {
            return bad("channel_mults must be non-empty".into());
        }
        if self.channel_mults.iter().any(|&m| m == 0) {
            return bad("channel_mults entries must be positive".into());
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad(format!(
                "time_embed_dim {} must be even and >= 2",
                self.time_embed_dim
            ));
        }
        if self.in_channels != 2 {
            return bad(format!(
                "in_channels {} unsupported (noised ⊕ condition = 2)",
                self.in_channels
            ));
        }
        if self.out_channels != 1 {
            return bad(format!("out_channels {} unsupported", self.out_channels));
        }
        Ok(())
    }

    /// Channel count at each resolution level.
    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| self.base_channels * m)
            .collect()
    }

    /// Spatial dims must be divisible by this.
    pub fn divisibility(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }

    pub fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        let f = self.divisibility();
        if shape.iter().any(|&d| d % f != 0) {
            return Err(DenoiserError::IndivisibleSpatialDims { shape, factor: f });
        }
        Ok(())
    }
}

/// Largest divisor of `channels` that is at most 8, the group count used by
/// every normalization layer.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        DenoiserConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut c = DenoiserConfig::default();
        c.base_channels = 0;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.channel_mults = vec![];
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.time_embed_dim = 15;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.in_channels = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn divisibility_matches_depth() {
        let c = DenoiserConfig::default();
        assert_eq!(c.divisibility(), 4);
        assert!(c.check_shape([16, 16, 16]).is_ok());
        assert!(c.check_shape([16, 18, 16]).is_err());
        let shallow = DenoiserConfig {
            channel_mults: vec![1],
            ..Default::default()
        };
        assert_eq!(shallow.divisibility(), 1);
        assert!(shallow.check_shape([5, 7, 9]).is_ok());
    }

    #[test]
    fn group_counts_divide_channels() {
        for c in 1..=64 {
            let g = norm_groups(c);
            assert!(g >= 1 && g <= 8);
            assert_eq!(c % g, 0);
        }
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(7), 7);
    }
}
