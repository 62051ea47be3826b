use crate::error::{Error, Result};
use crate::octree::{check_sides, levels};

/// Side of every node feature map.
pub const FEATURE_SIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub grid_side: usize,
    pub leaf_side: usize,
    pub feature_channels: usize,
    pub merge_channels: usize,
    pub latent_dim: usize,
    /// Output classes of the shape classification head; 0 means no head.
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_side: 32,
            leaf_side: 8,
            feature_channels: 64,
            merge_channels: 128,
            latent_dim: 80,
            n_classes: 0,
        }
    }
}

/// One convolution stage of the leaf encoder or decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ModelConfig {
    pub fn new(grid_side: usize, leaf_side: usize) -> Self {
        ModelConfig { grid_side, leaf_side, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        check_sides(self.grid_side, self.leaf_side)?;
        if self.feature_channels == 0 || self.merge_channels == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        let stages = self.leaf_encoder_stages();
        if stages.iter().any(|s| s.out_channels == 0) {
            return Err(Error::InvalidArgument(format!(
                "feature channels {} too small for leaf side {}",
                self.feature_channels, self.leaf_side
            )));
        }
        Ok(())
    }

    /// Node encoder/decoder levels, `log2(N / k)`.
    pub fn levels(&self) -> usize {
        levels(self.grid_side, self.leaf_side)
    }

    /// Output channels of each leaf encoder stage: the tail of a doubling
    /// ladder that ends at `feature_channels` (16, 32, 64 for k = 32).
    pub fn leaf_channel_schedule(&self) -> Vec<usize> {
        let stages = (self.leaf_side / FEATURE_SIDE).trailing_zeros() as usize;
        if stages == 0 {
            return vec![self.feature_channels];
        }
        (0..stages).map(|i| self.feature_channels >> (stages - 1 - i)).collect()
    }

    pub fn leaf_encoder_stages(&self) -> Vec<ConvStage> {
        let schedule = self.leaf_channel_schedule();
        if self.leaf_side == FEATURE_SIDE {
            return vec![ConvStage { in_channels: 1, out_channels: schedule[0], kernel: 3, stride: 1, padding: 1 }];
        }
        let mut cin = 1;
        schedule
            .iter()
            .map(|&c| {
                let s = ConvStage { in_channels: cin, out_channels: c, kernel: 4, stride: 2, padding: 1 };
                cin = c;
                s
            })
            .collect()
    }

    /// Mirror of the encoder: doubles the side back to `leaf_side`, last stage outputs one channel.
    pub fn leaf_decoder_stages(&self) -> Vec<ConvStage> {
        self.leaf_encoder_stages()
            .iter()
            .rev()
            .map(|s| ConvStage { in_channels: s.out_channels, out_channels: s.in_channels, ..*s })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_schedules() {
        let c = ModelConfig::new(64, 32);
        assert_eq!(c.leaf_channel_schedule(), vec![16, 32, 64]);
        let dec: Vec<usize> = c.leaf_decoder_stages().iter().map(|s| s.out_channels).collect();
        assert_eq!(dec, vec![32, 16, 1]);
        assert_eq!(ModelConfig::new(32, 16).leaf_channel_schedule(), vec![32, 64]);
        assert_eq!(ModelConfig::new(32, 8).leaf_channel_schedule(), vec![64]);
        let k4 = ModelConfig::new(8, 4).leaf_encoder_stages();
        assert_eq!(k4, vec![ConvStage { in_channels: 1, out_channels: 64, kernel: 3, stride: 1, padding: 1 }]);
        assert_eq!(ModelConfig::new(32, 8).levels(), 2);
    }
}
