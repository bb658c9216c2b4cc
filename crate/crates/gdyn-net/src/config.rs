//! Architecture configuration and size presets.
//!
//! All tensor shapes in the network derive from this one struct, so a
//! checkpoint can be validated against it and the blocks never hard-code a
//! dimension.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("map width {width} not divisible by 2^{downs} (stride-2 encoder stages)")]
    WidthNotDivisible { width: usize, downs: usize },
    #[error("encoder bottleneck collapsed: width {width} over {downs} stride-2 stages")]
    BottleneckCollapsed { width: usize, downs: usize },
    #[error("motion encoder must end at {expect} channels (S output), ends at {got}")]
    MotionChannels { got: usize, expect: usize },
    #[error("{field} must be non-empty")]
    Empty { field: &'static str },
    #[error("{field} must be positive")]
    Zero { field: &'static str },
}

/// Channel schedules and sizes for every block. `s_channels` are stride-1
/// convs (last entry is the shared feature width F); `e_channels` are the
/// stride-2 stages shared by both encoders; the decoder mirrors `e_channels`
/// in reverse and then upsamples once more to twice the map width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    /// Feature map resolution w (maps are w x w).
    pub map_width: usize,
    /// Seed count N; body-relative maps carry 3N channels.
    pub seed_count: usize,
    /// Number of driver parts (one learnable kernel radius each).
    pub part_count: usize,
    pub latent_dim: usize,
    pub s_channels: Vec<usize>,
    pub e_channels: Vec<usize>,
    pub c_channels: Vec<usize>,
    /// Hidden widths of the per-vertex MLP head (input F+2, output 3).
    pub r_hidden: Vec<usize>,
}

impl ArchConfig {
    /// Channel count of body-relative position and interaction maps.
    pub fn input_channels(&self) -> usize {
        3 * self.seed_count
    }

    /// Shared feature width F: output channels of S, C, and the decoded
    /// geometry feature map.
    pub fn f_channels(&self) -> usize {
        *self.s_channels.last().unwrap()
    }

    /// Spatial width after all stride-2 encoder stages.
    pub fn bottleneck_width(&self) -> usize {
        self.map_width >> self.e_channels.len()
    }

    /// Flattened size feeding the encoder's final linear layer.
    pub fn bottleneck_numel(&self) -> usize {
        let b = self.bottleneck_width();
        b * b * self.e_channels.last().unwrap()
    }

    /// Resolution of the decoded geometry feature map (one extra 2x stage).
    pub fn xi_width(&self) -> usize {
        2 * self.map_width
    }

    /// Output channel list of the decoder's mirrored transpose convs: the
    /// encoder stage input channels, reversed. The extra upsampling layer to
    /// `xi_width` keeps F channels.
    pub fn d_channels(&self) -> Vec<usize> {
        let mut inputs = vec![self.f_channels()];
        inputs.extend_from_slice(&self.e_channels[..self.e_channels.len() - 1]);
        inputs.reverse();
        inputs
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("map_width", self.map_width),
            ("seed_count", self.seed_count),
            ("part_count", self.part_count),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero { field });
            }
        }
        for (field, list) in [
            ("s_channels", &self.s_channels),
            ("e_channels", &self.e_channels),
            ("c_channels", &self.c_channels),
        ] {
            if list.is_empty() {
                return Err(ConfigError::Empty { field });
            }
            if list.iter().any(|&c| c == 0) {
                return Err(ConfigError::Zero { field });
            }
        }
        let downs = self.e_channels.len();
        if self.map_width % (1 << downs) != 0 {
            return Err(ConfigError::WidthNotDivisible {
                width: self.map_width,
                downs,
            });
        }
        if self.bottleneck_width() == 0 {
            return Err(ConfigError::BottleneckCollapsed {
                width: self.map_width,
                downs,
            });
        }
        if *self.c_channels.last().unwrap() != self.f_channels() {
            return Err(ConfigError::MotionChannels {
                got: *self.c_channels.last().unwrap(),
                expect: self.f_channels(),
            });
        }
        Ok(())
    }

    /// Full-scale preset: 128x128 maps, 581 seeds, 64-dim latent, encoder
    /// stages 128-256-512-1024-1024-1024, six-layer vertex MLP.
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            map_width: 128,
            seed_count: 581,
            part_count: 5,
            latent_dim: 64,
            s_channels: vec![128, 128, 128, 128],
            e_channels: vec![128, 256, 512, 1024, 1024, 1024],
            c_channels: vec![128; 6],
            r_hidden: vec![128; 5],
        }
    }

    /// Desk-scale training preset: 32x32 maps, 32 seeds, 16-dim latent.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            map_width: 32,
            seed_count: 32,
            part_count: 1,
            latent_dim: 16,
            s_channels: vec![16, 16],
            e_channels: vec![16, 32, 64],
            c_channels: vec![16, 16],
            r_hidden: vec![32, 32],
        }
    }

    /// Minimal preset for fp64 gradient verification: 8x8 maps, 4 seeds.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            map_width: 8,
            seed_count: 4,
            part_count: 1,
            latent_dim: 8,
            s_channels: vec![8, 8],
            e_channels: vec![8, 16],
            c_channels: vec![8, 8],
            r_hidden: vec![16, 16],
        }
    }
}
