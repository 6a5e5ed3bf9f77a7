//! The OFF network: a small feature-generation backbone, the OFF sub-network
//! with residual refinement, per-level classifiers, and score fusion.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. A forward pass
//! binds the store onto a tape once ([`BoundParams`]) and then resolves the
//! typed views in [`NetVars`], so every use of a parameter within one pass
//! refers to the same tape leaf.

mod backbone;
mod blocks;
mod forward;
mod heads;
mod off;
mod params;

pub use backbone::backbone_forward;
pub use blocks::residual_block;
pub use forward::{network_forward, LevelScores, ScoreSet, StreamScores, Streams};
pub use heads::{aggregate_segments, fuse_streams, level_classifier};
pub use off::{
    off_layer, off_subnetwork, off_unit, off_unit_input, spatial_gradient_x, spatial_gradient_y,
    temporal_gradient, OffFeature, OffTrunk, SOBEL_X, SOBEL_Y,
};
pub use params::{
    init_params, param_layout, BackboneVars, BlockVars, BoundParams, ConvVars, NetVars,
    OffLevelVars, OffVars, ParamGroup, ParamSpec, ParamStore,
};

use crate::error::{OffError, Result};
use crate::tensor::{Tensor, Var};

/// Network shape. The defaults are the desk-scale configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct OffConfig {
    /// Resolution levels; each emits one backbone feature map and one OFF unit.
    pub levels: usize,
    /// Channels after the 1×1 reduction in each OFF layer.
    pub reduced_channels: usize,
    /// Residual blocks after each OFF unit's concatenation.
    pub blocks_per_level: usize,
    pub classes: usize,
    /// Hypercolumn ablation: feed reduced features instead of `[Fx, Fy, Ft]`.
    pub ablate_off_layer: bool,
    pub input_channels: usize,
    /// Backbone output channels per level.
    pub backbone_channels: Vec<usize>,
    /// Refinement trunk width; `None` means `2 * reduced_channels`.
    pub trunk_channels: Option<usize>,
}

impl Default for OffConfig {
    fn default() -> Self {
        OffConfig {
            levels: 3,
            reduced_channels: 32,
            blocks_per_level: 2,
            classes: 8,
            ablate_off_layer: false,
            input_channels: 1,
            backbone_channels: vec![16, 32, 32],
            trunk_channels: None,
        }
    }
}

impl OffConfig {
    pub fn trunk_width(&self) -> usize {
        self.trunk_channels.unwrap_or(2 * self.reduced_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(OffError::config("levels must be at least 1"));
        }
        if self.reduced_channels < 1 {
            return Err(OffError::config("reduced_channels must be at least 1"));
        }
        if self.blocks_per_level < 1 {
            return Err(OffError::config("blocks_per_level must be at least 1"));
        }
        if self.classes < 2 {
            return Err(OffError::config("classes must be at least 2"));
        }
        if self.input_channels < 1 {
            return Err(OffError::config("input_channels must be at least 1"));
        }
        if self.backbone_channels.len() != self.levels {
            return Err(OffError::config(format!(
                "backbone_channels lists {} levels, config has {}",
                self.backbone_channels.len(),
                self.levels
            )));
        }
        if self.backbone_channels.contains(&0) || self.trunk_width() == 0 {
            return Err(OffError::config("channel counts must be positive"));
        }
        Ok(())
    }

    /// Channels entering level `l`'s residual blocks.
    pub fn unit_input_channels(&self, level: usize) -> usize {
        let off = if self.ablate_off_layer {
            self.reduced_channels
        } else {
            3 * self.reduced_channels
        };
        if level == 0 {
            off
        } else {
            off + self.trunk_width()
        }
    }

    /// Smallest spatial extent multiple the backbone accepts.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Backbone features of one segment, highest resolution first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Value-level copy of a pyramid, detached from any tape.
pub fn pyramid_values<T: crate::tensor::Real>(
    tape: &crate::tensor::Tape<T>,
    p: &FeaturePyramid,
) -> Vec<Tensor<T>> {
    p.levels.iter().map(|&v| tape.value(v).clone()).collect()
}
