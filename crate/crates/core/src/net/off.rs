use super::{residual_block, ConvVars, FeaturePyramid, OffConfig, OffLevelVars, OffVars};
use crate::error::{OffError, Result};
use crate::tensor::{Real, Tape, Var};

/// Horizontal Sobel kernel, rows top to bottom.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]];

/// Vertical Sobel kernel. With y growing downward a ramp `f = y` maps to -6.
pub const SOBEL_Y: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -1.0, -1.0]];

pub fn spatial_gradient_x<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    tape.conv2d_fixed3x3(f, &SOBEL_X)
}

pub fn spatial_gradient_y<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    tape.conv2d_fixed3x3(f, &SOBEL_Y)
}

/// `f_t - f_prev`.
pub fn temporal_gradient<T: Real>(tape: &mut Tape<T>, f_t: Var, f_prev: Var) -> Result<Var> {
    tape.sub(f_t, f_prev)
}

/// Spatial and temporal gradients of the reduced features of one segment pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OffFeature {
    pub fx: Var,
    pub fy: Var,
    pub ft: Var,
    /// Reduced features of the earlier segment.
    pub reduced_a: Var,
    pub reduced_b: Var,
}

impl OffFeature {
    pub fn parts(&self) -> [Var; 3] {
        [self.fx, self.fy, self.ft]
    }
}

/// Shared 1×1 reduction of both segments followed by Sobel on the earlier one
/// and the difference `r_b - r_a`.
pub fn off_layer<T: Real>(
    tape: &mut Tape<T>,
    feat_a: Var,
    feat_b: Var,
    reduce: &ConvVars,
) -> Result<OffFeature> {
    let (sa, sb) = (tape.shape(feat_a), tape.shape(feat_b));
    if sa != sb {
        return Err(OffError::shape(format!("segment features differ: {sa} vs {sb}")));
    }
    let ra = tape.conv1x1(feat_a, reduce.weight, reduce.bias)?;
    let rb = tape.conv1x1(feat_b, reduce.weight, reduce.bias)?;
    Ok(OffFeature {
        fx: spatial_gradient_x(tape, ra)?,
        fy: spatial_gradient_y(tape, ra)?,
        ft: temporal_gradient(tape, rb, ra)?,
        reduced_a: ra,
        reduced_b: rb,
    })
}

/// Input of a level's residual blocks, before refinement.
pub fn off_unit_input<T: Real>(
    tape: &mut Tape<T>,
    feat_a: Var,
    feat_b: Var,
    trunk_in: Option<Var>,
    level: &OffLevelVars,
    ablate: bool,
) -> Result<Var> {
    let off = off_layer(tape, feat_a, feat_b, &level.reduce)?;
    let mut parts = if ablate {
        vec![off.reduced_a]
    } else {
        off.parts().to_vec()
    };
    if let Some(t) = trunk_in {
        let (ts, fs) = (tape.shape(t), tape.shape(off.reduced_a));
        if (ts.n, ts.h, ts.w) != (fs.n, fs.h, fs.w) {
            return Err(OffError::shape(format!(
                "trunk {ts} does not match level features {fs}"
            )));
        }
        parts.push(t);
    }
    tape.concat_channels(&parts)
}

/// One OFF unit: OFF layer, concatenation with the lower-level trunk, then the
/// level's residual blocks.
pub fn off_unit<T: Real>(
    tape: &mut Tape<T>,
    feat_a: Var,
    feat_b: Var,
    trunk_in: Option<Var>,
    level: &OffLevelVars,
    ablate: bool,
) -> Result<Var> {
    let mut x = off_unit_input(tape, feat_a, feat_b, trunk_in, level, ablate)?;
    for block in &level.blocks {
        x = residual_block(tape, x, block)?;
    }
    Ok(x)
}

/// Trunk output of every level, highest resolution first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffTrunk {
    pub levels: Vec<Var>,
}

impl OffTrunk {
    pub fn last(&self) -> Var {
        *self.levels.last().expect("at least one level")
    }
}

pub fn off_subnetwork<T: Real>(
    tape: &mut Tape<T>,
    pyramid_a: &FeaturePyramid,
    pyramid_b: &FeaturePyramid,
    config: &OffConfig,
    params: &OffVars,
) -> Result<OffTrunk> {
    if pyramid_a.len() != config.levels || pyramid_b.len() != config.levels {
        return Err(OffError::config(format!(
            "pyramids have {} and {} levels, config expects {}",
            pyramid_a.len(),
            pyramid_b.len(),
            config.levels
        )));
    }
    if params.levels.len() != config.levels || params.downs.len() + 1 != config.levels {
        return Err(OffError::config("OFF parameters do not match the level count"));
    }
    let mut levels = Vec::with_capacity(config.levels);
    let mut trunk: Option<Var> = None;
    for l in 0..config.levels {
        let trunk_in = match (trunk, l) {
            (Some(t), l) if l > 0 => Some(residual_block(tape, t, &params.downs[l - 1])?),
            _ => None,
        };
        let out = off_unit(
            tape,
            pyramid_a.levels[l],
            pyramid_b.levels[l],
            trunk_in,
            &params.levels[l],
            config.ablate_off_layer,
        )?;
        levels.push(out);
        trunk = Some(out);
    }
    Ok(OffTrunk { levels })
}
