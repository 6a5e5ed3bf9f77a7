//! Checks that `[Fx, Fy, Ft]` computed on raw frames is orthogonal to the
//! known motion `[vx, vy, 1]`.
//!
//! The Sobel responses are rescaled to image derivatives (`gx = Fx / 6`,
//! `gy = -Fy / 6`) and the residual
//! `mean|vx·gx + vy·gy + Ft| / mean(|gx| + |gy| + |Ft| + 1e-8)` is taken over
//! interior pixels.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{direction_velocity, gen_translating_clip, Clip, Pattern, DIRECTIONS};
use crate::error::{OffError, Result};
use crate::net::{off_layer, spatial_gradient_x, spatial_gradient_y, ConvVars};
use crate::tensor::{Shape, Tape, Tensor};

/// Where the spatial gradient of a frame pair is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradientTime {
    /// On the earlier frame, as the network does.
    Leading,
    /// Mean of both frames' gradients, centred between them in time.
    #[default]
    Midpoint,
}

impl FromStr for GradientTime {
    type Err = OffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leading" => Ok(GradientTime::Leading),
            "midpoint" => Ok(GradientTime::Midpoint),
            _ => Err(OffError::arg(format!("unknown gradient time `{s}` (leading|midpoint)"))),
        }
    }
}

const SOBEL_GAIN: f64 = 6.0;

/// Normalised residual of frames `t` and `t + 1` of `clip`, using its frames
/// directly as features and an identity 1×1 reduction.
pub fn orthogonality_residual(clip: &Clip, t: usize, at: GradientTime) -> Result<f64> {
    let (vx, vy) = clip
        .velocity
        .ok_or_else(|| OffError::arg("clip has no ground-truth velocity"))?;
    if t + 1 >= clip.len() {
        return Err(OffError::arg(format!(
            "frame pair ({t}, {}) outside a {}-frame clip",
            t + 1,
            clip.len()
        )));
    }
    let s = clip.frame_shape();
    if s.h < 3 || s.w < 3 {
        return Err(OffError::shape(format!("frames {s} have no interior")));
    }

    let mut tape = Tape::<f64>::new();
    let identity = Tensor::from_fn(Shape::new(s.c, s.c, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
    let reduce = ConvVars {
        weight: tape.leaf(identity, false),
        bias: tape.leaf(Tensor::zeros(Shape::new(s.c, 1, 1, 1)), false),
    };
    let a = tape.leaf(clip.frame(t).cast(), false);
    let b = tape.leaf(clip.frame(t + 1).cast(), false);
    let off = off_layer(&mut tape, a, b, &reduce)?;
    let (fx, fy) = match at {
        GradientTime::Leading => (off.fx, off.fy),
        GradientTime::Midpoint => {
            let bx = spatial_gradient_x(&mut tape, off.reduced_b)?;
            let by = spatial_gradient_y(&mut tape, off.reduced_b)?;
            let sx = tape.add(off.fx, bx)?;
            let sy = tape.add(off.fy, by)?;
            (tape.scale(sx, 0.5), tape.scale(sy, 0.5))
        }
    };
    let (fx, fy, ft) = (tape.value(fx), tape.value(fy), tape.value(off.ft));

    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..s.c {
        for y in 1..s.h - 1 {
            for x in 1..s.w - 1 {
                let gx = fx.at(0, c, y, x) / SOBEL_GAIN;
                let gy = -fy.at(0, c, y, x) / SOBEL_GAIN;
                let gt = ft.at(0, c, y, x);
                num += (vx * gx + vy * gy + gt).abs();
                den += gx.abs() + gy.abs() + gt.abs() + 1e-8;
            }
        }
    }
    Ok(num / den)
}

/// One cell of the residual grid.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoCell {
    pub sigma: f64,
    pub speed: f64,
    pub direction: usize,
    pub velocity: (f64, f64),
    pub residual: f64,
}

/// Side of the canvas used by [`orthogonality_grid`].
pub const GRID_CANVAS: usize = 64;

/// Residual of a two-frame Gaussian blob for every `(sigma, speed, direction)`,
/// the blob centred on the canvas halfway through its motion.
pub fn orthogonality_grid(sigmas: &[f64], speeds: &[f64], at: GradientTime) -> Result<Vec<OrthoCell>> {
    let mut cells = Vec::with_capacity(sigmas.len() * speeds.len() * DIRECTIONS);
    let centre = (GRID_CANVAS - 1) as f64 / 2.0;
    // starts are explicit, the generator is never drawn from
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for &sigma in sigmas {
        for &speed in speeds {
            if !(speed >= 0.0 && speed.is_finite()) {
                return Err(OffError::arg(format!("speed must be non-negative, got {speed}")));
            }
            for direction in 0..DIRECTIONS {
                let v = direction_velocity(direction, speed);
                let start = (centre - v.0 / 2.0, centre - v.1 / 2.0);
                let clip = gen_translating_clip(&Pattern::Gaussian { sigma }, v, 2, GRID_CANVAS, Some(start), &mut unused)?;
                cells.push(OrthoCell {
                    sigma,
                    speed,
                    direction,
                    velocity: v,
                    residual: orthogonality_residual(&clip, 0, at)?,
                });
            }
        }
    }
    Ok(cells)
}
