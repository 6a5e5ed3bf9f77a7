use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OffError, Result};
use crate::tensor::{Shape, Tensor};

/// Number of motion classes in the direction dataset.
pub const DIRECTIONS: usize = 8;

/// Unit vectors at `k * 45°` in image coordinates (y grows downward).
pub const DIRECTION_UNITS: [(f64, f64); DIRECTIONS] = [
    (1.0, 0.0),
    (FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    (0.0, 1.0),
    (-FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    (-1.0, 0.0),
    (-FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
    (0.0, -1.0),
    (FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
];

pub fn direction_velocity(class: usize, speed: f64) -> (f64, f64) {
    let (ux, uy) = DIRECTION_UNITS[class % DIRECTIONS];
    (speed * ux, speed * uy)
}

/// A continuous intensity pattern centred on the origin, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    Gaussian { sigma: f64 },
    /// Filled square of `side` pixels, bilinear edges.
    Square { side: usize },
    /// `count` vertical bars of `width` pixels separated by equal gaps.
    Bars { width: usize, count: usize },
}

impl Pattern {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Pattern::Gaussian { sigma } => sigma > 0.0 && sigma.is_finite(),
            Pattern::Square { side } => side > 0,
            Pattern::Bars { width, count } => width > 0 && count > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(OffError::arg(format!("degenerate pattern {self:?}")))
        }
    }

    /// Half-width of the region the pattern must keep inside the frame.
    pub fn radius(&self) -> f64 {
        match *self {
            Pattern::Gaussian { sigma } => 2.0 * sigma,
            _ => (self.texture_side() as f64 - 1.0) / 2.0,
        }
    }

    fn texture_side(&self) -> usize {
        match *self {
            Pattern::Gaussian { .. } => 0,
            Pattern::Square { side } => side + 2,
            Pattern::Bars { width, count } => (2 * count - 1) * width + 2,
        }
    }

    fn texel(&self, i: isize, j: isize) -> f64 {
        let n = self.texture_side() as isize;
        if i <= 0 || j <= 0 || i >= n - 1 || j >= n - 1 {
            return 0.0;
        }
        match *self {
            Pattern::Bars { width, .. } => {
                if ((j - 1) as usize / width).is_multiple_of(2) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => 1.0,
        }
    }

    /// Intensity at offset `(dx, dy)` from the centre.
    pub fn value(&self, dx: f64, dy: f64) -> f64 {
        match *self {
            Pattern::Gaussian { sigma } => (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp(),
            _ => {
                let c = (self.texture_side() as f64 - 1.0) / 2.0;
                let (u, v) = (dx + c, dy + c);
                let (j0, i0) = (u.floor(), v.floor());
                let (fx, fy) = (u - j0, v - i0);
                let (i0, j0) = (i0 as isize, j0 as isize);
                let top = (1.0 - fx) * self.texel(i0, j0) + fx * self.texel(i0, j0 + 1);
                let bottom = (1.0 - fx) * self.texel(i0 + 1, j0) + fx * self.texel(i0 + 1, j0 + 1);
                (1.0 - fy) * top + fy * bottom
            }
        }
    }
}

/// A pattern translating with constant velocity: `I(x, y, t) = P(x - cx(t), y - cy(t))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    pub pattern: Pattern,
    /// Pattern centre at `t = 0`, in pixels (x right, y down).
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

impl Motion {
    pub fn centre(&self, t: f64) -> (f64, f64) {
        (
            self.start.0 + self.velocity.0 * t,
            self.start.1 + self.velocity.1 * t,
        )
    }

    pub fn value(&self, x: f64, y: f64, t: f64) -> f64 {
        let (cx, cy) = self.centre(t);
        self.pattern.value(x - cx, y - cy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `[T, C, H, W]`, one frame per batch slot.
    pub frames: Tensor<f32>,
    pub label: usize,
    pub velocity: Option<(f64, f64)>,
    /// Continuous description for generated clips; absent for loaded ones.
    pub motion: Option<Motion>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_shape(&self) -> Shape {
        let s = self.frames.shape();
        Shape::new(1, s.c, s.h, s.w)
    }

    /// Frame `t` as a `[1, C, H, W]` tensor.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.batch_item(t)
    }
}

fn legal_range(radius: f64, v: f64, frames: usize, size: usize) -> (f64, f64) {
    let travel = v * (frames - 1) as f64;
    let lo = radius - travel.min(0.0);
    let hi = (size - 1) as f64 - radius - travel.max(0.0);
    (lo, hi)
}

/// Renders `frames` frames of `pattern` moving at `velocity` px/frame on a
/// square `size`×`size` canvas. Without `start` a legal centre is drawn from
/// `rng`.
pub fn gen_translating_clip<R: Rng + ?Sized>(
    pattern: &Pattern,
    velocity: (f64, f64),
    frames: usize,
    size: usize,
    start: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<Clip> {
    pattern.validate()?;
    if frames < 2 {
        return Err(OffError::arg(format!("clips need at least 2 frames, got {frames}")));
    }
    if size == 0 {
        return Err(OffError::arg("frame size must be positive"));
    }
    let r = pattern.radius();
    let (xlo, xhi) = legal_range(r, velocity.0, frames, size);
    let (ylo, yhi) = legal_range(r, velocity.1, frames, size);
    let start = match start {
        Some(s) => {
            if !(xlo..=xhi).contains(&s.0) || !(ylo..=yhi).contains(&s.1) {
                return Err(OffError::OutOfBounds(format!(
                    "centre {s:?} moving at {velocity:?} leaves the {size}x{size} frame within {frames} frames"
                )));
            }
            s
        }
        None => {
            if xlo > xhi || ylo > yhi {
                return Err(OffError::OutOfBounds(format!(
                    "no start keeps {pattern:?} at {velocity:?} inside {size}x{size} for {frames} frames"
                )));
            }
            (rng.gen_range(xlo..=xhi), rng.gen_range(ylo..=yhi))
        }
    };
    let motion = Motion {
        pattern: pattern.clone(),
        start,
        velocity,
    };
    let frames_t = Tensor::from_fn(Shape::new(frames, 1, size, size), |t, _, y, x| {
        motion.value(x as f64, y as f64, t as f64) as f32
    });
    Ok(Clip {
        frames: frames_t,
        label: 0,
        velocity: Some(velocity),
        motion: Some(motion),
    })
}

/// Parameters of the eight-direction dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionDataset {
    pub clips_per_class: usize,
    pub frames: usize,
    pub size: usize,
    pub speed: f64,
    pub pattern: Pattern,
    pub seed: u64,
}

impl DirectionDataset {
    pub fn clip_count(&self) -> usize {
        self.clips_per_class * DIRECTIONS
    }

    /// Clip `id`; its label is `id % 8` and its randomness comes from its own
    /// stream of the master seed.
    pub fn clip(&self, id: usize) -> Result<Clip> {
        let label = id % DIRECTIONS;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id as u64);
        let v = direction_velocity(label, self.speed);
        let mut clip = gen_translating_clip(&self.pattern, v, self.frames, self.size, None, &mut rng)?;
        clip.label = label;
        Ok(clip)
    }

    pub fn generate(&self) -> Result<Vec<Clip>> {
        (0..self.clip_count()).map(|id| self.clip(id)).collect()
    }
}

/// Balanced 8-class dataset of blobs moving at `speed` px/frame in the
/// direction `label * 45°`.
pub fn gen_direction_dataset(
    clips_per_class: usize,
    frames: usize,
    size: usize,
    speed: f64,
    pattern: Pattern,
    seed: u64,
) -> Result<Vec<Clip>> {
    DirectionDataset {
        clips_per_class,
        frames,
        size,
        speed,
        pattern,
        seed,
    }
    .generate()
}

/// Largest `|frame[t+1](x, y) - I(x - vx, y - vy, t)|` over interior pixels
/// and consecutive frame pairs, with `I` the clip's continuous pattern.
pub fn brightness_constancy_error(clip: &Clip) -> Result<f64> {
    let motion = clip
        .motion
        .as_ref()
        .ok_or_else(|| OffError::arg("clip carries no continuous motion"))?;
    let s = clip.frames.shape();
    let (vx, vy) = motion.velocity;
    let mut worst = 0.0f64;
    for t in 0..s.n.saturating_sub(1) {
        for y in 1..s.h.saturating_sub(1) {
            for x in 1..s.w.saturating_sub(1) {
                let next = clip.frames.at(t + 1, 0, y, x) as f64;
                let back = motion.value(x as f64 - vx, y as f64 - vy, t as f64);
                worst = worst.max((next - back).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn still_pattern_repeats_frames() {
        let clip = gen_translating_clip(&Pattern::Gaussian { sigma: 3.0 }, (0.0, 0.0), 4, 24, None, &mut rng()).unwrap();
        for t in 1..4 {
            assert_eq!(clip.frame(t), clip.frame(0));
        }
    }

    #[test]
    fn unit_velocity_shifts_one_column() {
        for pattern in [
            Pattern::Gaussian { sigma: 2.5 },
            Pattern::Square { side: 5 },
            Pattern::Bars { width: 2, count: 3 },
        ] {
            let clip = gen_translating_clip(&pattern, (1.0, 0.0), 3, 24, Some((9.25, 11.5)), &mut rng()).unwrap();
            for t in 0..2 {
                for y in 0..24 {
                    for x in 1..24 {
                        assert_eq!(clip.frames.at(t + 1, 0, y, x), clip.frames.at(t, 0, y, x - 1));
                    }
                }
            }
        }
    }

    #[test]
    fn gaussian_matches_closed_form() {
        let clip = gen_translating_clip(&Pattern::Gaussian { sigma: 4.0 }, (0.5, -0.25), 2, 32, Some((15.0, 16.0)), &mut rng()).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let (dx, dy) = (x as f64 - 15.5, y as f64 - 15.75);
                let want = (-(dx * dx + dy * dy) / 32.0).exp();
                assert!((clip.frames.at(1, 0, y, x) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn square_texture_is_bilinear() {
        let p = Pattern::Square { side: 2 };
        assert_eq!(p.value(0.0, 0.0), 1.0);
        assert_eq!(p.value(1.5, 0.0), 0.0);
        assert!((p.value(1.0, 0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn leaving_the_frame_is_rejected() {
        let err = gen_translating_clip(&Pattern::Gaussian { sigma: 3.0 }, (2.0, 0.0), 16, 32, Some((20.0, 16.0)), &mut rng());
        assert!(matches!(err, Err(OffError::OutOfBounds(_))));
        let err = gen_translating_clip(&Pattern::Gaussian { sigma: 3.0 }, (3.0, 0.0), 16, 32, None, &mut rng());
        assert!(matches!(err, Err(OffError::OutOfBounds(_))));
    }

    #[test]
    fn dataset_is_balanced_and_labelled_by_direction() {
        let clips = gen_direction_dataset(3, 6, 24, 1.0, Pattern::Gaussian { sigma: 2.0 }, 1).unwrap();
        assert_eq!(clips.len(), 24);
        for (id, c) in clips.iter().enumerate() {
            assert_eq!(c.label, id % 8);
            assert_eq!(c.velocity, Some(direction_velocity(c.label, 1.0)));
            assert!(c.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn clips_are_independent_of_generation_order() {
        let spec = DirectionDataset {
            clips_per_class: 2,
            frames: 4,
            size: 20,
            speed: 1.0,
            pattern: Pattern::Gaussian { sigma: 2.0 },
            seed: 99,
        };
        let all = spec.generate().unwrap();
        assert_eq!(spec.clip(13).unwrap(), all[13]);
        assert_ne!(all[0].motion, all[8].motion);
    }

    #[test]
    fn brightness_is_constant_along_motion() {
        let clip = gen_translating_clip(&Pattern::Gaussian { sigma: 3.0 }, (0.7, -1.3), 5, 32, None, &mut rng()).unwrap();
        assert!(brightness_constancy_error(&clip).unwrap() < 1e-5);
    }
}
