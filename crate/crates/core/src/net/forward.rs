use super::{
    aggregate_segments, backbone_forward, fuse_streams, level_classifier, off_subnetwork,
    FeaturePyramid, NetVars, OffConfig,
};
use crate::error::{OffError, Result};
use crate::tensor::{Real, Tape, Var};

/// Which streams a forward pass computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    pub rgb: bool,
    pub off: bool,
}

impl Streams {
    pub const RGB: Streams = Streams { rgb: true, off: false };
    pub const OFF: Streams = Streams { rgb: false, off: true };
    pub const ALL: Streams = Streams { rgb: true, off: true };
}

/// Logits of one classifier: one entry per segment (or segment pair) and
/// their mean.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelScores {
    pub per_segment: Vec<Var>,
    pub aggregated: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamScores {
    /// One entry per supervised level; the RGB stream has exactly one.
    pub levels: Vec<LevelScores>,
}

impl StreamScores {
    pub fn last(&self) -> &LevelScores {
        self.levels.last().expect("streams have at least one level")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoreSet {
    pub rgb: Option<StreamScores>,
    pub off: Option<StreamScores>,
    pub pyramids: Vec<FeaturePyramid>,
}

impl ScoreSet {
    /// RGB scores plus the last OFF level, or whichever of the two exists.
    pub fn fused<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let mut parts = Vec::new();
        if let Some(rgb) = &self.rgb {
            parts.push(rgb.last().aggregated);
        }
        if let Some(off) = &self.off {
            parts.push(off.last().aggregated);
        }
        fuse_streams(tape, &parts)
    }
}

/// Scores of every requested stream for a batch of clips. Each entry of
/// `segments` is one sampled frame per clip, `[N, Cin, H, W]`.
pub fn network_forward<T: Real>(
    tape: &mut Tape<T>,
    segments: &[Var],
    vars: &NetVars,
    config: &OffConfig,
    streams: Streams,
) -> Result<ScoreSet> {
    if segments.is_empty() {
        return Err(OffError::arg("network needs at least one segment"));
    }
    if streams.off && segments.len() < 2 {
        return Err(OffError::arg(format!(
            "OFF stream needs at least 2 segments, got {}",
            segments.len()
        )));
    }
    let pyramids = segments
        .iter()
        .map(|&s| backbone_forward(tape, s, config, &vars.backbone))
        .collect::<Result<Vec<_>>>()?;

    let rgb = if streams.rgb {
        let per_segment = pyramids
            .iter()
            .map(|p| {
                let top = *p.levels.last().expect("non-empty pyramid");
                level_classifier(tape, top, &vars.rgb_head)
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregated = aggregate_segments(tape, &per_segment)?;
        Some(StreamScores {
            levels: vec![LevelScores {
                per_segment,
                aggregated,
            }],
        })
    } else {
        None
    };

    let off = if streams.off {
        let off_vars = vars.off()?;
        let mut per_level: Vec<Vec<Var>> = vec![Vec::new(); config.levels];
        for pair in pyramids.windows(2) {
            let trunk = off_subnetwork(tape, &pair[0], &pair[1], config, off_vars)?;
            for (l, &feat) in trunk.levels.iter().enumerate() {
                per_level[l].push(level_classifier(tape, feat, &off_vars.levels[l].head)?);
            }
        }
        let levels = per_level
            .into_iter()
            .map(|per_segment| {
                let aggregated = aggregate_segments(tape, &per_segment)?;
                Ok(LevelScores {
                    per_segment,
                    aggregated,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(StreamScores { levels })
    } else {
        None
    };

    Ok(ScoreSet { rgb, off, pyramids })
}
