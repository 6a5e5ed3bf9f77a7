use super::{accuracy, check_dataset, gather_segments, Checkpoint};
use crate::data::SamplePlan;
use crate::data::Clip;
use crate::error::{OffError, Result};
use crate::net::{NetVars, Streams};
use crate::tensor::{Shape, Tape, Tensor, Var};

/// Aggregated test-time scores of every clip, `[N, classes]` per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalScores {
    pub labels: Vec<usize>,
    pub rgb: Tensor<f32>,
    /// One entry per OFF level; empty when the checkpoint has no OFF stream.
    pub off_levels: Vec<Tensor<f32>>,
    pub hypercolumn: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub clips: usize,
    pub rgb: f64,
    pub off_levels: Vec<f64>,
    /// Last OFF level.
    pub off: Option<f64>,
    /// RGB plus the last OFF level.
    pub fused: Option<f64>,
    /// The OFF stream was trained with the OFF layer replaced by reduced features.
    pub hypercolumn: bool,
}

impl EvalScores {
    /// Elementwise sum of the RGB and last-level OFF scores.
    pub fn fused(&self) -> Option<Tensor<f32>> {
        let off = self.off_levels.last()?;
        let data = self.rgb.data().iter().zip(off.data()).map(|(a, b)| a + b).collect();
        Some(Tensor::from_vec(self.rgb.shape(), data).expect("same shape"))
    }

    pub fn report(&self) -> EvalReport {
        let acc = |t: &Tensor<f32>| accuracy(&t.argmax_rows(), &self.labels);
        let off_levels: Vec<f64> = self.off_levels.iter().map(acc).collect();
        EvalReport {
            clips: self.labels.len(),
            rgb: acc(&self.rgb),
            off: off_levels.last().copied(),
            fused: self.fused().as_ref().map(acc),
            off_levels,
            hypercolumn: self.hypercolumn,
        }
    }
}

fn concat_rows(parts: &[Tensor<f32>], classes: usize) -> Tensor<f32> {
    let data: Vec<f32> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len() / classes;
    Tensor::from_vec(Shape::matrix(n, classes), data).expect("whole rows")
}

/// Scores every clip on its `beta` centred test segments.
pub fn score_dataset(ckpt: &Checkpoint, clips: &[Clip], beta: usize, batch: usize) -> Result<EvalScores> {
    ckpt.validate()?;
    let config = &ckpt.config;
    check_dataset(config, clips)?;
    if batch == 0 {
        return Err(OffError::arg("batch size must be positive"));
    }
    let streams = Streams {
        rgb: true,
        off: ckpt.has_off(),
    };
    if streams.off && beta < 2 {
        return Err(OffError::arg("the OFF stream needs beta >= 2 test segments"));
    }
    let mut rgb_parts = Vec::new();
    let mut off_parts: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); if streams.off { config.levels } else { 0 }];
    let ids: Vec<usize> = (0..clips.len()).collect();
    for chunk in ids.chunks(batch) {
        let frames = chunk
            .iter()
            .map(|&i| Ok(SamplePlan::new(clips[i].len(), 1, beta)?.test_indices()))
            .collect::<Result<Vec<_>>>()?;
        let segments = gather_segments(clips, chunk, &frames)?;
        let mut tape = Tape::<f32>::new();
        let bound = ckpt.params.bind(&mut tape, |_| false);
        let vars = NetVars::resolve(&bound, config)?;
        let segs: Vec<Var> = segments.into_iter().map(|s| tape.constant(s)).collect();
        let scores = crate::net::network_forward(&mut tape, &segs, &vars, config, streams)?;
        if let Some(rgb) = &scores.rgb {
            rgb_parts.push(tape.value(rgb.last().aggregated).clone());
        }
        if let Some(off) = &scores.off {
            for (l, level) in off.levels.iter().enumerate() {
                off_parts[l].push(tape.value(level.aggregated).clone());
            }
        }
    }
    Ok(EvalScores {
        labels: clips.iter().map(|c| c.label).collect(),
        rgb: concat_rows(&rgb_parts, config.classes),
        off_levels: off_parts.iter().map(|p| concat_rows(p, config.classes)).collect(),
        hypercolumn: config.ablate_off_layer,
    })
}

/// Top-1 accuracy of every stream of `ckpt` on `clips`.
pub fn evaluate(ckpt: &Checkpoint, clips: &[Clip], beta: usize) -> Result<EvalReport> {
    Ok(score_dataset(ckpt, clips, beta, 32)?.report())
}
