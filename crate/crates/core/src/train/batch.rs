use rand::Rng;

use crate::data::{Clip, SamplePlan};
use crate::error::{OffError, Result};
use crate::tensor::Tensor;

/// Stacks frame `frames[i][k]` of clip `ids[i]` into segment `k`, giving one
/// `[B, C, H, W]` tensor per segment.
pub fn gather_segments(clips: &[Clip], ids: &[usize], frames: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
    if ids.is_empty() || ids.len() != frames.len() {
        return Err(OffError::arg(format!(
            "{} clips with {} frame lists",
            ids.len(),
            frames.len()
        )));
    }
    let segments = frames[0].len();
    let mut out = Vec::with_capacity(segments);
    for k in 0..segments {
        let items = ids
            .iter()
            .zip(frames)
            .map(|(&id, f)| {
                let clip = clips.get(id).ok_or_else(|| OffError::arg(format!("no clip {id}")))?;
                let t = *f.get(k).ok_or_else(|| OffError::arg("ragged frame lists"))?;
                if t >= clip.len() {
                    return Err(OffError::arg(format!("frame {t} of a {}-frame clip", clip.len())));
                }
                Ok(clip.frame(t))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f32>> = items.iter().collect();
        out.push(Tensor::stack(&refs)?);
    }
    Ok(out)
}

/// Draws `batch` clip ids uniformly and a training frame plan for each.
pub fn sample_train_batch<R: Rng + ?Sized>(
    clips: &[Clip],
    batch: usize,
    alpha: usize,
    beta: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    if clips.is_empty() {
        return Err(OffError::arg("empty training set"));
    }
    let mut ids = Vec::with_capacity(batch);
    let mut frames = Vec::with_capacity(batch);
    for _ in 0..batch {
        let id = rng.gen_range(0..clips.len());
        let plan = SamplePlan::new(clips[id].len(), alpha, beta)?;
        ids.push(id);
        frames.push(plan.train_indices(rng));
    }
    Ok((ids, frames))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
