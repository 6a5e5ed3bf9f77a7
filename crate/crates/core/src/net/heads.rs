use super::ConvVars;
use crate::error::{OffError, Result};
use crate::tensor::{Real, Tape, Var};

/// Global average pool followed by a linear layer: `[N, C, H, W] -> [N, K]`.
pub fn level_classifier<T: Real>(tape: &mut Tape<T>, feature: Var, head: &ConvVars) -> Result<Var> {
    let pooled = tape.global_avg_pool(feature)?;
    tape.linear(pooled, head.weight, head.bias)
}

/// Mean of per-segment scores.
pub fn aggregate_segments<T: Real>(tape: &mut Tape<T>, scores: &[Var]) -> Result<Var> {
    if scores.is_empty() {
        return Err(OffError::arg("no segment scores to aggregate"));
    }
    if scores.len() == 1 {
        return Ok(scores[0]);
    }
    let total = tape.add_n(scores)?;
    Ok(tape.scale(total, 1.0 / scores.len() as f64))
}

/// Sum of stream scores.
pub fn fuse_streams<T: Real>(tape: &mut Tape<T>, streams: &[Var]) -> Result<Var> {
    if streams.is_empty() {
        return Err(OffError::arg("no stream scores to fuse"));
    }
    if streams.len() == 1 {
        return Ok(streams[0]);
    }
    tape.add_n(streams)
}
