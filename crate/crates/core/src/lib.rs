//! Optical-flow guided features (OFF) on a small from-scratch CNN.
//!
//! * [`tensor`]: NCHW tensors with a reverse-mode tape.
//! * [`net`]: backbone, OFF layer/unit/sub-network, heads and score fusion.
//! * [`data`]: frame sampling, synthetic translating-pattern clips, datasets.
//! * [`train`]: two-stage training, evaluation, checkpoints.
//! * [`cli`]: command implementations behind the `off` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{OffError, Result};
