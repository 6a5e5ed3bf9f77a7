//! Frame sampling, synthetic translating-pattern clips, dataset directories
//! and the orthogonality check on raw frames.

mod dataset;
mod ortho;
mod sampling;
mod synth;

pub use dataset::{blob_name, dir_has_entries, load_dataset, save_dataset, MANIFEST};
pub use ortho::{orthogonality_grid, orthogonality_residual, GradientTime, OrthoCell, GRID_CANVAS};
pub use sampling::{test_sample_indices, train_sample_indices, SamplePlan};
pub use synth::{
    brightness_constancy_error, direction_velocity, gen_direction_dataset, gen_translating_clip,
    Clip, DirectionDataset, Motion, Pattern, DIRECTIONS, DIRECTION_UNITS,
};
