//! Sequence files, synthetic motion, windowing and result export.

mod export;
mod skel;
mod synth;
mod windows;

pub use export::export_errors;
pub use skel::{parse_skel, write_skel, MotionSequence};
pub use synth::{rest_pose, synthesize, synthesize_dataset, SynthConfig, BONE_LENGTH};
pub use windows::{split_windows, DatasetSplit, Windows};
