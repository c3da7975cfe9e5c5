//! Audiovisual repetition counting.
//!
//! A sight stream counts repetitions in fixed-length RGB clips, a sound
//! stream counts them in spectrogram segments, a stride scorer picks the
//! temporal sampling rate for the sight stream, and a reliability gate fuses
//! the two counts. [`pipeline`] wires the pieces into training, inference
//! and evaluation; [`datasets::synth`] generates videos with exact ground
//! truth for checking all of it on a CPU.

pub mod datasets;
mod error;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod reliability;
pub mod sight;
pub mod sound;
pub mod stream;
pub mod stride;

pub use error::{Error, Result};
