//! Touch-driven avatar locomotion: motion data processing, a gated
//! mixture-of-experts motion model, training, the per-frame runtime and
//! evaluation metrics.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod motion;
pub mod network;
pub mod par;
pub mod runtime;
pub mod skeleton;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
