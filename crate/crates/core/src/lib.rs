//! Explanation distillation toolkit.
//!
//! Trains small convolutional networks on deliberately biased data and
//! distills the *explanations* of an unbiased teacher (LRP-ε, Grad-CAM,
//! input gradients, Gradient*Input, spatial attention) into a student, so
//! the student learns the teacher's reasons instead of the dataset's
//! shortcuts. Everything runs on CPU with no external data dependencies.

pub mod biasdata;
pub mod distill;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod net;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
