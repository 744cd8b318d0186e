//! Self-supervised self-training pipeline for chest x-ray tuberculosis
//! screening: lung-mask preprocessing, a small vision transformer with
//! distillation and classifier heads, staged teacher-student training over
//! unlabeled data, and attention-based explainability.

pub mod corpus;
pub mod distill;
pub mod error;
pub mod evalx;
pub mod grid;
pub mod model;
pub mod pipeline;
pub mod views;

pub use error::{Error, Result};
