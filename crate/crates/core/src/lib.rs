//! Worst-case style exploration for domain generalization.
//!
//! Samples are re-styled by mixing a non-semantic factor (Fourier amplitude
//! or feature channel statistics) across a sample and a few style
//! providers. Per-sample mixing weights are pushed toward the highest loss
//! with signed ascent on the simplex, and the model is trained on a blend of
//! clean and worst-case risks.

pub mod autodiff;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod explore;
pub mod featstyle;
pub mod fourier;
pub mod mdts;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
