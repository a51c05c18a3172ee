//! Student-oriented feature distillation on a small CPU tensor stack.
//!
//! The crate bundles a dense `f32` tensor type, a define-by-run reverse-mode
//! tape, small convolutional backbones, a differentiable feature-augmentation
//! policy search, a distinctive-area module for masked distillation, and the
//! bi-level training loop that ties them together.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dafa;
pub mod dam;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use autodiff::{CustomBackward, Gradients, StraightThrough, Tape, Var};
pub use error::{Error, ErrorKind, Result};
pub use rng::Rng;
pub use tensor::{Padding, Tensor};
