//! Image-restoration networks built from plain, baseline and
//! nonlinear-activation-free blocks, on a small reverse-mode autodiff engine.

pub mod arch;
pub mod blocks;
pub mod data;
pub mod error;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
