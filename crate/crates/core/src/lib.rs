//! Segmentation training with a layer-wise foreground/background feature
//! discrepancy penalty.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`tensor`]), a configurable U-Net exposing every level as a feature tap
//! ([`unet`]), the training objectives ([`losses`]), synthetic multi-site data
//! ([`data`]), the two-phase training loop and evaluation ([`train`]), and
//! numerical checks of the theory behind the penalty ([`theory`]).

pub mod data;
pub mod error;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor, Var};
