//! Tint: a windowed vision transformer that regresses tropical cyclone
//! intensity (knots) from multi-channel satellite frames.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tape`]), the network blocks ([`nn`], [`attention`], [`model`]), the data
//! pipeline ([`data`]) and the training loop ([`train`]).

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, TintModel};
pub use params::Mode;
pub use tape::{Tape, Var};
pub use tensor::{DType, Tensor};
