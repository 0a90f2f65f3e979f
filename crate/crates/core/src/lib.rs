//! Building blocks of a dual-stream hyperspectral object detector.

pub mod autodiff;
pub mod band_select;
pub mod config;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod hsi_io;
pub mod model;
pub mod nn;
pub mod scl;
pub mod sda;
pub mod sgg;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
