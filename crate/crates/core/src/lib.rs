pub mod aat;
pub mod attacks;
pub mod data;
pub mod detection;
pub mod diagnostics;
pub mod distortion;
pub mod error;
pub mod experiment;
pub mod io;
pub mod models;
pub mod numerics;
pub mod optim;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
