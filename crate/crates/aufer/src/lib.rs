//! IO, models, training, evaluation, and the command-line surface for the
//! attention-alignment toolkit. The math it drives lives in `aufer-core`.

#![deny(unsafe_code)]

pub mod ablate;
pub mod cams;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod formats;
pub mod img;
pub mod model;
pub mod synth;
pub mod train;
pub mod viz;

pub use cli::run;
pub use error::ToolkitError;
