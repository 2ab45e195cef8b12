pub mod aggregation;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod input;
mod io;
mod linalg;
pub mod map;
pub mod oracles;
pub mod pca;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use error::{CknError, Result};
