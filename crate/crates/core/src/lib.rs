//! Sequential recommendation with fused and aligned ID / semantic item
//! embeddings, aimed at improving accuracy on rarely-interacted (tail) items.
pub mod alignment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod params;
pub mod rng;
pub mod semantic;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
