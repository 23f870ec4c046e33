//! Train one-layer transformers on regular-language sequence tasks, extract
//! Moore machines from them with an L*-style learner backed by a whitebox
//! teacher, and inspect how the machine's states live in the final layer.

pub mod analysis;
pub mod automata;
pub mod data;
pub mod error;
pub mod experiment;
pub mod extraction;
pub mod languages;
pub mod learner;
pub mod metrics;
pub mod net;
pub mod seeds;

pub use error::{Error, Result};
