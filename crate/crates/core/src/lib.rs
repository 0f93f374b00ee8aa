pub mod embedder;
pub mod error;
pub mod evaluate;
pub mod geodata;
pub mod losses;
pub mod mining;
pub mod parallel;
pub mod presets;
pub mod retrieval;
pub mod spatial;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
