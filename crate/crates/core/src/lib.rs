pub mod engine;
pub mod error;
pub mod parallel;

pub use error::{Error, Result};
pub mod data;
pub mod eval;
pub mod graph;
pub mod incident;
pub mod model;
pub mod pipeline;
pub mod temporal;
pub mod training;
