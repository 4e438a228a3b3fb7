pub mod checkpoint;
pub mod capacity;
pub mod data;
pub mod embedding_io;
pub mod error;
pub mod exec;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod overlap;
pub mod seed;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
