pub mod config_space;
pub mod distributor;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod par;
pub mod placer;
pub mod preset;
pub mod profiler;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
