pub mod buffers;
pub mod categorical;
pub mod commands;
pub mod config;
pub mod correction;
pub mod error;
pub mod obrs;
pub mod oracles;
pub mod output;
pub mod rng;
pub mod simlab;
pub mod toy;
pub mod trace;
pub mod z_estimator;

pub use error::{Error, Result};
