pub mod ablation;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod plane;
pub mod toy;
pub mod training;
pub mod viz;

pub use error::{FuseError, Result};
