pub mod config;
pub mod cvae;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod mixup;
pub mod nn;
pub mod report;
pub mod seed;
pub mod teacher;

pub use error::{Error, Result};
