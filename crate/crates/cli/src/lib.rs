//! Front end for training, evaluating, verifying and costing Conv-Former
//! segmentation pipelines. Training and evaluation run in `f32`; the
//! verification suites run in `f64`.

pub mod commands;
pub mod config;

pub use commands::{main_with_args, Cli, Command};
