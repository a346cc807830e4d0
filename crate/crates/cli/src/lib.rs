//! CLI harness around the core library: the STF tensor format, synthetic
//! dataset generation, the toy trainer, evaluation, and the
//! attention-complexity benchmark.

pub mod augment;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod report;
pub mod selftest;
pub mod stf;
pub mod synth;
pub mod trainer;

pub use error::{CliError, Result};
