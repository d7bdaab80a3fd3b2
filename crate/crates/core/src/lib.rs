//! Regime labelling, random-forest regime prediction and cost-adjusted contrarian backtesting.

pub mod backtest;
pub mod error;
pub mod features;
pub mod forest;
pub mod hmm;
mod markov;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod regime;
pub mod synthetic;
pub mod timeseries;
pub mod validation;

pub use error::{Error, Result};
pub use markov::EmTrace;
pub use matrix::Matrix;
pub use regime::Label;
