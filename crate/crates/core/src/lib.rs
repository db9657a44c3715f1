//! Motion-state alignment for video semantic segmentation at desk scale:
//! model blocks, synthetic data, training, evaluation and the cost model.

pub mod assign;
pub mod backbone;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod schedule;
pub mod state;
pub mod train;

pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use vidseg_tensor as tensor;
