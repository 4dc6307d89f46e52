//! Neural brain fields: a small coordinate network per recording window that
//! maps `(x, y, z, t)` on the scalp to a voltage, plus spherical-spline and
//! RBF interpolation baselines, evaluation metrics and a synthetic oracle.

pub mod baselines;
pub mod checkpoint;
pub mod encoding;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod model;
pub mod recording;
pub mod synthetic;
pub mod training;

pub use error::{NbfError, Result};
pub use model::FieldModel;
pub use recording::{Electrode, ElectrodeLayout, Recording, TimeWindow};
pub use training::{TrainConfig, TrainReport};
