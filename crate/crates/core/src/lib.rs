pub mod baselines;
pub mod data;
pub mod error;
pub mod estimators;
pub mod experts;
pub mod gating;
pub mod glm;
pub mod seed;
pub mod simgen;

pub use data::TrialDataset;
pub use error::{CaceError, Result};
