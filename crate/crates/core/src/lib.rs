//! Invertible KRnet-style normalizing flows with augmented dimensions and
//! time-stepped (ODE) variants, exact gradients via reverse accumulation or
//! the discrete adjoint, benchmark targets and training utilities.

pub mod error;
pub mod flow;
pub mod gradients;
pub mod layers;
pub mod nn;
pub mod numkit;
pub mod real;
pub mod targets;
pub mod train;

pub use error::{KrnetError, Result};
pub use flow::{FlowConfig, FlowModel, LayerSite, LogitConfig, MarginalMethod, OdeConfig, Variant};
pub use numkit::{Batch, RngState};
pub use real::Real;
pub use gradients::{GradPath, GradientBundle};
pub use targets::{HoleSpec, LogDensity, Target, TargetSpec};
pub use train::{Adam, TrainConfig, TrainHistory, TrainMode};

pub type Batch64 = Batch<f64>;
pub type Batch32 = Batch<f32>;
pub type FlowModel64 = FlowModel<f64>;
pub type FlowModel32 = FlowModel<f32>;
