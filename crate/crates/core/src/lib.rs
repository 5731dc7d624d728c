//! Wide residual network training under a shared global top-k activation
//! budget, with adaptive keep-ratio controllers that cycle one model through
//! dense and sparse regimes.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below pin the common choices.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod controller;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod optimizer;
pub mod scalar;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use backbone::{ForwardOptions, ForwardReport, ModelSpec, SiteActivation, WideResNet};
pub use controller::{ControllerState, EmaTracker, Policy, StepOutcome, StrategyKind};
pub use error::{Error, Result};
pub use experiment::{EpochRecord, ExperimentConfig, MetricsTable};
pub use layers::{KeepRatio, ParamStore, SiteStats};
pub use optimizer::{CosineSchedule, SgdNesterov};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type WideResNet32 = WideResNet<f32>;
pub type WideResNet64 = WideResNet<f64>;
pub type Cifar10Set32 = data::Cifar10Set<f32>;
