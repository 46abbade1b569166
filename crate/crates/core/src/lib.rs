//! Deterministic federated-learning simulation.
//!
//! The crate trains a federated "super model" (a FedAvg global model,
//! per-client personalized models aggregated with SoftPull, and a model
//! selector that routes each input to one of them) next to the usual
//! FedAvg / FedProx / SCAFFOLD / APFL baselines, on synthetic non-iid
//! client data small enough to run on a laptop.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod losses;
pub mod math;
pub mod models;
pub mod optim;
pub mod data;
pub mod flcore;
pub mod fedsm;
pub mod baselines;
pub mod analysis;
pub mod experiment;

pub use error::{Error, Result};
pub use losses::LossKind;
pub use math::{axpby, fd_gradient_check, weighted_mean, Differentiable, Matrix, ParamVector, RngStream};
pub use models::{Activation, Batch, Model, ModelKind, ModelSpec};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use data::{FederationDataset, GenConfig, Task};
