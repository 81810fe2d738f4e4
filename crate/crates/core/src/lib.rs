//! Federated local AMSGrad with client-specific adaptive learning rates.
//!
//! Clients run `K_t` AMSGrad steps from a broadcast state; the server averages
//! parameters, momenta and the running maxima `v̂` (or takes their
//! elementwise maximum). Around that core sit objectives with known
//! optima, FedAvg/FedAdam baselines, evaluators for the convergence bounds
//! and an experiment harness.

// negated comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod federation;
pub mod harness;
pub mod objectives;
pub mod optimizer;
pub mod param;
pub mod rng;
pub mod theory;

pub use error::{FedError, Result};
pub use federation::{
    run_training, run_training_with, AggregationMode, Execution, IntervalSchedule, Recording, RoundRecord,
    RunConfig, ServerState, Trajectory, VhatAggregation,
};
pub use optimizer::{HyperParams, LocalOptState};
pub use param::ParamVector;
