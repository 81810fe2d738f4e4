//! Executable forms of the convergence analysis: bound evaluators, the
//! iteration count under a logarithmic interval, and the auxiliary-sequence
//! identity.

mod bounds;
mod lambert;
mod zidentity;

pub use bounds::{
    fixed_interval_bound, growing_interval_bound, FixedIntervalBound, GrowingIntervalBound, SpeedupConstants,
    TheoryInputs,
};
pub use lambert::{communication_complexity, lambert_w0, rounds_to_epsilon};
pub use zidentity::{check_z_identity, ZIdentityReport};
