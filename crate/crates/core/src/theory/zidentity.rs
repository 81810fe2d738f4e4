//! The auxiliary sequence `Z_r = X̄_r + β₁/(1−β₁)(X̄_r − X̄_{r−1})` and its
//! one-step decomposition, evaluated on a recorded trajectory.
//!
//! Steps are indexed globally (`r = 1..R` across rounds). With `M_r`, `θ_r`
//! the momentum and `1/√v̂` after step `r`, and `m⁻_r`, `η⁻_r` the values
//! before it, every step satisfies
//!
//! ```text
//! Z_{r+1} − Z_r = αβ₁/(1−β₁)·mean(M_{r−1}⊙(θ_{r−1} − θ_r))
//!               − α·mean(G_r⊙θ_r)
//!               − αβ₁/(1−β₁)·mean((m⁻_r − M_{r−1})⊙(θ_r − η⁻_r))
//! ```
//!
//! The last term is zero inside a round and carries the broadcast jump at a
//! round boundary. At `r = 1`, `X̄_0 = X̄_1`, `M_0 = 0` and `θ_0 = η⁻_1`.

use crate::error::{FedError, Result};
use crate::federation::{AggregationMode, Trajectory, VhatAggregation};
use crate::optimizer::HyperParams;
use crate::param::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZIdentityReport {
    /// Largest absolute coordinatewise residual over all steps.
    pub max_residual: f64,
    /// Largest residual among the first steps of rounds.
    pub max_boundary_residual: f64,
    /// Largest absolute coordinate of either side, for scale.
    pub magnitude: f64,
    pub steps_checked: usize,
}

struct ClientStep {
    m_before: ParamVector,
    m_after: ParamVector,
    grad: ParamVector,
    eta_before: Vec<f64>,
    theta: Vec<f64>,
}

struct GlobalStep {
    x_mean: Vec<f64>,
    clients: Vec<ClientStep>,
    first_of_round: bool,
}

fn inv_sqrt(v: &ParamVector) -> Vec<f64> {
    v.iter().map(|&a| 1.0 / a.sqrt()).collect()
}

fn mean_x<'a>(xs: impl Iterator<Item = &'a ParamVector>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for x in xs {
        for (a, &b) in acc.iter_mut().zip(x.iter()) {
            *a += b;
        }
        n += 1;
    }
    acc.iter().map(|a| a / n as f64).collect()
}

fn flatten(traj: &Trajectory) -> Result<(Vec<GlobalStep>, f64, Vec<f64>)> {
    let first = traj
        .rounds
        .first()
        .ok_or_else(|| FedError::MissingHistory("trajectory has no rounds".into()))?;
    let n = first.participants.len();
    let alpha = first.alpha;
    let d = traj.initial.x.dim();
    let mut out = Vec::new();
    for rec in &traj.rounds {
        let steps = rec.steps.as_ref().ok_or_else(|| {
            FedError::MissingHistory(format!(
                "round {} was recorded without per-step states",
                rec.round
            ))
        })?;
        if rec.participants.len() != n || rec.participants.iter().enumerate().any(|(i, &c)| i != c) {
            return Err(FedError::MissingHistory(format!(
                "round {} is not a full-participation round",
                rec.round
            )));
        }
        if rec.alpha != alpha {
            return Err(FedError::MissingHistory(format!(
                "learning rate changes at round {} ({} vs {alpha})",
                rec.round, rec.alpha
            )));
        }
        if steps.len() != n || steps.iter().any(|s| s.len() != rec.interval) {
            return Err(FedError::MissingHistory(format!(
                "round {} has incomplete step records",
                rec.round
            )));
        }
        for k in 0..rec.interval {
            let clients = steps
                .iter()
                .map(|s| {
                    let st = &s[k];
                    ClientStep {
                        m_before: st.m_before.clone(),
                        m_after: st.m_after.clone(),
                        grad: st.grad.clone(),
                        eta_before: inv_sqrt(&st.v_hat_before),
                        theta: inv_sqrt(&st.v_hat_after),
                    }
                })
                .collect();
            out.push(GlobalStep {
                x_mean: mean_x(steps.iter().map(|s| &s[k].x_before), d),
                clients,
                first_of_round: k == 0,
            });
        }
    }
    let last = mean_x(std::iter::once(&traj.final_state().x), d);
    Ok((out, alpha, last))
}

/// Evaluates both sides of the decomposition at every recorded step.
///
/// Needs a full-recording, full-participation trajectory run with a
/// constant learning rate, averaged `v̂` and communicated momentum; `mode`
/// is the aggregation the trajectory was produced with.
pub fn check_z_identity(
    traj: &Trajectory,
    hp: &HyperParams,
    mode: AggregationMode,
) -> Result<ZIdentityReport> {
    if mode.vhat != VhatAggregation::Average || mode.restart_momentum {
        return Err(FedError::MissingHistory(
            "the identity needs averaged v_hat and communicated momentum".into(),
        ));
    }
    let (steps, alpha, x_end) = flatten(traj)?;
    let b = hp.beta1;
    let c = b / (1.0 - b);
    let d = x_end.len();
    let n = steps[0].clients.len() as f64;

    let x_at = |r: usize| -> &[f64] {
        // r is 1-based; r = R + 1 is the final server iterate.
        if r == 0 {
            &steps[0].x_mean
        } else if r <= steps.len() {
            &steps[r - 1].x_mean
        } else {
            &x_end
        }
    };
    let z = |r: usize, j: usize| -> f64 {
        let cur = x_at(r)[j];
        cur + c * (cur - x_at(r - 1)[j])
    };

    let mut report = ZIdentityReport {
        max_residual: 0.0,
        max_boundary_residual: 0.0,
        magnitude: 0.0,
        steps_checked: steps.len(),
    };
    for r in 1..=steps.len() {
        let cur = &steps[r - 1];
        for j in 0..d {
            let lhs = z(r + 1, j) - z(r, j);
            let mut momentum = 0.0;
            let mut grad = 0.0;
            let mut jump = 0.0;
            for (i, cs) in cur.clients.iter().enumerate() {
                let (m_prev, theta_prev) = if r == 1 {
                    (0.0, cs.eta_before[j])
                } else {
                    let p = &steps[r - 2].clients[i];
                    (p.m_after[j], p.theta[j])
                };
                momentum += m_prev * (theta_prev - cs.theta[j]);
                grad += cs.grad[j] * cs.theta[j];
                jump += (cs.m_before[j] - m_prev) * (cs.theta[j] - cs.eta_before[j]);
            }
            let rhs = alpha * c * momentum / n - alpha * grad / n - alpha * c * jump / n;
            let res = (lhs - rhs).abs();
            report.max_residual = report.max_residual.max(res);
            if cur.first_of_round {
                report.max_boundary_residual = report.max_boundary_residual.max(res);
            }
            report.magnitude = report.magnitude.max(lhs.abs()).max(rhs.abs());
        }
    }
    if !report.max_residual.is_finite() {
        return Err(FedError::NonFinite("z-identity residual"));
    }
    Ok(report)
}
