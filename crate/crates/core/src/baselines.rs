//! Reference algorithms: FedAvg (local SGD + parameter averaging) and FedAdam
//! (local SGD + server-side Adam on the averaged pseudo-gradient).
//!
//! FedAdam uses `Δ = x − mean(client x)`, no bias correction and
//! `x ← x − η_g·m/(√v + ε)`.

use rayon::prelude::*;

use crate::error::{ensure_param, FedError, Result};
use crate::federation::{Execution, RunConfig};
use crate::objectives::GradientOracle;
use crate::optimizer::{run_local_sgd, LocalOptState};
use crate::param::{mean_of, ParamVector};
use crate::rng::{local_stream, stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSgd {
    pub steps: usize,
    pub lr: f64,
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerAdamParams {
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for ServerAdamParams {
    fn default() -> Self {
        Self {
            server_lr: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-3,
        }
    }
}

impl ServerAdamParams {
    pub fn validate(&self) -> Result<()> {
        ensure_param(self.server_lr > 0.0, || "server lr must be positive".into())?;
        ensure_param(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            || "server betas must lie in [0, 1)".into(),
        )?;
        ensure_param(self.epsilon > 0.0, || "server epsilon must be positive".into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerAdamState {
    pub x: ParamVector,
    pub m: ParamVector,
    pub v: ParamVector,
    pub params: ServerAdamParams,
}

impl ServerAdamState {
    pub fn new(x: ParamVector, params: ServerAdamParams) -> Self {
        let d = x.dim();
        Self {
            x,
            m: ParamVector::zeros(d),
            v: ParamVector::zeros(d),
            params,
        }
    }

    /// One server Adam update from the pseudo-gradient `delta`.
    pub fn apply(&self, delta: &ParamVector) -> Result<Self> {
        let p = self.params;
        let m = self.m.zip_map(delta, |m, d| p.beta1 * m + (1.0 - p.beta1) * d)?;
        let v = self
            .v
            .zip_map(delta, |v, d| p.beta2 * v + (1.0 - p.beta2) * d * d)?;
        let step = m.zip_map(&v, |m, v| m / (v.sqrt() + p.epsilon))?;
        let x = self.x.axpy(-p.server_lr, &step)?;
        x.ensure_finite("FedAdam parameters")?;
        Ok(Self { x, m, v, params: p })
    }
}

/// Where a baseline round takes its client streams from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundContext {
    pub seed: u64,
    pub round: usize,
    pub execution: Execution,
}

/// Final local iterates of the participants after `local.steps` SGD steps
/// from `x`.
pub fn local_sgd_clients(
    x: &ParamVector,
    oracles: &[GradientOracle],
    participants: &[usize],
    local: &LocalSgd,
    ctx: RoundContext,
) -> Result<Vec<ParamVector>> {
    if participants.is_empty() {
        return Err(FedError::Empty("baseline round: no participants"));
    }
    let run = |&i: &usize| -> Result<ParamVector> {
        let oracle = oracles
            .get(i)
            .ok_or_else(|| FedError::InvalidParameter(format!("no oracle for client {i}")))?;
        let start = LocalOptState::initial(x.clone(), 1.0);
        let mut rng = local_stream(ctx.seed, ctx.round, i);
        Ok(run_local_sgd(start, oracle, local.steps, local.lr, local.clip, &mut rng)?.x)
    };
    match ctx.execution {
        Execution::Serial => participants.iter().map(run).collect(),
        Execution::Parallel => participants.par_iter().map(run).collect(),
    }
}

pub fn fedavg_round(
    x: &ParamVector,
    oracles: &[GradientOracle],
    participants: &[usize],
    local: &LocalSgd,
    ctx: RoundContext,
) -> Result<ParamVector> {
    let xs = local_sgd_clients(x, oracles, participants, local, ctx)?;
    mean_of(&xs)
}

pub fn fedadam_round(
    state: &ServerAdamState,
    oracles: &[GradientOracle],
    participants: &[usize],
    local: &LocalSgd,
    ctx: RoundContext,
) -> Result<ServerAdamState> {
    let avg = fedavg_round(&state.x, oracles, participants, local, ctx)?;
    state.apply(&state.x.sub(&avg)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    FedAvg,
    FedAdam(ServerAdamParams),
}

/// One completed baseline round.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRound {
    pub round: usize,
    pub interval: usize,
    pub lr: f64,
    pub participants: Vec<usize>,
    pub x_after: ParamVector,
}

/// Runs a baseline with the participation, schedule, seed and execution
/// settings of `config`; `config.hp.alpha` is the local SGD learning rate
/// and `config.hp.g_inf_clip` the gradient clip.
pub fn run_baseline_with<F>(
    baseline: Baseline,
    config: &RunConfig,
    oracles: &[GradientOracle],
    x0: ParamVector,
    mut observer: F,
) -> Result<ParamVector>
where
    F: FnMut(&BaselineRound) -> Result<()>,
{
    config.validate()?;
    if oracles.len() != config.n_clients {
        return Err(FedError::InvalidParameter(format!(
            "{} oracles for {} clients",
            oracles.len(),
            config.n_clients
        )));
    }
    if let Baseline::FedAdam(p) = baseline {
        p.validate()?;
    }
    let mut adam = match baseline {
        Baseline::FedAdam(p) => Some(ServerAdamState::new(x0.clone(), p)),
        Baseline::FedAvg => None,
    };
    let mut x = x0;
    for t in 0..config.rounds {
        let participants = if config.full_participation() {
            (0..config.n_clients).collect::<Vec<_>>()
        } else {
            let mut rng = stream(config.seed, Purpose::Selection, &[t as u64]);
            crate::federation::select_clients(config.n_clients, config.participants, &mut rng)?
        };
        let local = LocalSgd {
            steps: config.schedule.interval(t),
            lr: config.alpha_at(t),
            clip: config.hp.g_inf_clip,
        };
        let ctx = RoundContext {
            seed: config.seed,
            round: t,
            execution: config.execution,
        };
        x = match adam.as_mut() {
            None => fedavg_round(&x, oracles, &participants, &local, ctx)?,
            Some(state) => {
                *state = fedadam_round(state, oracles, &participants, &local, ctx)?;
                state.x.clone()
            }
        };
        observer(&BaselineRound {
            round: t,
            interval: local.steps,
            lr: local.lr,
            participants,
            x_after: x.clone(),
        })?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{global_grad, Curvature, Model, QuadraticModel};

    fn quad(i: usize, a: &[f64], b: &[f64]) -> GradientOracle {
        GradientOracle::new(
            i,
            Model::Quadratic(
                QuadraticModel::new(
                    Curvature::Diagonal(ParamVector::new(a.to_vec())),
                    ParamVector::new(b.to_vec()),
                    0.0,
                )
                .unwrap(),
            ),
        )
    }

    fn ctx(round: usize) -> RoundContext {
        RoundContext {
            seed: 1,
            round,
            execution: Execution::Serial,
        }
    }

    #[test]
    fn single_step_single_client_is_sgd() {
        let o = vec![quad(0, &[2.0, 1.0], &[1.0, 1.0])];
        let x = ParamVector::new(vec![0.0, 3.0]);
        let local = LocalSgd {
            steps: 1,
            lr: 0.1,
            clip: None,
        };
        let out = fedavg_round(&x, &o, &[0], &local, ctx(0)).unwrap();
        let expect = x.axpy(-0.1, &o[0].full_grad(&x).unwrap()).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn identical_quadratics_follow_closed_form_contraction() {
        let a = [0.5, 1.5, 3.0];
        let b = [1.0, -2.0, 0.25];
        let o: Vec<_> = (0..3).map(|i| quad(i, &a, &b)).collect();
        let x = ParamVector::new(vec![4.0, 4.0, 4.0]);
        let (lr, k) = (0.2, 7);
        let local = LocalSgd {
            steps: k,
            lr,
            clip: None,
        };
        let out = fedavg_round(&x, &o, &[0, 1, 2], &local, ctx(0)).unwrap();
        for j in 0..3 {
            let expect = b[j] + (1.0 - lr * a[j]).powi(k as i32) * (x[j] - b[j]);
            assert!((out[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradients_leave_x_unchanged() {
        let o = vec![quad(0, &[1.0], &[2.0]), quad(1, &[3.0], &[2.0])];
        let x = ParamVector::new(vec![2.0]);
        let local = LocalSgd {
            steps: 5,
            lr: 0.3,
            clip: None,
        };
        assert_eq!(fedavg_round(&x, &o, &[0, 1], &local, ctx(0)).unwrap(), x);
    }

    #[test]
    fn one_step_fedavg_is_full_gradient_descent() {
        let o = vec![
            quad(0, &[1.0, 2.0], &[0.0, 1.0]),
            quad(1, &[0.5, 1.0], &[2.0, -1.0]),
            quad(2, &[3.0, 0.7], &[-1.0, 0.5]),
        ];
        let local = LocalSgd {
            steps: 1,
            lr: 0.05,
            clip: None,
        };
        let mut fed = ParamVector::new(vec![1.0, 1.0]);
        let mut central = fed.clone();
        for t in 0..50 {
            fed = fedavg_round(&fed, &o, &[0, 1, 2], &local, ctx(t)).unwrap();
            central = central.axpy(-0.05, &global_grad(&o, &central).unwrap()).unwrap();
            assert!(fed.max_abs_diff(&central).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn fedadam_zero_pseudo_gradient_decays_momentum() {
        let p = ServerAdamParams {
            server_lr: 0.5,
            beta1: 0.8,
            beta2: 0.9,
            epsilon: 0.1,
        };
        let mut s = ServerAdamState::new(ParamVector::zeros(2), p);
        s.m = ParamVector::new(vec![1.0, -0.5]);
        s.v = ParamVector::new(vec![0.2, 0.2]);
        let zero = ParamVector::zeros(2);
        for _ in 0..5 {
            let next = s.apply(&zero).unwrap();
            for j in 0..2 {
                assert!((next.m[j] - 0.8 * s.m[j]).abs() < 1e-15);
            }
            let bound = p.server_lr * next.m.norms().l2_sq.sqrt() / p.epsilon;
            assert!(next.x.sub(&s.x).unwrap().norms().l2_sq.sqrt() <= bound + 1e-15);
            s = next;
        }
    }

    #[test]
    fn fedadam_degenerates_to_scaled_fedavg_direction() {
        let eps = 1e8;
        let p = ServerAdamParams {
            server_lr: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: eps,
        };
        let s = ServerAdamState::new(ParamVector::new(vec![1.0, 2.0]), p);
        let delta = ParamVector::new(vec![0.3, -0.7]);
        let next = s.apply(&delta).unwrap();
        let expect = s.x.axpy(-1.0 / eps, &delta).unwrap();
        for j in 0..2 {
            assert!((next.x[j] - expect[j]).abs() <= 1e-6 * (delta[j] / eps).abs());
        }
    }

    #[test]
    fn fedadam_accepts_unit_server_lr() {
        let o = vec![quad(0, &[1.0], &[1.0]), quad(1, &[1.0], &[-0.5])];
        let p = ServerAdamParams {
            server_lr: 1.0,
            ..Default::default()
        };
        let mut s = ServerAdamState::new(ParamVector::new(vec![3.0]), p);
        let local = LocalSgd {
            steps: 4,
            lr: 0.1,
            clip: None,
        };
        for t in 0..200 {
            s = fedadam_round(&s, &o, &[0, 1], &local, ctx(t)).unwrap();
        }
        assert!(s.x.is_finite());
        assert!((s.x[0] - 0.25).abs() < 0.5);
    }
}
