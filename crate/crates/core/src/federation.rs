//! Round orchestration: sample participants, broadcast `(x, m, v̂)`, run the
//! local AMSGrad interval on every participant, aggregate.
//!
//! Clients are pure values. Each participant draws from its own stream keyed
//! by `(seed, round, client)` and the reduction runs on the main thread in
//! ascending client order, so serial and parallel execution produce
//! bit-identical trajectories.

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{ensure_param, FedError, Result};
use crate::objectives::GradientOracle;
use crate::optimizer::{run_local_steps, HyperParams, LocalOptState, StepRecord};
use crate::param::{max_of, mean_of, ParamVector};
use crate::rng::{local_stream, stream, Purpose, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: ParamVector,
    pub m: ParamVector,
    pub v_hat: ParamVector,
    pub round: usize,
}

impl ServerState {
    pub fn initial(x: ParamVector, epsilon: f64) -> Self {
        let d = x.dim();
        Self {
            x,
            m: ParamVector::zeros(d),
            v_hat: ParamVector::filled(d, epsilon * epsilon),
            round: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VhatAggregation {
    #[default]
    Average,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AggregationMode {
    pub vhat: VhatAggregation,
    /// Clients start every round with `m = 0` and momenta are never sent.
    pub restart_momentum: bool,
}

impl AggregationMode {
    /// Vectors exchanged per participant per round.
    pub fn vectors_per_client(&self) -> usize {
        if self.restart_momentum {
            2
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntervalSchedule {
    Fixed(usize),
    /// `K_t = k_init + ⌊log_{k_alpha} t⌋`, with `K_0 = k_init`.
    LogAdaptive {
        k_init: usize,
        k_alpha: f64,
    },
}

impl IntervalSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            IntervalSchedule::Fixed(k) => {
                ensure_param(k >= 1, || "fixed local interval must be at least 1".into())
            }
            IntervalSchedule::LogAdaptive { k_init, k_alpha } => {
                ensure_param(k_init >= 1, || "k_init must be at least 1".into())?;
                ensure_param(k_alpha > 1.0 && k_alpha.is_finite(), || {
                    format!("k_alpha must exceed 1, got {k_alpha}")
                })
            }
        }
    }

    pub fn interval(&self, t: usize) -> usize {
        match *self {
            IntervalSchedule::Fixed(k) => k,
            IntervalSchedule::LogAdaptive { k_init, k_alpha } => k_init + floor_log(t, k_alpha),
        }
    }

    /// `Σ_{t<rounds} K_t`.
    pub fn total_iterations(&self, rounds: usize) -> usize {
        (0..rounds).map(|t| self.interval(t)).sum()
    }
}

/// Largest `p` with `base^p <= t`; zero for `t <= 1`.
fn floor_log(t: usize, base: f64) -> usize {
    let t = t as f64;
    let mut p = 0;
    let mut power = base;
    while power <= t {
        p += 1;
        power *= base;
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Serial,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recording {
    /// Final client states only.
    #[default]
    Summary,
    /// Every local step of every participant.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_clients: usize,
    pub participants: usize,
    pub rounds: usize,
    pub hp: HyperParams,
    pub schedule: IntervalSchedule,
    pub mode: AggregationMode,
    pub seed: u64,
    /// Round `t` trains with `alpha·lr_decay^t`.
    pub lr_decay: f64,
    pub execution: Execution,
    pub recording: Recording,
}

impl RunConfig {
    pub fn new(n_clients: usize, rounds: usize, hp: HyperParams, schedule: IntervalSchedule) -> Self {
        Self {
            n_clients,
            participants: n_clients,
            rounds,
            hp,
            schedule,
            mode: AggregationMode::default(),
            seed: 0,
            lr_decay: 1.0,
            execution: Execution::Serial,
            recording: Recording::Summary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param(self.n_clients >= 1, || "need at least one client".into())?;
        ensure_param((1..=self.n_clients).contains(&self.participants), || {
            format!(
                "participants per round must be in 1..={}, got {}",
                self.n_clients, self.participants
            )
        })?;
        ensure_param(self.lr_decay > 0.0 && self.lr_decay.is_finite(), || {
            format!("lr_decay must be positive, got {}", self.lr_decay)
        })?;
        self.hp.validate()?;
        self.schedule.validate()
    }

    pub fn full_participation(&self) -> bool {
        self.participants == self.n_clients
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.hp.alpha * self.lr_decay.powi(t as i32)
    }
}

/// Uniform sample of `s` distinct ids from `0..n`, returned in ascending order.
pub fn select_clients(n: usize, s: usize, rng: &mut Stream) -> Result<Vec<usize>> {
    if s == 0 || s > n {
        return Err(FedError::InvalidParameter(format!(
            "cannot select {s} of {n} clients"
        )));
    }
    if s == n {
        return Ok((0..n).collect());
    }
    let mut ids = sample(rng, n, s).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Fresh local state for `client` from the server's `(x_t, m_t, v̂_t)`.
/// Every local field is overwritten, so no client state survives a round.
pub fn broadcast(server: &ServerState, _client: usize, mode: AggregationMode) -> LocalOptState {
    LocalOptState {
        x: server.x.clone(),
        m: if mode.restart_momentum {
            ParamVector::zeros(server.m.dim())
        } else {
            server.m.clone()
        },
        v: server.v_hat.clone(),
        v_hat: server.v_hat.clone(),
        local_step: 0,
        round: server.round,
    }
}

/// Server state after round `t` from the participants' final states.
pub fn aggregate(clients: &[LocalOptState], mode: AggregationMode, t: usize) -> Result<ServerState> {
    if clients.is_empty() {
        return Err(FedError::Empty("aggregate: no participating clients"));
    }
    let x = mean_of(clients.iter().map(|c| &c.x))?;
    let m = if mode.restart_momentum {
        ParamVector::zeros(x.dim())
    } else {
        mean_of(clients.iter().map(|c| &c.m))?
    };
    let v_hat = match mode.vhat {
        VhatAggregation::Average => mean_of(clients.iter().map(|c| &c.v_hat))?,
        VhatAggregation::Max => max_of(clients.iter().map(|c| &c.v_hat))?,
    };
    Ok(ServerState {
        x,
        m,
        v_hat,
        round: t + 1,
    })
}

/// Everything observed during one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub interval: usize,
    pub alpha: f64,
    pub participants: Vec<usize>,
    /// State broadcast at the start of the round.
    pub server_before: ServerState,
    /// Aggregated state at the end of the round.
    pub server_after: ServerState,
    /// Final local state of each participant, in `participants` order.
    pub clients: Vec<LocalOptState>,
    /// Per-participant step records under [`Recording::Full`].
    pub steps: Option<Vec<Vec<StepRecord>>>,
    pub comm_vectors: usize,
}

impl RoundRecord {
    /// Extremes of `η = 1/√v̂` over all participants' final states.
    pub fn eta_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.clients {
            lo = lo.min(1.0 / c.v_hat.max_value().sqrt());
            hi = hi.max(1.0 / c.v_hat.min_value().sqrt());
        }
        (lo, hi)
    }

    /// Client-average iterate `x̄_{t,k}` before local step `k` (1-based),
    /// available under full recording.
    pub fn mean_iterate(&self, k: usize) -> Option<Result<ParamVector>> {
        let steps = self.steps.as_ref()?;
        Some(mean_of(steps.iter().map(|s| &s[k - 1].x_before)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: ServerState,
    pub rounds: Vec<RoundRecord>,
}

impl Trajectory {
    pub fn final_state(&self) -> &ServerState {
        self.rounds.last().map_or(&self.initial, |r| &r.server_after)
    }
}

fn train_participant(
    server: &ServerState,
    client: usize,
    oracle: &GradientOracle,
    k: usize,
    hp: &HyperParams,
    config: &RunConfig,
) -> Result<(LocalOptState, Option<Vec<StepRecord>>)> {
    let start = broadcast(server, client, config.mode);
    let mut rng = local_stream(config.seed, server.round, client);
    match config.recording {
        Recording::Summary => Ok((run_local_steps(start, oracle, k, hp, &mut rng, None)?, None)),
        Recording::Full => {
            let mut rec = Vec::with_capacity(k);
            let state = run_local_steps(start, oracle, k, hp, &mut rng, Some(&mut rec))?;
            Ok((state, Some(rec)))
        }
    }
}

/// Runs `config.rounds` rounds from `initial`, handing every round to
/// `observer` as soon as it completes. Returns the final server state.
pub fn run_training_with<F>(
    config: &RunConfig,
    oracles: &[GradientOracle],
    initial: ServerState,
    mut observer: F,
) -> Result<ServerState>
where
    F: FnMut(&RoundRecord) -> Result<()>,
{
    config.validate()?;
    if oracles.len() != config.n_clients {
        return Err(FedError::InvalidParameter(format!(
            "{} oracles for {} clients",
            oracles.len(),
            config.n_clients
        )));
    }
    for o in oracles {
        initial.x.ensure_dim(o.dim())?;
    }

    let mut server = initial;
    for t in 0..config.rounds {
        server.round = t;
        let participants = if config.full_participation() {
            (0..config.n_clients).collect()
        } else {
            let mut rng = stream(config.seed, Purpose::Selection, &[t as u64]);
            select_clients(config.n_clients, config.participants, &mut rng)?
        };
        let k = config.schedule.interval(t);
        let hp = config.hp.with_alpha(config.alpha_at(t));

        let results: Vec<(LocalOptState, Option<Vec<StepRecord>>)> = match config.execution {
            Execution::Serial => participants
                .iter()
                .map(|&i| train_participant(&server, i, &oracles[i], k, &hp, config))
                .collect::<Result<_>>()?,
            Execution::Parallel => participants
                .par_iter()
                .map(|&i| train_participant(&server, i, &oracles[i], k, &hp, config))
                .collect::<Result<_>>()?,
        };
        let (clients, steps): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let steps = match config.recording {
            Recording::Full => Some(steps.into_iter().map(Option::unwrap_or_default).collect()),
            Recording::Summary => None,
        };

        let next = aggregate(&clients, config.mode, t)?;
        next.x.ensure_finite("aggregated parameters")?;
        let record = RoundRecord {
            round: t,
            interval: k,
            alpha: hp.alpha,
            comm_vectors: config.mode.vectors_per_client() * participants.len(),
            participants,
            server_before: server,
            server_after: next.clone(),
            clients,
            steps,
        };
        observer(&record)?;
        server = next;
    }
    Ok(server)
}

/// [`run_training_with`] that keeps every round.
pub fn run_training(config: &RunConfig, oracles: &[GradientOracle], x0: ParamVector) -> Result<Trajectory> {
    let initial = ServerState::initial(x0, config.hp.epsilon);
    let mut rounds = Vec::with_capacity(config.rounds);
    run_training_with(config, oracles, initial.clone(), |r| {
        rounds.push(r.clone());
        Ok(())
    })?;
    Ok(Trajectory { initial, rounds })
}
