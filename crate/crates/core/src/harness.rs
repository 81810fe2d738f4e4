//! Experiment runner: per-round metrics, CSV output, seed sweeps over the
//! client count, schedule comparisons and state audits.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::baselines::{run_baseline_with, Baseline, ServerAdamParams};
use crate::error::{ensure_param, FedError, Result};
use crate::federation::{run_training_with, IntervalSchedule, Recording, RunConfig, ServerState, Trajectory};
use crate::objectives::{global_grad, global_loss, ObjectiveSpec, Problem};
use crate::optimizer::HyperParams;
use crate::param::ParamVector;
use crate::theory::TheoryInputs;

pub const CSV_HEADER: &str =
    "round,iters,K_t,loss,grad_norm_sq,avg_grad_norm_sq,comm_vectors,eta_min,eta_max,seed";

/// Relative loss-gap target for time-to-threshold studies:
/// `f(x) − f* ≤ 1e-3·(f(x₀) − f*)`.
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    FedLalr,
    FedAvg,
    FedAdam(ServerAdamParams),
}

/// Where the running average of `‖∇f‖²` is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricCadence {
    /// Once per round at the broadcast point, weighted by `K_t`.
    #[default]
    PerRound,
    /// At every client-average iterate `x̄_{t,k}`; needs full recording.
    PerIteration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub objective: ObjectiveSpec,
    pub run: RunConfig,
    pub algorithm: Algorithm,
    pub cadence: MetricCadence,
    /// Seed for building the objective; `None` uses `run.seed`.
    pub problem_seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn new(objective: ObjectiveSpec, run: RunConfig) -> Self {
        Self {
            objective,
            run,
            algorithm: Algorithm::FedLalr,
            cadence: MetricCadence::PerRound,
            problem_seed: None,
        }
    }

    /// The federated objective this experiment trains on, clipped at
    /// `run.hp.g_inf_clip`.
    pub fn build_problem(&self) -> Result<Problem> {
        let seed = self.problem_seed.unwrap_or(self.run.seed);
        Ok(self
            .objective
            .build(self.run.n_clients, seed)?
            .with_clip(self.run.hp.g_inf_clip))
    }
}

/// One CSV row. Row 0 describes the initial point.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// Completed rounds.
    pub round: usize,
    /// Completed local iterations `Σ K_τ`.
    pub iters: usize,
    /// Interval of the round that produced this row (0 for row 0).
    pub interval: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    /// Mean of `‖∇f‖²` over all iterations so far (row 0: its own value).
    pub avg_grad_norm_sq: f64,
    pub comm_vectors: usize,
    pub eta_min: f64,
    pub eta_max: f64,
    pub seed: u64,
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<RoundMetrics>,
    /// Global optimum value when known.
    pub f_star: Option<f64>,
}

impl MetricsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{},{:e},{:e},{}",
                r.round,
                r.iters,
                r.interval,
                r.loss,
                r.grad_norm_sq,
                r.avg_grad_norm_sq,
                r.comm_vectors,
                r.eta_min,
                r.eta_max,
                r.seed
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn last(&self) -> &RoundMetrics {
        self.rows
            .last()
            .expect("a metrics table always has its initial row")
    }

    /// First row with `f − f* ≤ rel·(f(x₀) − f*)`, if `f*` is known.
    pub fn first_within(&self, rel: f64) -> Option<&RoundMetrics> {
        let f_star = self.f_star?;
        let target = rel * (self.rows[0].loss - f_star);
        self.rows.iter().find(|r| r.loss - f_star <= target)
    }

    /// Loss after `round` completed rounds, if the run got that far.
    pub fn loss_at(&self, round: usize) -> Option<f64> {
        self.rows.get(round).map(|r| r.loss)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: MetricsTable,
    pub final_x: ParamVector,
    pub problem: Problem,
}

struct MetricState<'a> {
    oracles: &'a [crate::objectives::GradientOracle],
    seed: u64,
    start: Instant,
    grad_sum: f64,
    iters: usize,
    rows: Vec<RoundMetrics>,
}

impl MetricState<'_> {
    fn grad_sq(&self, x: &ParamVector) -> Result<f64> {
        Ok(global_grad(self.oracles, x)?.norms().l2_sq)
    }

    fn push(
        &mut self,
        round: usize,
        interval: usize,
        x: &ParamVector,
        comm: usize,
        eta: (f64, f64),
    ) -> Result<()> {
        let loss = global_loss(self.oracles, x)?;
        let g = self.grad_sq(x)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(FedError::NonFinite("round metrics"));
        }
        let avg = if self.iters == 0 {
            g
        } else {
            self.grad_sum / self.iters as f64
        };
        self.rows.push(RoundMetrics {
            round,
            iters: self.iters,
            interval,
            loss,
            grad_norm_sq: g,
            avg_grad_norm_sq: avg,
            comm_vectors: comm,
            eta_min: eta.0,
            eta_max: eta.1,
            seed: self.seed,
            wall_clock: self.start.elapsed(),
        });
        Ok(())
    }

    /// Adds `k` iterations evaluated at the broadcast point (previous row).
    fn add_round_start(&mut self, k: usize) {
        let g = self.rows.last().map_or(0.0, |r| r.grad_norm_sq);
        self.grad_sum += k as f64 * g;
        self.iters += k;
    }
}

/// Runs the configured algorithm and records one metrics row per round
/// plus the initial row.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let problem = cfg.build_problem()?;
    let mut run = cfg.run.clone();
    if cfg.cadence == MetricCadence::PerIteration {
        if cfg.algorithm != Algorithm::FedLalr {
            return Err(FedError::InvalidParameter(
                "per-iteration metrics are only recorded for FedLALR".into(),
            ));
        }
        run.recording = Recording::Full;
    }
    let mut st = MetricState {
        oracles: &problem.oracles,
        seed: run.seed,
        start: Instant::now(),
        grad_sum: 0.0,
        iters: 0,
        rows: Vec::with_capacity(run.rounds + 1),
    };
    let x0 = problem.initial.clone();

    let final_x = match cfg.algorithm {
        Algorithm::FedLalr => {
            let eta0 = 1.0 / run.hp.epsilon;
            st.push(0, 0, &x0, 0, (eta0, eta0))?;
            let initial = ServerState::initial(x0, run.hp.epsilon);
            let cadence = cfg.cadence;
            let server = run_training_with(&run, &problem.oracles, initial, |rec| {
                match cadence {
                    MetricCadence::PerRound => st.add_round_start(rec.interval),
                    MetricCadence::PerIteration => {
                        for k in 1..=rec.interval {
                            let xk = rec
                                .mean_iterate(k)
                                .ok_or_else(|| FedError::MissingHistory("step records".into()))??;
                            st.grad_sum += st.grad_sq(&xk)?;
                            st.iters += 1;
                        }
                    }
                }
                st.push(
                    rec.round + 1,
                    rec.interval,
                    &rec.server_after.x,
                    rec.comm_vectors,
                    rec.eta_range(),
                )
            })?;
            server.x
        }
        Algorithm::FedAvg | Algorithm::FedAdam(_) => {
            let baseline = match cfg.algorithm {
                Algorithm::FedAdam(p) => Baseline::FedAdam(p),
                _ => Baseline::FedAvg,
            };
            let lr0 = run.hp.alpha;
            st.push(0, 0, &x0, 0, (lr0, lr0))?;
            run_baseline_with(baseline, &run, &problem.oracles, x0, |rec| {
                st.add_round_start(rec.interval);
                st.push(
                    rec.round + 1,
                    rec.interval,
                    &rec.x_after,
                    rec.participants.len(),
                    (rec.lr, rec.lr),
                )
            })?
        }
    };

    let rows = st.rows;
    Ok(ExperimentOutput {
        table: MetricsTable {
            rows,
            f_star: problem.optimum.as_ref().map(|(_, f)| *f),
        },
        final_x,
        problem,
    })
}

/// Runs FedLALR keeping every round, for audits and identity checks.
pub fn record_trajectory(cfg: &ExperimentConfig) -> Result<(Problem, Trajectory)> {
    let problem = cfg.build_problem()?;
    let traj = crate::federation::run_training(&cfg.run, &problem.oracles, problem.initial.clone())?;
    Ok((problem, traj))
}

/// Outcome of one seed in a sweep or study.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_avg_grad_norm_sq: f64,
    pub final_grad_norm_sq: f64,
    pub rounds_to_threshold: Option<usize>,
    pub iters_to_threshold: Option<usize>,
}

impl SeedOutcome {
    fn from_table(seed: u64, table: &MetricsTable, rel: f64) -> Self {
        let hit = table.first_within(rel);
        Self {
            seed,
            final_avg_grad_norm_sq: table.last().avg_grad_norm_sq,
            final_grad_norm_sq: table.last().grad_norm_sq,
            rounds_to_threshold: hit.map(|r| r.round),
            iters_to_threshold: hit.map(|r| r.iters),
        }
    }
}

/// Median, with `+∞` standing in for missing values.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a == b {
            a
        } else {
            0.5 * (a + b)
        }
    }
}

fn opt_to_f64(v: Option<usize>) -> f64 {
    v.map_or(f64::INFINITY, |v| v as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub n_clients: usize,
    /// Learning rate of each seed's run (the cap depends on the seed's `L`).
    pub alphas: Vec<f64>,
    pub median_final_avg_grad_norm_sq: f64,
    /// `+∞` when fewer than half the seeds reached the threshold.
    pub median_iters_to_threshold: f64,
    pub outcomes: Vec<SeedOutcome>,
}

/// `min(√(N/KT), 3ε/(20L))`, or the uncapped rate when `L` is unknown.
pub fn speedup_alpha(n: usize, total_iterations: usize, epsilon: f64, smoothness: Option<f64>) -> f64 {
    let a = (n as f64 / total_iterations as f64).sqrt();
    match smoothness {
        Some(l) => a.min(3.0 * epsilon / (20.0 * l)),
        None => a,
    }
}

/// Runs `base` for every client count in `n_values` and every seed, with the
/// learning rate set by [`speedup_alpha`]. Configurations run in parallel.
pub fn speedup_sweep(base: &ExperimentConfig, n_values: &[usize], seeds: &[u64]) -> Result<Vec<SweepPoint>> {
    ensure_param(n_values.len() >= 2, || {
        "a speedup sweep needs at least two client counts".into()
    })?;
    ensure_param(seeds.len() >= 5, || {
        "a speedup sweep needs at least five seeds".into()
    })?;
    let total = base.run.schedule.total_iterations(base.run.rounds);
    ensure_param(total > 0, || "a speedup sweep needs at least one round".into())?;
    let jobs: Vec<(usize, u64)> = n_values
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let results: Vec<(f64, SeedOutcome)> = jobs
        .par_iter()
        .map(|&(n, seed)| {
            let mut cfg = base.clone();
            cfg.run.n_clients = n;
            cfg.run.participants = n;
            cfg.run.seed = seed;
            let l = cfg.build_problem()?.smoothness();
            cfg.run.hp.alpha = speedup_alpha(n, total, cfg.run.hp.epsilon, l);
            let out = run_experiment(&cfg)?;
            Ok((
                cfg.run.hp.alpha,
                SeedOutcome::from_table(seed, &out.table, DEFAULT_THRESHOLD),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(n_values
        .iter()
        .zip(results.chunks(seeds.len()))
        .map(|(&n, chunk)| SweepPoint {
            n_clients: n,
            alphas: chunk.iter().map(|(a, _)| *a).collect(),
            median_final_avg_grad_norm_sq: median(chunk.iter().map(|(_, o)| o.final_avg_grad_norm_sq)),
            median_iters_to_threshold: median(chunk.iter().map(|(_, o)| opt_to_f64(o.iters_to_threshold))),
            outcomes: chunk.iter().map(|(_, o)| o.clone()).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSummary {
    pub schedule: IntervalSchedule,
    /// `+∞` when fewer than half the seeds reached the threshold.
    pub median_rounds_to_threshold: f64,
    pub outcomes: Vec<SeedOutcome>,
    /// Loss after `early_round` rounds, per seed.
    pub early_losses: Vec<f64>,
    pub tables: Vec<MetricsTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalStudy {
    pub fixed: ScheduleSummary,
    pub adaptive: ScheduleSummary,
    pub early_round: usize,
}

impl IntervalStudy {
    /// Seeds whose adaptive-schedule loss at `early_round` is at most the
    /// fixed schedule's.
    pub fn early_wins(&self) -> usize {
        self.fixed
            .early_losses
            .iter()
            .zip(&self.adaptive.early_losses)
            .filter(|(f, a)| a <= f)
            .count()
    }
}

/// Compares a fixed interval `fixed_k` against `adaptive` over `seeds`, with
/// the same round budget, objective and hyperparameters. Each seed builds
/// the same problem for both schedules.
pub fn interval_study(
    base: &ExperimentConfig,
    fixed_k: usize,
    adaptive: IntervalSchedule,
    seeds: &[u64],
    early_round: usize,
) -> Result<IntervalStudy> {
    ensure_param(!seeds.is_empty(), || {
        "an interval study needs at least one seed".into()
    })?;
    ensure_param(early_round <= base.run.rounds, || {
        format!(
            "early round {early_round} is past the {}-round budget",
            base.run.rounds
        )
    })?;
    let summarise = |schedule: IntervalSchedule| -> Result<ScheduleSummary> {
        let tables: Vec<MetricsTable> = seeds
            .par_iter()
            .map(|&seed| {
                let mut cfg = base.clone();
                cfg.run.schedule = schedule;
                cfg.run.seed = seed;
                Ok(run_experiment(&cfg)?.table)
            })
            .collect::<Result<_>>()?;
        let outcomes: Vec<SeedOutcome> = seeds
            .iter()
            .zip(&tables)
            .map(|(&s, t)| SeedOutcome::from_table(s, t, DEFAULT_THRESHOLD))
            .collect();
        Ok(ScheduleSummary {
            schedule,
            median_rounds_to_threshold: median(outcomes.iter().map(|o| opt_to_f64(o.rounds_to_threshold))),
            early_losses: tables
                .iter()
                .map(|t| t.loss_at(early_round).unwrap_or(f64::NAN))
                .collect(),
            outcomes,
            tables,
        })
    };
    Ok(IntervalStudy {
        fixed: summarise(IntervalSchedule::Fixed(fixed_k))?,
        adaptive: summarise(adaptive)?,
        early_round,
    })
}

/// State invariant checked by [`audit_trajectory`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Invariant {
    /// `v̂ ≥ ε²`.
    VhatFloor,
    /// `v̂ ≤ G∞²`.
    VhatCeiling,
    /// `‖m‖∞ ≤ G∞`.
    MomentumBound,
    /// `1/G∞ ≤ η ≤ 1/ε`.
    EtaBound,
    /// `v̂` never decreases across a local step or a round at a client.
    VhatLocalMonotone,
    /// Server `v̂` never decreases across rounds.
    VhatServerMonotone,
}

impl Invariant {
    pub fn name(&self) -> &'static str {
        match self {
            Invariant::VhatFloor => "v_hat >= epsilon^2",
            Invariant::VhatCeiling => "v_hat <= G_inf^2",
            Invariant::MomentumBound => "|m|_inf <= G_inf",
            Invariant::EtaBound => "1/G_inf <= eta <= 1/epsilon",
            Invariant::VhatLocalMonotone => "client v_hat nondecreasing",
            Invariant::VhatServerMonotone => "server v_hat nondecreasing",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub invariant: Invariant,
    pub round: usize,
    pub client: Option<usize>,
    pub coordinate: usize,
    pub value: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditReport {
    pub states_checked: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, inv: Invariant) -> usize {
        self.violations.iter().filter(|v| v.invariant == inv).count()
    }
}

/// Relative slack for bound checks, covering the rounding of `β·a + (1−β)·b`
/// and of the averages.
pub const AUDIT_REL_TOL: f64 = 8.0 * f64::EPSILON;

struct Auditor<'a> {
    hp: &'a HyperParams,
    report: AuditReport,
}

impl Auditor<'_> {
    fn flag(
        &mut self,
        invariant: Invariant,
        round: usize,
        client: Option<usize>,
        coordinate: usize,
        value: f64,
        limit: f64,
    ) {
        self.report.violations.push(Violation {
            invariant,
            round,
            client,
            coordinate,
            value,
            limit,
        });
    }

    fn state(&mut self, round: usize, client: Option<usize>, m: &ParamVector, v_hat: &ParamVector) {
        self.report.states_checked += 1;
        let eps = self.hp.epsilon;
        let floor = eps * eps;
        let up = 1.0 + AUDIT_REL_TOL;
        let down = 1.0 - AUDIT_REL_TOL;
        for (j, &v) in v_hat.iter().enumerate() {
            if !(v >= floor * down) {
                self.flag(Invariant::VhatFloor, round, client, j, v, floor);
            }
            let eta = 1.0 / v.sqrt();
            if !(eta <= up / eps) {
                self.flag(Invariant::EtaBound, round, client, j, eta, 1.0 / eps);
            }
            if let Some(g) = self.hp.g_inf_clip {
                if !(v <= g * g * up) {
                    self.flag(Invariant::VhatCeiling, round, client, j, v, g * g);
                }
                if !(eta >= down / g) {
                    self.flag(Invariant::EtaBound, round, client, j, eta, 1.0 / g);
                }
            }
        }
        if let Some(g) = self.hp.g_inf_clip {
            for (j, &v) in m.iter().enumerate() {
                if !(v.abs() <= g * up) {
                    self.flag(Invariant::MomentumBound, round, client, j, v, g);
                }
            }
        }
    }

    /// `after ≥ before·(1 − slack)`. Local updates take a max and are exact;
    /// the server average can land one ulp below its smallest input.
    fn monotone(
        &mut self,
        inv: Invariant,
        round: usize,
        client: Option<usize>,
        before: &ParamVector,
        after: &ParamVector,
    ) {
        let slack = match inv {
            Invariant::VhatServerMonotone => AUDIT_REL_TOL,
            _ => 0.0,
        };
        for (j, (&b, &a)) in before.iter().zip(after.iter()).enumerate() {
            if !(a >= b * (1.0 - slack)) {
                self.flag(inv, round, client, j, a, b);
            }
        }
    }
}

/// Checks every recorded state of `traj` against the `v̂`, momentum and
/// learning-rate invariants. Bounds involving `G∞` are checked only when
/// `hp.g_inf_clip` is set.
pub fn audit_trajectory(traj: &Trajectory, hp: &HyperParams) -> AuditReport {
    let mut a = Auditor {
        hp,
        report: AuditReport::default(),
    };
    a.state(0, None, &traj.initial.m, &traj.initial.v_hat);
    for rec in &traj.rounds {
        let t = rec.round;
        for (idx, c) in rec.clients.iter().enumerate() {
            let id = Some(rec.participants[idx]);
            a.state(t, id, &c.m, &c.v_hat);
            a.monotone(
                Invariant::VhatLocalMonotone,
                t,
                id,
                &rec.server_before.v_hat,
                &c.v_hat,
            );
        }
        if let Some(steps) = &rec.steps {
            for (idx, client_steps) in steps.iter().enumerate() {
                let id = Some(rec.participants[idx]);
                for s in client_steps {
                    a.state(t, id, &s.m_after, &s.v_hat_after);
                    a.monotone(
                        Invariant::VhatLocalMonotone,
                        t,
                        id,
                        &s.v_hat_before,
                        &s.v_hat_after,
                    );
                }
            }
        }
        a.state(t, None, &rec.server_after.m, &rec.server_after.v_hat);
        a.monotone(
            Invariant::VhatServerMonotone,
            t,
            None,
            &rec.server_before.v_hat,
            &rec.server_after.v_hat,
        );
    }
    a.report
}

/// Bound inputs for a closed-form problem: `L` and `σ` from the objective,
/// `G∞` from the clip, `f_gap = f(x₀) − f*` and `K` from the first interval.
pub fn theory_inputs(problem: &Problem, run: &RunConfig) -> Result<TheoryInputs> {
    let smoothness = problem.smoothness().ok_or_else(|| {
        FedError::InvalidParameter("the objective has no closed-form smoothness constant".into())
    })?;
    let sigma = problem
        .noise_sigma()
        .ok_or_else(|| FedError::InvalidParameter("the objective has no closed-form noise level".into()))?;
    let g_inf = run
        .hp
        .g_inf_clip
        .ok_or_else(|| FedError::InvalidParameter("bound evaluation needs a gradient clip G_inf".into()))?;
    let (_, f_star) = problem
        .optimum
        .as_ref()
        .ok_or_else(|| FedError::InvalidParameter("the objective has no closed-form optimum".into()))?;
    let f0 = global_loss(&problem.oracles, &problem.initial)?;
    Ok(TheoryInputs {
        smoothness,
        sigma,
        g_inf,
        epsilon: run.hp.epsilon,
        dim: problem.dim(),
        beta1: run.hp.beta1,
        n_clients: run.n_clients,
        local_steps: run.schedule.interval(0),
        rounds: run.rounds.max(1),
        alpha: run.hp.alpha,
        f_gap: (f0 - f_star).max(0.0),
    })
}
