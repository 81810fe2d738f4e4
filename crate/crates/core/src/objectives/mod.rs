//! Client objectives `f_i` and their gradient oracles.
//!
//! Three families are available: heterogeneous quadratics (closed-form
//! optimum, exactly tunable noise), L2-regularised logistic regression and a
//! tiny tanh MLP. The latter two draw minibatches with replacement from the
//! client's shard of a labelled dataset, which is split across clients with
//! [`dirichlet_partition`].

pub mod dataset;
pub mod logistic;
pub mod mlp;
pub mod partition;
pub mod quadratic;

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

pub use dataset::Dataset;
pub use partition::{dirichlet_partition, Partition};
pub use quadratic::{global_optimum, Curvature, QuadraticModel, QuadraticSpec};

use crate::error::{ensure_param, FedError, Result};
use crate::param::{clip_inf, mean_of, ParamVector};
use crate::rng::{stream, Purpose, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    HetQuadratic,
    SyntheticLogistic,
    TinyMlp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleLoss {
    Logistic { l2: f64 },
    Mlp { hidden: usize },
}

/// A client's shard of a shared dataset plus the loss evaluated on it.
#[derive(Debug, Clone)]
pub struct SampleModel {
    pub data: Arc<Dataset>,
    pub indices: Vec<usize>,
    /// Minibatch size; `None` means full batch.
    pub batch: Option<usize>,
    pub loss: SampleLoss,
}

impl SampleModel {
    pub fn new(
        data: Arc<Dataset>,
        indices: Vec<usize>,
        batch: Option<usize>,
        loss: SampleLoss,
    ) -> Result<Self> {
        ensure_param(!indices.is_empty(), || "client shard is empty".into())?;
        ensure_param(indices.iter().all(|&i| i < data.len()), || {
            "client shard references a sample outside the dataset".into()
        })?;
        ensure_param(batch.is_none_or(|b| b >= 1), || {
            "batch size must be positive".into()
        })?;
        match loss {
            SampleLoss::Logistic { l2 } => ensure_param(l2 >= 0.0, || "l2 must be nonnegative".into())?,
            SampleLoss::Mlp { hidden } => ensure_param((1..=mlp::MAX_HIDDEN).contains(&hidden), || {
                format!("hidden width must be in 1..={}", mlp::MAX_HIDDEN)
            })?,
        }
        Ok(Self {
            data,
            indices,
            batch,
            loss,
        })
    }

    pub fn dim(&self) -> usize {
        let p = self.data.n_features();
        match self.loss {
            SampleLoss::Logistic { .. } => logistic::dim(p),
            SampleLoss::Mlp { hidden } => mlp::dim(p, hidden),
        }
    }

    fn sample_loss(&self, x: &[f64], s: usize) -> f64 {
        let z = &self.data.features[s];
        let y = self.data.binary_target(s);
        match self.loss {
            SampleLoss::Logistic { .. } => logistic::sample_loss(x, z, y),
            SampleLoss::Mlp { hidden } => mlp::sample_loss(x, z, y, hidden),
        }
    }

    fn add_sample_grad(&self, x: &[f64], s: usize, acc: &mut [f64]) {
        let z = &self.data.features[s];
        let y = self.data.binary_target(s);
        match self.loss {
            SampleLoss::Logistic { .. } => logistic::accumulate_grad(x, z, y, acc),
            SampleLoss::Mlp { hidden } => mlp::accumulate_grad(x, z, y, hidden, acc),
        }
    }

    fn grad_over(&self, x: &ParamVector, samples: impl ExactSizeIterator<Item = usize>) -> ParamVector {
        let n = samples.len() as f64;
        let mut acc = vec![0.0; x.dim()];
        for s in samples {
            self.add_sample_grad(x.as_slice(), s, &mut acc);
        }
        acc.iter_mut().for_each(|v| *v /= n);
        if let SampleLoss::Logistic { l2 } = self.loss {
            logistic::add_regulariser_grad(x.as_slice(), l2, &mut acc);
        }
        ParamVector::new(acc)
    }

    pub fn loss(&self, x: &ParamVector) -> f64 {
        let mut total: f64 = self
            .indices
            .iter()
            .map(|&s| self.sample_loss(x.as_slice(), s))
            .sum::<f64>()
            / self.indices.len() as f64;
        if let SampleLoss::Logistic { l2 } = self.loss {
            total += logistic::regulariser(x.as_slice(), l2);
        }
        total
    }

    pub fn full_grad(&self, x: &ParamVector) -> ParamVector {
        self.grad_over(x, self.indices.iter().copied())
    }

    pub fn minibatch_grad(&self, x: &ParamVector, rng: &mut Stream) -> ParamVector {
        match self.batch {
            None => self.full_grad(x),
            Some(b) => {
                let picks: Vec<usize> = (0..b)
                    .map(|_| self.indices[rng.random_range(0..self.indices.len())])
                    .collect();
                self.grad_over(x, picks.into_iter())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Quadratic(QuadraticModel),
    Samples(SampleModel),
}

/// Per-client gradient source, optionally clipped coordinatewise at `G∞`.
#[derive(Debug, Clone)]
pub struct GradientOracle {
    pub client: usize,
    pub model: Model,
    pub clip: Option<f64>,
}

impl GradientOracle {
    pub fn new(client: usize, model: Model) -> Self {
        Self {
            client,
            model,
            clip: None,
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    pub fn kind(&self) -> OracleKind {
        match &self.model {
            Model::Quadratic(_) => OracleKind::HetQuadratic,
            Model::Samples(s) => match s.loss {
                SampleLoss::Logistic { .. } => OracleKind::SyntheticLogistic,
                SampleLoss::Mlp { .. } => OracleKind::TinyMlp,
            },
        }
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            Model::Quadratic(q) => q.dim(),
            Model::Samples(s) => s.dim(),
        }
    }

    fn check_point(&self, x: &ParamVector) -> Result<()> {
        x.ensure_dim(self.dim())?;
        x.ensure_finite("oracle query point")
    }

    pub fn loss(&self, x: &ParamVector) -> Result<f64> {
        self.check_point(x)?;
        match &self.model {
            Model::Quadratic(q) => q.loss(x),
            Model::Samples(s) => Ok(s.loss(x)),
        }
    }

    /// Exact, unclipped `∇f_i(x)`.
    pub fn full_grad(&self, x: &ParamVector) -> Result<ParamVector> {
        self.check_point(x)?;
        match &self.model {
            Model::Quadratic(q) => q.grad(x),
            Model::Samples(s) => Ok(s.full_grad(x)),
        }
    }

    /// `∇f_i(x)` clipped at the oracle's bound, the gradient field the
    /// bounded-gradient assumption refers to.
    pub fn bounded_grad(&self, x: &ParamVector) -> Result<ParamVector> {
        let g = self.full_grad(x)?;
        match self.clip {
            Some(b) => clip_inf(&g, b),
            None => Ok(g),
        }
    }

    pub fn stoch_grad(&self, x: &ParamVector, rng: &mut Stream) -> Result<ParamVector> {
        self.check_point(x)?;
        let g = match &self.model {
            Model::Quadratic(q) => q.noisy_grad(x, rng)?,
            Model::Samples(s) => s.minibatch_grad(x, rng),
        };
        let g = match self.clip {
            Some(b) => clip_inf(&g, b)?,
            None => g,
        };
        g.ensure_finite("stochastic gradient")?;
        Ok(g)
    }

    /// Lipschitz constant of `∇f_i`, when known in closed form.
    pub fn smoothness(&self) -> Option<f64> {
        match &self.model {
            Model::Quadratic(q) => Some(q.smoothness()),
            Model::Samples(_) => None,
        }
    }

    /// `sqrt(E‖g − ∇f_i‖²)` before clipping, when known exactly.
    pub fn noise_sigma(&self) -> Option<f64> {
        match &self.model {
            Model::Quadratic(q) => Some(q.sigma),
            Model::Samples(_) => None,
        }
    }
}

pub fn global_loss(oracles: &[GradientOracle], x: &ParamVector) -> Result<f64> {
    if oracles.is_empty() {
        return Err(FedError::Empty("oracles"));
    }
    let mut total = 0.0;
    for o in oracles {
        total += o.loss(x)?;
    }
    Ok(total / oracles.len() as f64)
}

/// `∇f(x) = (1/N) Σ ∇f_i(x)`.
pub fn global_grad(oracles: &[GradientOracle], x: &ParamVector) -> Result<ParamVector> {
    let grads = oracles
        .iter()
        .map(|o| o.full_grad(x))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&grads)
}

/// `max_i max_p ‖∇f(p) − ∇f_i(p)‖²` over the given probe points, using each
/// oracle's bounded gradient.
pub fn heterogeneity_at(oracles: &[GradientOracle], points: &[ParamVector]) -> Result<f64> {
    if points.is_empty() {
        return Err(FedError::Empty("probe points"));
    }
    let mut worst: f64 = 0.0;
    for p in points {
        let grads = oracles
            .iter()
            .map(|o| o.bounded_grad(p))
            .collect::<Result<Vec<_>>>()?;
        let global = mean_of(&grads)?;
        for g in &grads {
            worst = worst.max(global.sub(g)?.norms().l2_sq);
        }
    }
    Ok(worst)
}

/// Heterogeneity probed at `x` and `probes − 1` Gaussian perturbations of it
/// (unit scale), drawn from `seed`.
pub fn measure_heterogeneity(
    oracles: &[GradientOracle],
    x: &ParamVector,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    ensure_param(probes >= 1, || "probe count must be at least 1".into())?;
    let mut rng = stream(seed, Purpose::Aux, &[0x4E7]);
    let mut points = vec![x.clone()];
    for _ in 1..probes {
        points.push(x.map(|v| v + rng.sample::<f64, _>(StandardNormal)));
    }
    heterogeneity_at(oracles, &points)
}

/// Where a sample-based objective gets its data from.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    Synthetic {
        n_samples: usize,
        n_features: usize,
        n_classes: usize,
        separation: f64,
    },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub source: SampleSource,
    pub dirichlet_alpha: f64,
    pub batch: Option<usize>,
}

/// Description of the federated objective, enough to rebuild it from a seed.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveSpec {
    Quadratic(QuadraticSpec),
    Logistic { data: SampleSpec, l2: f64 },
    Mlp { data: SampleSpec, hidden: usize },
}

/// A built federated objective: one oracle per client plus whatever is
/// known about it in closed form.
#[derive(Debug, Clone)]
pub struct Problem {
    pub oracles: Vec<GradientOracle>,
    /// `(x*, f*)` when the global optimum is available.
    pub optimum: Option<(ParamVector, f64)>,
    pub initial: ParamVector,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    pub fn n_clients(&self) -> usize {
        self.oracles.len()
    }

    pub fn smoothness(&self) -> Option<f64> {
        self.oracles
            .iter()
            .map(GradientOracle::smoothness)
            .try_fold(0.0f64, |acc, l| l.map(|l| acc.max(l)))
    }

    pub fn noise_sigma(&self) -> Option<f64> {
        self.oracles
            .iter()
            .map(GradientOracle::noise_sigma)
            .try_fold(0.0f64, |acc, s| s.map(|s| acc.max(s)))
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.oracles = self.oracles.into_iter().map(|o| o.with_clip(clip)).collect();
        self
    }
}

impl ObjectiveSpec {
    pub fn build(&self, n_clients: usize, seed: u64) -> Result<Problem> {
        ensure_param(n_clients >= 1, || "need at least one client".into())?;
        match self {
            ObjectiveSpec::Quadratic(spec) => {
                let models = spec.generate(n_clients, seed)?;
                let refs: Vec<&QuadraticModel> = models.iter().collect();
                let optimum = global_optimum(&refs)?;
                let oracles = models
                    .into_iter()
                    .enumerate()
                    .map(|(i, m)| GradientOracle::new(i, Model::Quadratic(m)))
                    .collect();
                Ok(Problem {
                    oracles,
                    optimum: Some(optimum),
                    initial: ParamVector::zeros(spec.dim),
                })
            }
            ObjectiveSpec::Logistic { data, l2 } => {
                Self::build_samples(data, SampleLoss::Logistic { l2: *l2 }, n_clients, seed)
            }
            ObjectiveSpec::Mlp { data, hidden } => {
                Self::build_samples(data, SampleLoss::Mlp { hidden: *hidden }, n_clients, seed)
            }
        }
    }

    fn build_samples(spec: &SampleSpec, loss: SampleLoss, n_clients: usize, seed: u64) -> Result<Problem> {
        let data = match &spec.source {
            SampleSource::Synthetic {
                n_samples,
                n_features,
                n_classes,
                separation,
            } => Dataset::synthetic(*n_samples, *n_features, *n_classes, *separation, seed)?,
            SampleSource::File(path) => Dataset::load(path)?,
        };
        let mut rng = stream(seed, Purpose::Partition, &[]);
        let partition = dirichlet_partition(&data.labels, n_clients, spec.dirichlet_alpha, &mut rng)?;
        let data = Arc::new(data);
        let oracles = partition
            .assignment
            .into_iter()
            .enumerate()
            .map(|(i, idx)| {
                SampleModel::new(Arc::clone(&data), idx, spec.batch, loss)
                    .map(|m| GradientOracle::new(i, Model::Samples(m)))
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = oracles[0].dim();
        let initial = match loss {
            SampleLoss::Logistic { .. } => ParamVector::zeros(dim),
            // symmetric hidden units never separate from a zero start
            SampleLoss::Mlp { .. } => {
                let mut rng = stream(seed, Purpose::Init, &[]);
                ParamVector::new(
                    (0..dim)
                        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            }
        };
        Ok(Problem {
            oracles,
            optimum: None,
            initial,
        })
    }
}
