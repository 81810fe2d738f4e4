//! Heterogeneous quadratic clients: `f_i(x) = ½ (x − b_i)ᵀ A_i (x − b_i)`.
//!
//! The stochastic gradient adds isotropic Gaussian noise with per-coordinate
//! standard deviation `σ/√d`, so `E‖g − ∇f_i‖² = σ²` exactly and σ can be fed
//! straight into the bound evaluators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_param, FedError, Result};
use crate::param::ParamVector;
use crate::rng::{stream, Purpose, Stream};

#[derive(Debug, Clone, PartialEq)]
pub enum Curvature {
    /// Positive diagonal of `A_i`.
    Diagonal(ParamVector),
    /// Full symmetric positive-definite `A_i`.
    Dense(DMatrix<f64>),
}

impl Curvature {
    pub fn dim(&self) -> usize {
        match self {
            Curvature::Diagonal(a) => a.dim(),
            Curvature::Dense(a) => a.nrows(),
        }
    }

    pub fn apply(&self, v: &ParamVector) -> Result<ParamVector> {
        match self {
            Curvature::Diagonal(a) => crate::param::hadamard(a, v),
            Curvature::Dense(a) => {
                v.ensure_dim(a.nrows())?;
                let out = a * DVector::from_column_slice(v.as_slice());
                Ok(ParamVector::new(out.as_slice().to_vec()))
            }
        }
    }

    /// Largest eigenvalue.
    pub fn max_eigenvalue(&self) -> f64 {
        match self {
            Curvature::Diagonal(a) => a.max_value(),
            Curvature::Dense(a) => a
                .clone()
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Curvature::Diagonal(a) => DMatrix::from_diagonal(&DVector::from_column_slice(a.as_slice())),
            Curvature::Dense(a) => a.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    pub curvature: Curvature,
    pub optimum: ParamVector,
    pub sigma: f64,
}

impl QuadraticModel {
    pub fn new(curvature: Curvature, optimum: ParamVector, sigma: f64) -> Result<Self> {
        optimum.ensure_dim(curvature.dim())?;
        ensure_param(sigma >= 0.0 && sigma.is_finite(), || {
            format!("noise sigma must be finite and nonnegative, got {sigma}")
        })?;
        match &curvature {
            Curvature::Diagonal(a) => ensure_param(a.iter().all(|&v| v > 0.0 && v.is_finite()), || {
                "diagonal curvature must be positive".into()
            })?,
            Curvature::Dense(a) => {
                ensure_param(a.is_square(), || "dense curvature must be square".into())?;
                ensure_param(
                    (a - a.transpose()).abs().max() <= 1e-12 * (1.0 + a.abs().max()),
                    || "dense curvature must be symmetric".into(),
                )?;
                ensure_param(a.clone().cholesky().is_some(), || {
                    "dense curvature must be positive definite".into()
                })?;
            }
        }
        Ok(Self {
            curvature,
            optimum,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.optimum.dim()
    }

    pub fn loss(&self, x: &ParamVector) -> Result<f64> {
        let r = x.sub(&self.optimum)?;
        Ok(0.5 * r.dot(&self.curvature.apply(&r)?)?)
    }

    pub fn grad(&self, x: &ParamVector) -> Result<ParamVector> {
        self.curvature.apply(&x.sub(&self.optimum)?)
    }

    pub fn noisy_grad(&self, x: &ParamVector, rng: &mut Stream) -> Result<ParamVector> {
        let g = self.grad(x)?;
        if self.sigma == 0.0 {
            return Ok(g);
        }
        let scale = self.sigma / (self.dim() as f64).sqrt();
        Ok(g.map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)))
    }

    pub fn smoothness(&self) -> f64 {
        self.curvature.max_eigenvalue()
    }
}

/// Closed-form minimizer and minimum value of `f = (1/N) Σ f_i`.
pub fn global_optimum(models: &[&QuadraticModel]) -> Result<(ParamVector, f64)> {
    let first = models.first().ok_or(FedError::Empty("quadratic clients"))?;
    let d = first.dim();
    let all_diag = models
        .iter()
        .all(|m| matches!(m.curvature, Curvature::Diagonal(_)));
    let x_star = if all_diag {
        let mut num = vec![0.0; d];
        let mut den = vec![0.0; d];
        for m in models {
            m.optimum.ensure_dim(d)?;
            let Curvature::Diagonal(a) = &m.curvature else {
                unreachable!()
            };
            for j in 0..d {
                num[j] += a[j] * m.optimum[j];
                den[j] += a[j];
            }
        }
        ParamVector::new(num.iter().zip(&den).map(|(n, s)| n / s).collect())
    } else {
        let mut sum_a = DMatrix::<f64>::zeros(d, d);
        let mut sum_ab = DVector::<f64>::zeros(d);
        for m in models {
            m.optimum.ensure_dim(d)?;
            let a = m.curvature.to_dense();
            sum_ab += &a * DVector::from_column_slice(m.optimum.as_slice());
            sum_a += a;
        }
        let chol = sum_a
            .cholesky()
            .ok_or_else(|| FedError::Domain("summed curvature is not positive definite".into()))?;
        ParamVector::new(chol.solve(&sum_ab).as_slice().to_vec())
    };
    let mut f_star = 0.0;
    for m in models {
        f_star += m.loss(&x_star)?;
    }
    f_star /= models.len() as f64;
    Ok((x_star, f_star))
}

/// Parameters of the synthetic heterogeneous quadratic family.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec {
    pub dim: usize,
    pub sigma: f64,
    /// Diagonal curvature entries are drawn uniformly from this range.
    pub curvature_min: f64,
    pub curvature_max: f64,
    /// All clients share one curvature draw; only their optima differ.
    pub shared_curvature: bool,
    /// Scale of the common optimum centre.
    pub optimum_scale: f64,
    /// Per-client standard deviation of `b_i` around the centre.
    pub optimum_spread: f64,
    /// Use a dense rotated curvature instead of a diagonal one.
    pub dense: bool,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        Self {
            dim: 10,
            sigma: 0.0,
            curvature_min: 0.5,
            curvature_max: 2.0,
            shared_curvature: false,
            optimum_scale: 1.0,
            optimum_spread: 0.5,
            dense: false,
        }
    }
}

impl QuadraticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_param(self.dim >= 1, || "quadratic dimension must be at least 1".into())?;
        ensure_param(
            self.curvature_min > 0.0 && self.curvature_max >= self.curvature_min,
            || {
                format!(
                    "curvature range must satisfy 0 < min <= max, got [{}, {}]",
                    self.curvature_min, self.curvature_max
                )
            },
        )?;
        ensure_param(self.optimum_scale >= 0.0 && self.optimum_spread >= 0.0, || {
            "optimum scale and spread must be nonnegative".into()
        })?;
        ensure_param(self.sigma >= 0.0, || "sigma must be nonnegative".into())
    }

    fn draw_curvature(&self, rng: &mut Stream) -> Curvature {
        let diag: Vec<f64> = (0..self.dim)
            .map(|_| rng.random_range(self.curvature_min..=self.curvature_max))
            .collect();
        if !self.dense {
            return Curvature::Diagonal(ParamVector::new(diag));
        }
        // Q diag Qᵀ with Q from the QR factor of a Gaussian matrix.
        let g = DMatrix::<f64>::from_fn(self.dim, self.dim, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let a = &q * DMatrix::from_diagonal(&DVector::from_vec(diag)) * q.transpose();
        Curvature::Dense((&a + a.transpose()) * 0.5)
    }

    /// Builds one model per client. Client `i`'s draw depends only on
    /// `(seed, i)`, so the first clients of a larger federation coincide with
    /// a smaller one generated from the same seed.
    pub fn generate(&self, n_clients: usize, seed: u64) -> Result<Vec<QuadraticModel>> {
        self.validate()?;
        let mut centre_rng = stream(seed, Purpose::Problem, &[u64::MAX]);
        let centre: Vec<f64> = (0..self.dim)
            .map(|_| self.optimum_scale * centre_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let shared = self.draw_curvature(&mut centre_rng);
        (0..n_clients)
            .map(|i| {
                let mut rng = stream(seed, Purpose::Problem, &[i as u64]);
                let curvature = if self.shared_curvature {
                    shared.clone()
                } else {
                    self.draw_curvature(&mut rng)
                };
                let optimum: Vec<f64> = centre
                    .iter()
                    .map(|c| c + self.optimum_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                QuadraticModel::new(curvature, ParamVector::new(optimum), self.sigma)
            })
            .collect()
    }
}
