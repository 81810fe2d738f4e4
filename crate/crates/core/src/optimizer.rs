//! Client-side local optimizers: uncorrected AMSGrad with a running-max
//! second moment, and plain SGD for the baselines.

use crate::error::{ensure_param, FedError, Result};
use crate::objectives::GradientOracle;
use crate::param::{clip_inf, elementwise_max, hadamard, inv_sqrt, ParamVector};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `v̂` starts at `epsilon²`.
    pub epsilon: f64,
    /// Coordinatewise gradient bound enforced at the oracle boundary.
    pub g_inf_clip: Option<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 0.01,
            g_inf_clip: None,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        ensure_param(self.alpha > 0.0 && self.alpha.is_finite(), || {
            format!("alpha must be positive, got {}", self.alpha)
        })?;
        ensure_param((0.0..1.0).contains(&self.beta1), || {
            format!("beta1 must lie in [0, 1), got {}", self.beta1)
        })?;
        ensure_param((0.0..1.0).contains(&self.beta2), || {
            format!("beta2 must lie in [0, 1), got {}", self.beta2)
        })?;
        ensure_param(self.epsilon > 0.0 && self.epsilon.is_finite(), || {
            format!("epsilon must be positive, got {}", self.epsilon)
        })?;
        // ε² must stay a normal positive double or v̂ collapses to zero
        ensure_param(self.epsilon * self.epsilon > 0.0, || {
            format!("epsilon {} underflows when squared", self.epsilon)
        })?;
        if let Some(g) = self.g_inf_clip {
            ensure_param(g > 0.0 && g.is_finite(), || {
                format!("g_inf_clip must be positive, got {g}")
            })?;
        }
        Ok(())
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn v_hat_floor(&self) -> f64 {
        self.epsilon * self.epsilon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOptState {
    pub x: ParamVector,
    pub m: ParamVector,
    pub v: ParamVector,
    pub v_hat: ParamVector,
    pub local_step: usize,
    pub round: usize,
}

impl LocalOptState {
    /// `m = 0`, `v = v̂ = ε²`.
    pub fn initial(x: ParamVector, epsilon: f64) -> Self {
        let d = x.dim();
        Self {
            x,
            m: ParamVector::zeros(d),
            v: ParamVector::filled(d, epsilon * epsilon),
            v_hat: ParamVector::filled(d, epsilon * epsilon),
            local_step: 0,
            round: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    /// Effective per-coordinate learning rate `η = 1/√v̂`.
    pub fn eta(&self) -> Result<ParamVector> {
        inv_sqrt(&self.v_hat)
    }
}

/// Everything the auxiliary-sequence identity and the audits need about one
/// local step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub x_before: ParamVector,
    pub grad: ParamVector,
    pub m_before: ParamVector,
    pub m_after: ParamVector,
    pub v_hat_before: ParamVector,
    pub v_hat_after: ParamVector,
}

fn check_grad(state: &LocalOptState, g: &ParamVector) -> Result<()> {
    g.ensure_dim(state.dim())?;
    g.ensure_finite("gradient")
}

/// One AMSGrad step:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, `v̂ ← max(v̂, v)`,
/// `x ← x − α m/√v̂`.
pub fn amsgrad_step(state: &LocalOptState, g: &ParamVector, hp: &HyperParams) -> Result<LocalOptState> {
    check_grad(state, g)?;
    let m = state.m.zip_map(g, |m, g| hp.beta1 * m + (1.0 - hp.beta1) * g)?;
    let v = state
        .v
        .zip_map(g, |v, g| hp.beta2 * v + (1.0 - hp.beta2) * g * g)?;
    let v_hat = elementwise_max(&state.v_hat, &v)?;
    let eta = inv_sqrt(&v_hat)?;
    let x = state.x.axpy(-hp.alpha, &hadamard(&m, &eta)?)?;
    x.ensure_finite("parameters after AMSGrad step")?;
    Ok(LocalOptState {
        x,
        m,
        v,
        v_hat,
        local_step: state.local_step + 1,
        round: state.round,
    })
}

/// `x ← x − lr·g`; moment fields are left untouched.
pub fn sgd_step(state: &LocalOptState, g: &ParamVector, lr: f64) -> Result<LocalOptState> {
    check_grad(state, g)?;
    let x = state.x.axpy(-lr, g)?;
    x.ensure_finite("parameters after SGD step")?;
    Ok(LocalOptState {
        x,
        local_step: state.local_step + 1,
        ..state.clone()
    })
}

fn draw_grad(
    oracle: &GradientOracle,
    x: &ParamVector,
    clip: Option<f64>,
    rng: &mut Stream,
) -> Result<ParamVector> {
    let g = oracle.stoch_grad(x, rng)?;
    match clip {
        Some(b) => clip_inf(&g, b),
        None => Ok(g),
    }
}

/// `k` AMSGrad steps on fresh stochastic gradients. When `record` is given,
/// one [`StepRecord`] per step is appended to it.
pub fn run_local_steps(
    state: LocalOptState,
    oracle: &GradientOracle,
    k: usize,
    hp: &HyperParams,
    rng: &mut Stream,
    mut record: Option<&mut Vec<StepRecord>>,
) -> Result<LocalOptState> {
    if k == 0 {
        return Err(FedError::InvalidParameter(
            "local interval must be at least 1".into(),
        ));
    }
    let mut state = state;
    for _ in 0..k {
        let g = draw_grad(oracle, &state.x, hp.g_inf_clip, rng)?;
        let next = amsgrad_step(&state, &g, hp)?;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(StepRecord {
                x_before: state.x.clone(),
                grad: g,
                m_before: state.m.clone(),
                m_after: next.m.clone(),
                v_hat_before: state.v_hat.clone(),
                v_hat_after: next.v_hat.clone(),
            });
        }
        state = next;
    }
    Ok(state)
}

/// `k` SGD steps on fresh stochastic gradients, clipped at `clip` if set.
pub fn run_local_sgd(
    state: LocalOptState,
    oracle: &GradientOracle,
    k: usize,
    lr: f64,
    clip: Option<f64>,
    rng: &mut Stream,
) -> Result<LocalOptState> {
    if k == 0 {
        return Err(FedError::InvalidParameter(
            "local interval must be at least 1".into(),
        ));
    }
    let mut state = state;
    for _ in 0..k {
        let g = draw_grad(oracle, &state.x, clip, rng)?;
        state = sgd_step(&state, &g, lr)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{Curvature, Model, QuadraticModel};
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn scalar_state(x: f64, m: f64, v: f64, v_hat: f64) -> LocalOptState {
        LocalOptState {
            x: ParamVector::new(vec![x]),
            m: ParamVector::new(vec![m]),
            v: ParamVector::new(vec![v]),
            v_hat: ParamVector::new(vec![v_hat]),
            local_step: 0,
            round: 0,
        }
    }

    /// Hand-written scalar AMSGrad, independent of the vector code path.
    fn scalar_reference(
        x: f64,
        m: f64,
        v: f64,
        v_hat: f64,
        g: f64,
        hp: &HyperParams,
    ) -> (f64, f64, f64, f64) {
        let m = hp.beta1 * m + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
        let v_hat = if v > v_hat { v } else { v_hat };
        (x - hp.alpha * m / v_hat.sqrt(), m, v, v_hat)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let hp = HyperParams::default();
        let s = LocalOptState::initial(ParamVector::new(vec![1.0, -2.0]), hp.epsilon);
        let next = amsgrad_step(&s, &ParamVector::zeros(2), &hp).unwrap();
        assert_eq!(next.x, s.x);
        assert_eq!(next.m, ParamVector::zeros(2));
        assert_eq!(next.v_hat, ParamVector::filled(2, hp.epsilon * hp.epsilon));
        assert_eq!(next.local_step, 1);
    }

    #[test]
    fn scalar_step_matches_hand_computation() {
        let hp = HyperParams {
            alpha: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 0.01,
            g_inf_clip: None,
        };
        let s = scalar_state(0.0, 0.0, 1e-4, 1e-4);
        let next = amsgrad_step(&s, &ParamVector::new(vec![1.0]), &hp).unwrap();
        // m' = 0.1, v' = 0.99e-4 + 0.01 = 0.010099, x' = -0.01/sqrt(0.010099)
        assert!((next.m[0] - 0.1).abs() < 1e-15);
        assert!((next.v[0] - 0.010099).abs() < 1e-15);
        assert!((next.v_hat[0] - 0.010099).abs() < 1e-15);
        assert!((next.x[0] - (-0.099_507_9)).abs() < 1e-6);
        let (x, m, v, vh) = scalar_reference(0.0, 0.0, 1e-4, 1e-4, 1.0, &hp);
        for (a, b) in [
            (next.x[0], x),
            (next.m[0], m),
            (next.v[0], v),
            (next.v_hat[0], vh),
        ] {
            assert!((a - b).abs() <= 1e-15 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn large_rate_with_tiny_epsilon_is_accepted() {
        let hp = HyperParams {
            alpha: 0.1,
            beta1: 0.9,
            beta2: 0.995,
            epsilon: 1e-8,
            g_inf_clip: None,
        };
        hp.validate().unwrap();
        let s = LocalOptState::initial(ParamVector::zeros(3), hp.epsilon);
        assert_eq!(s.v_hat[0], hp.epsilon * hp.epsilon);
        let next = amsgrad_step(&s, &ParamVector::new(vec![0.1, -0.2, 0.0]), &hp).unwrap();
        assert!(next.x.is_finite());
    }

    #[test]
    fn hyperparameter_ranges() {
        let ok = HyperParams::default();
        assert!(HyperParams { alpha: 0.0, ..ok }.validate().is_err());
        assert!(HyperParams { beta1: 1.0, ..ok }.validate().is_err());
        assert!(HyperParams { beta2: -0.1, ..ok }.validate().is_err());
        assert!(HyperParams { epsilon: 0.0, ..ok }.validate().is_err());
        assert!(HyperParams {
            epsilon: 1e-200,
            ..ok
        }
        .validate()
        .is_err());
        assert!(HyperParams {
            g_inf_clip: Some(0.0),
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn step_errors() {
        let hp = HyperParams::default();
        let s = LocalOptState::initial(ParamVector::zeros(2), hp.epsilon);
        assert!(matches!(
            amsgrad_step(&s, &ParamVector::zeros(3), &hp),
            Err(FedError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            amsgrad_step(&s, &ParamVector::new(vec![f64::INFINITY, 0.0]), &hp),
            Err(FedError::NonFinite(_))
        ));
    }

    #[test]
    fn sgd_cases() {
        let s = scalar_state(1.0, 0.3, 0.2, 0.2);
        let out = sgd_step(&s, &ParamVector::new(vec![2.0]), 0.5).unwrap();
        assert_eq!(out.x[0], 0.0);
        assert_eq!((out.m[0], out.v[0], out.v_hat[0]), (0.3, 0.2, 0.2));
        assert_eq!(sgd_step(&s, &ParamVector::zeros(1), 0.5).unwrap().x, s.x);
        let g = ParamVector::new(vec![0.25]);
        let mut t = s.clone();
        for _ in 0..8 {
            t = sgd_step(&t, &g, 0.5).unwrap();
        }
        assert!((t.x[0] - (1.0 - 8.0 * 0.5 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn normalized_sgd_degeneration() {
        // β₁ = β₂ = 0 and g² > v̂: x' = x − α·g/|g|
        let hp = HyperParams {
            alpha: 0.3,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.01,
            g_inf_clip: None,
        };
        let s = LocalOptState::initial(ParamVector::new(vec![1.0, 1.0]), hp.epsilon);
        let out = amsgrad_step(&s, &ParamVector::new(vec![2.5, -0.4]), &hp).unwrap();
        assert!((out.x[0] - 0.7).abs() < 1e-15);
        assert!((out.x[1] - 1.3).abs() < 1e-15);
    }

    fn quad_oracle(sigma: f64) -> GradientOracle {
        GradientOracle::new(
            0,
            Model::Quadratic(
                QuadraticModel::new(
                    Curvature::Diagonal(ParamVector::new(vec![1.0, 2.0, 0.5])),
                    ParamVector::new(vec![1.0, -1.0, 2.0]),
                    sigma,
                )
                .unwrap(),
            ),
        )
    }

    #[test]
    fn one_local_step_is_one_amsgrad_step() {
        let hp = HyperParams::default();
        let o = quad_oracle(0.0);
        let s = LocalOptState::initial(ParamVector::zeros(3), hp.epsilon);
        let mut rng = stream(1, Purpose::Aux, &[]);
        let via_loop = run_local_steps(s.clone(), &o, 1, &hp, &mut rng, None).unwrap();
        let g = o.full_grad(&s.x).unwrap();
        assert_eq!(via_loop, amsgrad_step(&s, &g, &hp).unwrap());
        assert!(run_local_steps(s, &o, 0, &hp, &mut rng, None).is_err());
    }

    #[test]
    fn local_steps_are_deterministic_per_stream() {
        let hp = HyperParams::default();
        let o = quad_oracle(0.7);
        let s = LocalOptState::initial(ParamVector::zeros(3), hp.epsilon);
        let a = run_local_steps(s.clone(), &o, 6, &hp, &mut stream(5, Purpose::Aux, &[]), None).unwrap();
        let b = run_local_steps(s, &o, 6, &hp, &mut stream(5, Purpose::Aux, &[]), None).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn clipped_trajectories_respect_bounds(
            grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..40),
            beta1 in 0.0f64..0.99,
            beta2 in 0.0f64..0.999,
        ) {
            let g_inf = 1.0;
            let hp = HyperParams { alpha: 0.05, beta1, beta2, epsilon: 0.1, g_inf_clip: Some(g_inf) };
            let tol = 1.0 + 4.0 * f64::EPSILON;
            let mut s = LocalOptState::initial(ParamVector::zeros(3), hp.epsilon);
            for g in grads {
                let g = clip_inf(&ParamVector::new(g), g_inf).unwrap();
                let next = amsgrad_step(&s, &g, &hp).unwrap();
                for j in 0..3 {
                    prop_assert!(next.v_hat[j] >= s.v_hat[j]);
                    prop_assert!(next.v_hat[j] >= hp.v_hat_floor());
                    prop_assert!(next.v_hat[j] <= g_inf * g_inf * tol);
                    prop_assert!(next.m[j].abs() <= g_inf * tol);
                    let eta = 1.0 / next.v_hat[j].sqrt();
                    prop_assert!(eta <= 1.0 / hp.epsilon * tol && eta * g_inf * tol >= 1.0);
                }
                s = next;
            }
        }
    }
}
