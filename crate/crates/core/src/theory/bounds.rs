//! Non-convex stationarity bounds for the fixed- and growing-interval
//! analyses, and the constants of the linear-speedup form.

use crate::error::{ensure_param, FedError, Result};
use crate::federation::IntervalSchedule;

/// Problem and run constants entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryInputs {
    /// Smoothness `L`.
    pub smoothness: f64,
    /// Gradient-noise standard deviation `σ`.
    pub sigma: f64,
    /// Gradient bound `G∞`.
    pub g_inf: f64,
    pub epsilon: f64,
    pub dim: usize,
    pub beta1: f64,
    pub n_clients: usize,
    /// Fixed local interval `K` (unused by the growing-interval bound).
    pub local_steps: usize,
    pub rounds: usize,
    pub alpha: f64,
    /// `f(Z₁) − f*`.
    pub f_gap: f64,
}

impl TheoryInputs {
    /// Largest learning rate the bounds admit, `3ε/(20L)`.
    pub fn alpha_cap(&self) -> f64 {
        3.0 * self.epsilon / (20.0 * self.smoothness)
    }

    fn validate_constants(&self) -> Result<()> {
        let finite = [
            self.smoothness,
            self.sigma,
            self.g_inf,
            self.epsilon,
            self.beta1,
            self.f_gap,
        ]
        .iter()
        .all(|v| v.is_finite());
        ensure_param(finite, || "theory inputs must be finite".into())?;
        ensure_param(self.smoothness > 0.0, || "L must be positive".into())?;
        ensure_param(self.sigma >= 0.0, || "sigma must be non-negative".into())?;
        ensure_param(self.epsilon > 0.0, || "epsilon must be positive".into())?;
        ensure_param((0.0..1.0).contains(&self.beta1), || {
            "beta1 must lie in [0, 1)".into()
        })?;
        ensure_param(self.dim >= 1 && self.n_clients >= 1 && self.rounds >= 1, || {
            "d, N and T must be at least 1".into()
        })?;
        ensure_param(self.f_gap >= 0.0, || "f_gap must be non-negative".into())?;
        if self.epsilon > self.g_inf {
            return Err(FedError::Constraint(format!(
                "epsilon = {} exceeds G_inf = {}; the bounds need epsilon <= G_inf",
                self.epsilon, self.g_inf
            )));
        }
        Ok(())
    }

    fn check_alpha(&self, alpha: f64) -> Result<()> {
        ensure_param(alpha > 0.0 && alpha.is_finite(), || {
            "alpha must be positive".into()
        })?;
        let cap = self.alpha_cap();
        if alpha > cap {
            return Err(FedError::Constraint(format!(
                "alpha = {alpha} exceeds 3*epsilon/(20L) = {cap} (epsilon = {}, L = {})",
                self.epsilon, self.smoothness
            )));
        }
        Ok(())
    }

    /// Checks every precondition of the fixed-interval bound.
    pub fn validate(&self) -> Result<()> {
        self.validate_constants()?;
        ensure_param(self.local_steps >= 1, || "K must be at least 1".into())?;
        self.check_alpha(self.alpha)
    }
}

/// Fixed-interval bound on `(1/KT) Σ E‖∇f(Z)‖²`, split into its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedIntervalBound {
    /// `2G∞ f_gap / (αKT)`.
    pub gap: f64,
    /// Group proportional to `α²`.
    pub lr_sq: f64,
    /// Group proportional to `1/T`.
    pub inv_rounds: f64,
    /// Group proportional to `αN/T`.
    pub alpha_n_over_rounds: f64,
    /// Noise group, proportional to `α/N`.
    pub noise: f64,
    pub total: f64,
}

struct Shared {
    g: f64,
    g2: f64,
    l: f64,
    d: f64,
    b: f64,
    e: f64,
    spread: f64,
}

impl Shared {
    fn new(p: &TheoryInputs) -> Self {
        let g2 = p.g_inf * p.g_inf;
        Self {
            g: p.g_inf,
            g2,
            l: p.smoothness,
            d: p.dim as f64,
            b: p.beta1,
            e: p.epsilon,
            spread: g2 - p.epsilon * p.epsilon,
        }
    }

    /// `2L²β₁²G∞²d / ((1−β₁)²ε⁴)`.
    fn momentum_drift(&self) -> f64 {
        2.0 * self.l.powi(2) * self.b.powi(2) * self.g2 * self.d / ((1.0 - self.b).powi(2) * self.e.powi(4))
    }

    /// `L²G∞²/ε⁴`, the coefficient of the `K²` client-drift term.
    fn client_drift(&self) -> f64 {
        self.l.powi(2) * self.g2 / self.e.powi(4)
    }

    /// `(2−β₁)G∞²d(G∞²−ε²) / ((1−β₁)ε³)`, the coefficient of `K` in the `1/T` group.
    fn lr_change_per_step(&self) -> f64 {
        (2.0 - self.b) * self.g2 * self.d * self.spread / ((1.0 - self.b) * self.e.powi(3))
    }

    /// `3d(G∞²−ε²)G∞² / (2ε³(1−β₁))`.
    fn lr_change_fixed(&self) -> f64 {
        3.0 * self.d * self.spread * self.g2 / (2.0 * self.e.powi(3) * (1.0 - self.b))
    }

    /// `5LG∞²d(G∞²−ε²)² / (8ε⁶(1−β₁)²) · (2β₁² + (1−β₁)²)`.
    fn second_order_fixed(&self) -> f64 {
        5.0 * self.l * self.g2 * self.d * self.spread.powi(2)
            / (8.0 * self.e.powi(6) * (1.0 - self.b).powi(2))
            * (2.0 * self.b.powi(2) + (1.0 - self.b).powi(2))
    }

    /// `5LG∞²d²(G∞²−ε²)² / (2ε⁶)`, the coefficient of `K`.
    fn second_order_per_step(&self) -> f64 {
        5.0 * self.l * self.g2 * self.d.powi(2) * self.spread.powi(2) / (2.0 * self.e.powi(6))
    }

    /// `5Ldσ² / (4ε²)`.
    fn noise(&self, sigma: f64) -> f64 {
        5.0 * self.l * self.d * sigma * sigma / (4.0 * self.e.powi(2))
    }
}

/// Evaluates the fixed-interval bound with the `1/T` and `αN/T` groups in
/// the form stated with the main result.
pub fn fixed_interval_bound(p: &TheoryInputs) -> Result<FixedIntervalBound> {
    p.validate()?;
    let s = Shared::new(p);
    let two_g = 2.0 * s.g;
    let k = p.local_steps as f64;
    let t = p.rounds as f64;
    let n = p.n_clients as f64;
    let a = p.alpha;

    let gap = two_g * p.f_gap / (a * k * t);
    let lr_sq = two_g
        * (s.momentum_drift() + k * k * s.client_drift() * (1.0 + 4.0 * k * k * (1.0 - s.b).powi(2) * s.d))
        * a
        * a;
    let inv_rounds = two_g * (k * s.lr_change_per_step() + s.lr_change_fixed()) / t;
    let alpha_n_over_rounds = two_g * (s.second_order_fixed() + k * s.second_order_per_step()) * a * n / t;
    let noise = two_g * s.noise(p.sigma) * a / n;
    let total = gap + lr_sq + inv_rounds + alpha_n_over_rounds + noise;
    if !total.is_finite() {
        return Err(FedError::NonFinite("fixed-interval bound"));
    }
    Ok(FixedIntervalBound {
        gap,
        lr_sq,
        inv_rounds,
        alpha_n_over_rounds,
        noise,
        total,
    })
}

/// Constants of `C₁/√(NKT) + C₂N/(KT) + C₃/(KT) + C₄(N/(KT))^{3/2}`, the
/// fixed-interval bound at `α = √(N/(KT))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl SpeedupConstants {
    pub fn new(p: &TheoryInputs) -> Result<Self> {
        p.validate_constants()?;
        ensure_param(p.local_steps >= 1, || "K must be at least 1".into())?;
        let s = Shared::new(p);
        let two_g = 2.0 * s.g;
        let k = p.local_steps as f64;
        Ok(Self {
            c1: two_g * (p.f_gap + s.noise(p.sigma)),
            c2: two_g
                * (s.momentum_drift()
                    + k * k * s.client_drift() * (1.0 + 4.0 * k * k * (1.0 - s.b).powi(2) * s.d)),
            c3: two_g * (k * s.lr_change_per_step() + s.lr_change_fixed()),
            c4: two_g * (s.second_order_fixed() + k * s.second_order_per_step()),
        })
    }

    /// Bound value for `n` clients after `iterations = KT` local steps.
    pub fn evaluate(&self, n: usize, iterations: f64) -> f64 {
        let n = n as f64;
        let r = n / iterations;
        self.c1 / (n * iterations).sqrt() + self.c2 * r + self.c3 / iterations + self.c4 * r.powf(1.5)
    }
}

/// Growing-interval bound on the `K_t`-weighted stationarity average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowingIntervalBound {
    /// `S = Σ_t K_t`.
    pub total_iterations: usize,
    /// `K_{T−1}`.
    pub last_interval: usize,
    /// `min(√(N/S), 3ε/(20L))`.
    pub alpha: f64,
    /// Whether `alpha` was capped by `3ε/(20L)`.
    pub alpha_capped: bool,
    /// Gap and noise terms; `C₁/√(NS)` when uncapped.
    pub leading: f64,
    pub lr_sq: f64,
    pub inv_iterations: f64,
    pub alpha_n_over_iterations: f64,
    pub total: f64,
}

/// Evaluates the growing-interval bound. `p.alpha` and `p.local_steps` are
/// ignored: the interval comes from `schedule`, and the learning rate is
/// `min(√(N/S), 3ε/(20L))`. With that rate uncapped this is
/// `C₁/√(NS) + (N/S)(C₂₁ + C₂₂K² + C₂₃K⁴) + (C₃₁K + C₃₂)/S + (N/S)^{3/2}(C₄₁ + C₄₂K)`
/// with `K = K_{T−1}`; when capped, the same terms at the capped rate.
pub fn growing_interval_bound(p: &TheoryInputs, schedule: &IntervalSchedule) -> Result<GrowingIntervalBound> {
    p.validate_constants()?;
    schedule.validate()?;
    let total = schedule.total_iterations(p.rounds);
    let last = schedule.interval(p.rounds - 1);
    let n = p.n_clients as f64;
    let big_s = total as f64;
    let k = last as f64;
    let uncapped = (n / big_s).sqrt();
    let cap = p.alpha_cap();
    let alpha = uncapped.min(cap);
    p.check_alpha(alpha)?;

    let s = Shared::new(p);
    let two_g = 2.0 * s.g;
    let c21 = two_g * s.momentum_drift();
    let c22 = two_g * s.client_drift();
    let c23 = two_g * s.client_drift() * 4.0 * (1.0 - s.b).powi(2) * s.d;
    let c31 = two_g * s.lr_change_per_step();
    let c32 = two_g * s.lr_change_fixed();
    let c41 = two_g * s.second_order_fixed();
    let c42 = two_g * s.second_order_per_step();

    let leading = two_g * p.f_gap / (alpha * big_s) + two_g * s.noise(p.sigma) * alpha / n;
    let lr_sq = (c21 + c22 * k * k + c23 * k.powi(4)) * alpha * alpha;
    let inv_iterations = (c31 * k + c32) / big_s;
    let alpha_n_over_iterations = (c41 + c42 * k) * alpha * n / big_s;
    let sum = leading + lr_sq + inv_iterations + alpha_n_over_iterations;
    if !sum.is_finite() {
        return Err(FedError::NonFinite("growing-interval bound"));
    }
    Ok(GrowingIntervalBound {
        total_iterations: total,
        last_interval: last,
        alpha,
        alpha_capped: cap < uncapped,
        leading,
        lr_sq,
        inv_iterations,
        alpha_n_over_iterations,
        total: sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> TheoryInputs {
        TheoryInputs {
            smoothness: 1.0,
            sigma: 1.0,
            g_inf: 1.0,
            epsilon: 0.5,
            dim: 10,
            beta1: 0.9,
            n_clients: 4,
            local_steps: 5,
            rounds: 1000,
            alpha: 0.01,
            f_gap: 2.0,
        }
    }

    #[test]
    fn alpha_at_cap_is_accepted_and_above_rejected() {
        let mut p = inputs();
        p.alpha = 3.0 * p.epsilon / (20.0 * p.smoothness);
        assert!(fixed_interval_bound(&p).is_ok());
        p.alpha *= 1.0 + 1e-9;
        match fixed_interval_bound(&p) {
            Err(FedError::Constraint(msg)) => assert!(msg.contains("3*epsilon/(20L)")),
            other => panic!("expected constraint error, got {other:?}"),
        }
    }

    #[test]
    fn epsilon_above_gradient_bound_is_rejected() {
        let mut p = inputs();
        p.epsilon = 2.0;
        assert!(matches!(fixed_interval_bound(&p), Err(FedError::Constraint(_))));
    }

    #[test]
    fn terms_sum_to_total() {
        let b = fixed_interval_bound(&inputs()).unwrap();
        let sum = b.gap + b.lr_sq + b.inv_rounds + b.alpha_n_over_rounds + b.noise;
        assert!((sum - b.total).abs() <= 1e-12 * b.total);
        assert!(b.gap > 0.0 && b.noise > 0.0);
    }

    #[test]
    fn gap_and_noise_scale_as_inverse_sqrt_at_speedup_rate() {
        let mut p = inputs();
        p.epsilon = 1.0;
        p.g_inf = 1.0;
        p.rounds = 1_000_000;
        let kt = (p.local_steps * p.rounds) as f64;
        let leading = |p: &TheoryInputs| {
            let mut q = *p;
            q.alpha = (q.n_clients as f64 / (q.local_steps * q.rounds) as f64).sqrt();
            let b = fixed_interval_bound(&q).unwrap();
            b.gap + b.noise
        };
        let c = SpeedupConstants::new(&p).unwrap();
        let lead = leading(&p);
        let expect = c.c1 / (p.n_clients as f64 * kt).sqrt();
        assert!((lead - expect).abs() <= 1e-12 * expect);
        let mut q = p;
        q.n_clients *= 4;
        assert!((leading(&q) / lead - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fixed_schedule_reduces_to_speedup_constants() {
        let mut p = inputs();
        p.rounds = 10_000_000;
        let sched = IntervalSchedule::Fixed(p.local_steps);
        let b = growing_interval_bound(&p, &sched).unwrap();
        assert!(!b.alpha_capped);
        let c = SpeedupConstants::new(&p).unwrap();
        let iters = (p.local_steps * p.rounds) as f64;
        let expect = c.evaluate(p.n_clients, iters);
        assert!(
            (b.total - expect).abs() <= 1e-10 * expect,
            "{} vs {}",
            b.total,
            expect
        );
        assert!((b.leading - c.c1 / (p.n_clients as f64 * iters).sqrt()).abs() <= 1e-12 * b.leading);
    }

    #[test]
    fn capped_rate_is_reported() {
        let mut p = inputs();
        p.rounds = 2;
        let b = growing_interval_bound(&p, &IntervalSchedule::Fixed(1)).unwrap();
        assert!(b.alpha_capped);
        assert_eq!(b.alpha, p.alpha_cap());
    }
}
