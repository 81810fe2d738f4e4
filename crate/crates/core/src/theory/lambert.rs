//! Principal branch of the Lambert W function and the iteration count it
//! yields for a log-growing local interval.

use crate::error::{FedError, Result};

const MAX_ITER: usize = 100;
const REL_TOL: f64 = 1e-12;

/// `W₀(x)` for `x ≥ 0`, by Newton iteration started at `ln(1 + x)`.
///
/// For `x > e` the iteration runs on `w + ln w = ln x`, which has the same
/// root but never evaluates `e^w`, so it stays finite up to `f64::MAX`.
pub fn lambert_w0(x: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(FedError::Domain(format!(
            "lambert_w0 is evaluated for finite x >= 0 only, got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let mut w = x.ln_1p();
    let log_form = x > std::f64::consts::E;
    let ln_x = x.ln();
    for _ in 0..MAX_ITER {
        let step = if log_form {
            (w + w.ln() - ln_x) / (1.0 + 1.0 / w)
        } else {
            let ew = w.exp();
            (w * ew - x) / ((w + 1.0) * ew)
        };
        w -= step;
        if step.abs() <= REL_TOL * w.abs() * 0.5 {
            return Ok(w);
        }
    }
    Err(FedError::Domain(format!(
        "lambert_w0({x}) did not converge in {MAX_ITER} iterations"
    )))
}

/// Iterations needed for an `eps_target`-accurate solution with `n_clients`
/// clients and `K_t = log t`: `1 / (N ε² W(1/(N ε²)))`.
pub fn rounds_to_epsilon(n_clients: usize, eps_target: f64) -> Result<f64> {
    if n_clients == 0 || !(eps_target > 0.0) {
        return Err(FedError::InvalidParameter(format!(
            "need N >= 1 and a positive target, got N={n_clients}, eps={eps_target}"
        )));
    }
    let a = 1.0 / (n_clients as f64 * eps_target * eps_target);
    Ok(a / lambert_w0(a)?)
}

/// Communication complexity `N ×` iterations, i.e. `1 / (ε² W(1/(N ε²)))`.
pub fn communication_complexity(n_clients: usize, eps_target: f64) -> Result<f64> {
    Ok(n_clients as f64 * rounds_to_epsilon(n_clients, eps_target)?)
}
