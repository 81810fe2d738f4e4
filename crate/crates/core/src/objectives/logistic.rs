//! L2-regularised logistic regression with a trailing bias weight.
//!
//! Parameters are `[w_1 .. w_p, bias]`; targets are ±1.

pub fn dim(n_features: usize) -> usize {
    n_features + 1
}

fn margin(w: &[f64], z: &[f64]) -> f64 {
    let p = z.len();
    w[..p].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[p]
}

/// `ln(1 + e^{-t})` without overflow.
fn softplus_neg(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn sample_loss(w: &[f64], z: &[f64], y: f64) -> f64 {
    softplus_neg(y * margin(w, z))
}

/// Adds the gradient of one sample's loss into `acc`.
pub fn accumulate_grad(w: &[f64], z: &[f64], y: f64, acc: &mut [f64]) {
    let p = z.len();
    // d/dm ln(1+e^{-y m}) = -y σ(-y m)
    let coef = -y * sigmoid(-y * margin(w, z));
    for j in 0..p {
        acc[j] += coef * z[j];
    }
    acc[p] += coef;
}

pub fn regulariser(w: &[f64], l2: f64) -> f64 {
    let p = w.len() - 1;
    0.5 * l2 * w[..p].iter().map(|v| v * v).sum::<f64>()
}

pub fn add_regulariser_grad(w: &[f64], l2: f64, acc: &mut [f64]) {
    let p = w.len() - 1;
    for j in 0..p {
        acc[j] += l2 * w[j];
    }
}
