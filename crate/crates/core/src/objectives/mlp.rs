//! One-hidden-layer tanh network with squared loss and hand-written backprop.
//!
//! Flat parameter layout for `p` inputs and `h` hidden units:
//! `W1` (h×p, row-major) | `b1` (h) | `w2` (h) | `b2` (1).

pub const MAX_HIDDEN: usize = 16;

pub fn dim(n_features: usize, hidden: usize) -> usize {
    hidden * n_features + 2 * hidden + 1
}

struct Layout {
    p: usize,
    h: usize,
}

impl Layout {
    fn b1(&self) -> usize {
        self.h * self.p
    }
    fn w2(&self) -> usize {
        self.b1() + self.h
    }
    fn b2(&self) -> usize {
        self.w2() + self.h
    }
}

fn forward(theta: &[f64], z: &[f64], lay: &Layout, hidden: &mut [f64]) -> f64 {
    let mut out = theta[lay.b2()];
    for u in 0..lay.h {
        let row = &theta[u * lay.p..(u + 1) * lay.p];
        let pre = row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + theta[lay.b1() + u];
        hidden[u] = pre.tanh();
        out += theta[lay.w2() + u] * hidden[u];
    }
    out
}

pub fn sample_loss(theta: &[f64], z: &[f64], y: f64, hidden_units: usize) -> f64 {
    let lay = Layout {
        p: z.len(),
        h: hidden_units,
    };
    let mut hidden = [0.0; MAX_HIDDEN];
    let r = forward(theta, z, &lay, &mut hidden[..lay.h]) - y;
    0.5 * r * r
}

pub fn accumulate_grad(theta: &[f64], z: &[f64], y: f64, hidden_units: usize, acc: &mut [f64]) {
    let lay = Layout {
        p: z.len(),
        h: hidden_units,
    };
    let mut hidden = [0.0; MAX_HIDDEN];
    let hidden = &mut hidden[..lay.h];
    let delta = forward(theta, z, &lay, hidden) - y;
    acc[lay.b2()] += delta;
    for u in 0..lay.h {
        acc[lay.w2() + u] += delta * hidden[u];
        let da = delta * theta[lay.w2() + u] * (1.0 - hidden[u] * hidden[u]);
        acc[lay.b1() + u] += da;
        for (j, zj) in z.iter().enumerate() {
            acc[u * lay.p + j] += da * zj;
        }
    }
}
