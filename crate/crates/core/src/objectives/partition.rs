//! Label-skewed client partitions drawn from a symmetric Dirichlet.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{ensure_param, FedError, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Sample indices held by each client, in assignment order.
    pub assignment: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignment.iter().map(Vec::len).collect()
    }
}

fn dirichlet_draw(n: usize, alpha: f64, rng: &mut Stream) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| FedError::InvalidParameter(format!("dirichlet alpha {alpha}: {e}")))?;
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        // every gamma draw underflowed (tiny alpha): the limit is a vertex
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.random_range(0..n)] = 1.0;
    }
    Ok(p)
}

/// For each class (ascending label order) the class's indices are shuffled
/// and cut according to `p ~ Dir(alpha·1)`. Clients left empty afterwards
/// each take the last sample of the currently largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    rng: &mut Stream,
) -> Result<Partition> {
    ensure_param(n_clients >= 1, || "need at least one client".into())?;
    ensure_param(alpha > 0.0 && alpha.is_finite(), || {
        format!("dirichlet alpha must be positive, got {alpha}")
    })?;
    if labels.len() < n_clients {
        return Err(FedError::InvalidParameter(format!(
            "{} samples cannot cover {} clients",
            labels.len(),
            n_clients
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for mut members in by_class.into_iter().filter(|m| !m.is_empty()) {
        members.shuffle(rng);
        let p = dirichlet_draw(n_clients, alpha, rng)?;
        let n = members.len();
        let mut start = 0usize;
        let mut cum = 0.0;
        for (client, share) in p.iter().enumerate() {
            cum += share;
            let end = if client + 1 == n_clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            assignment[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }

    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..n_clients)
            .max_by_key(|&c| (assignment[c].len(), std::cmp::Reverse(c)))
            .expect("at least one client");
        let moved = assignment[largest].pop().expect("largest client is nonempty");
        assignment[empty].push(moved);
    }

    Ok(Partition { assignment, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn labels(n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7) % classes).collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let mut rng = stream(1, Purpose::Partition, &[]);
        let p = dirichlet_partition(&labels(40, 4), 1, 0.5, &mut rng).unwrap();
        let mut all = p.assignment[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn no_empty_clients_even_when_skewed() {
        for seed in 0..20 {
            let mut rng = stream(seed, Purpose::Partition, &[]);
            let p = dirichlet_partition(&labels(30, 3), 25, 0.05, &mut rng).unwrap();
            assert!(p.sizes().iter().all(|&s| s >= 1), "seed {seed}: {:?}", p.sizes());
            assert_eq!(p.sizes().iter().sum::<usize>(), 30);
        }
    }

    #[test]
    fn errors() {
        let mut rng = stream(1, Purpose::Partition, &[]);
        assert!(dirichlet_partition(&labels(3, 2), 4, 0.5, &mut rng).is_err());
        assert!(dirichlet_partition(&labels(10, 2), 2, 0.0, &mut rng).is_err());
        assert!(dirichlet_partition(&labels(10, 2), 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn same_stream_same_partition() {
        let l = labels(500, 10);
        let a = dirichlet_partition(&l, 100, 0.3, &mut stream(4, Purpose::Partition, &[])).unwrap();
        let b = dirichlet_partition(&l, 100, 0.3, &mut stream(4, Purpose::Partition, &[])).unwrap();
        assert_eq!(a, b);
    }
}
