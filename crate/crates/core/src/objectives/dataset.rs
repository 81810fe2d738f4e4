//! Labelled feature datasets for the sample-based objectives.
//!
//! Text format: one sample per line, the integer class label first and the
//! features after it, separated by commas and/or whitespace. Blank lines and
//! lines starting with `#` are skipped.

use std::io::BufRead;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_param, FedError, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(FedError::Dataset(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let width = features.first().map_or(0, Vec::len);
        if let Some((i, _)) = features.iter().enumerate().find(|(_, r)| r.len() != width) {
            return Err(FedError::Dataset(format!(
                "row {i} has a different feature count than row 0 ({width})"
            )));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FedError::NonFinite("dataset features"));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// ±1 regression/classification target: odd labels are positive.
    pub fn binary_target(&self, index: usize) -> f64 {
        if self.labels[index] % 2 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Gaussian blobs: class `c` has mean `μ_c ~ N(0, separation²·I)` and
    /// unit isotropic spread. Labels cycle through the classes.
    pub fn synthetic(
        n_samples: usize,
        n_features: usize,
        n_classes: usize,
        separation: f64,
        seed: u64,
    ) -> Result<Self> {
        ensure_param(n_classes >= 1 && n_features >= 1, || {
            "synthetic dataset needs at least one class and one feature".into()
        })?;
        let mut rng = stream(seed, Purpose::Problem, &[0xDA7A]);
        let means: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| {
                (0..n_features)
                    .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut features = Vec::with_capacity(n_samples);
        let mut labels = Vec::with_capacity(n_samples);
        for s in 0..n_samples {
            let c = s % n_classes;
            features.push(
                means[c]
                    .iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            labels.push(c);
        }
        Self::new(features, labels)
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| FedError::Dataset(format!("line {}: {e}", lineno + 1)))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = trimmed
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty());
            let label = fields
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| FedError::Dataset(format!("line {}: expected a class label", lineno + 1)))?;
            let row = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        FedError::Dataset(format!("line {}: bad feature value {f:?}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(label);
            features.push(row);
        }
        Self::new(features, labels)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|e| FedError::Dataset(format!("{}: {e}", path.display())))?;
        Self::parse(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_delimiters() {
        let text = "# header\n1, 0.5, -1\n\n0 2.0 3e-1\n";
        let ds = Dataset::parse(text.as_bytes()).unwrap();
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.features, vec![vec![0.5, -1.0], vec![2.0, 0.3]]);
        assert_eq!(ds.binary_target(0), 1.0);
        assert_eq!(ds.binary_target(1), -1.0);
    }

    #[test]
    fn rejects_ragged_or_malformed_rows() {
        assert!(Dataset::parse("1,0.5\n0,1,2\n".as_bytes()).is_err());
        assert!(Dataset::parse("x,0.5\n".as_bytes()).is_err());
        assert!(Dataset::parse("1,abc\n".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = Dataset::synthetic(50, 3, 4, 2.0, 9).unwrap();
        let b = Dataset::synthetic(50, 3, 4, 2.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_classes(), 4);
        assert_eq!(a.n_features(), 3);
    }
}
