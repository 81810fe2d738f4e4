//! Flat parameter vectors and the elementwise arithmetic the optimizer and
//! server are built from.
//!
//! Every binary operation checks lengths and returns
//! [`FedError::DimensionMismatch`] instead of panicking. Reductions over
//! several vectors ([`mean_of`], [`max_of`]) sum strictly in input order so
//! repeated calls are bit-identical.

use std::ops::Index;

use crate::error::{FedError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

/// ℓ1, squared ℓ2 and ℓ∞ norms of a vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l1: f64,
    pub l2_sq: f64,
    pub inf: f64,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(FedError::NonFinite(what))
        }
    }

    pub fn ensure_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(FedError::DimensionMismatch {
                expected,
                found: self.dim(),
            })
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        other.ensure_dim(self.dim())?;
        Ok(Self(
            self.0
                .iter()
                .zip(other.0.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// `self + factor * other`
    pub fn axpy(&self, factor: f64, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + factor * b)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        other.ensure_dim(self.dim())?;
        Ok(self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn min_value(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn norms(&self) -> Norms {
        norms(self)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        other.ensure_dim(self.dim())?;
        Ok(self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

pub fn hadamard(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    a.zip_map(b, |x, y| x * y)
}

pub fn elementwise_max(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    a.zip_map(b, f64::max)
}

/// `1/√a` coordinatewise. Every entry must be strictly positive.
pub fn inv_sqrt(a: &ParamVector) -> Result<ParamVector> {
    if let Some((j, v)) = a.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(FedError::Domain(format!(
            "inv_sqrt requires positive entries, coordinate {j} is {v}"
        )));
    }
    Ok(a.map(|v| 1.0 / v.sqrt()))
}

pub fn norms(a: &ParamVector) -> Norms {
    a.iter().fold(
        Norms {
            l1: 0.0,
            l2_sq: 0.0,
            inf: 0.0,
        },
        |acc, &v| Norms {
            l1: acc.l1 + v.abs(),
            l2_sq: acc.l2_sq + v * v,
            inf: acc.inf.max(v.abs()),
        },
    )
}

/// Coordinatewise mean, summed left to right in input order.
pub fn mean_of<'a, I>(vectors: I) -> Result<ParamVector>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(FedError::Empty("mean_of"))?;
    let mut acc = first.0.clone();
    let mut count = 1usize;
    for v in iter {
        v.ensure_dim(acc.len())?;
        for (a, b) in acc.iter_mut().zip(v.iter()) {
            *a += b;
        }
        count += 1;
    }
    let n = count as f64;
    Ok(ParamVector(acc.into_iter().map(|s| s / n).collect()))
}

/// Coordinatewise maximum over a nonempty sequence.
pub fn max_of<'a, I>(vectors: I) -> Result<ParamVector>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(FedError::Empty("max_of"))?;
    let mut acc = first.clone();
    for v in iter {
        acc = elementwise_max(&acc, v)?;
    }
    Ok(acc)
}

/// Clamp every coordinate into `[-bound, bound]`.
pub fn clip_inf(g: &ParamVector, bound: f64) -> Result<ParamVector> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(FedError::InvalidParameter(format!(
            "clip bound must be positive and finite, got {bound}"
        )));
    }
    Ok(g.map(|v| v.clamp(-bound, bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn hadamard_cases() {
        assert_eq!(hadamard(&pv(&[1., 2.]), &pv(&[3., 4.])).unwrap(), pv(&[3., 8.]));
        let a = pv(&[0.5, -2.0, 7.0]);
        assert_eq!(hadamard(&a, &ParamVector::filled(3, 1.0)).unwrap(), a);
        assert_eq!(
            hadamard(&a, &ParamVector::zeros(3)).unwrap(),
            ParamVector::zeros(3)
        );
        assert!(matches!(
            hadamard(&a, &pv(&[1.0])),
            Err(FedError::DimensionMismatch {
                expected: 3,
                found: 1
            })
        ));
    }

    #[test]
    fn max_cases() {
        assert_eq!(
            elementwise_max(&pv(&[1., 4.]), &pv(&[9., 2.])).unwrap(),
            pv(&[9., 4.])
        );
        let a = pv(&[3., -1.]);
        assert_eq!(elementwise_max(&a, &a).unwrap(), a);
        let eps_sq = 1e-4;
        let out = elementwise_max(&ParamVector::filled(2, eps_sq), &pv(&[0.0, 0.3])).unwrap();
        assert!(out.iter().all(|&v| v >= eps_sq));
        assert!(elementwise_max(&a, &pv(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn inv_sqrt_cases() {
        assert_eq!(inv_sqrt(&pv(&[4., 16.])).unwrap(), pv(&[0.5, 0.25]));
        assert_eq!(inv_sqrt(&pv(&[1.])).unwrap(), pv(&[1.]));
        let eps: f64 = 0.01;
        let out = inv_sqrt(&pv(&[eps * eps])).unwrap();
        assert!((out[0] - 1.0 / eps).abs() < 1e-12);
        assert!(matches!(inv_sqrt(&pv(&[1.0, 0.0])), Err(FedError::Domain(_))));
        assert!(inv_sqrt(&pv(&[-1.0])).is_err());
        assert!(inv_sqrt(&pv(&[f64::NAN])).is_err());
    }

    #[test]
    fn norms_cases() {
        assert_eq!(
            norms(&pv(&[3., -4.])),
            Norms {
                l1: 7.,
                l2_sq: 25.,
                inf: 4.
            }
        );
        assert_eq!(
            norms(&ParamVector::zeros(4)),
            Norms {
                l1: 0.,
                l2_sq: 0.,
                inf: 0.
            }
        );
        let c = -2.5;
        assert_eq!(
            norms(&pv(&[c])),
            Norms {
                l1: 2.5,
                l2_sq: 6.25,
                inf: 2.5
            }
        );
    }

    #[test]
    fn mean_cases() {
        assert_eq!(mean_of([&pv(&[1., 2.]), &pv(&[3., 4.])]).unwrap(), pv(&[2., 3.]));
        let a = pv(&[0.1, 0.7, -3.0]);
        assert_eq!(mean_of([&a]).unwrap(), a);
        let copies = vec![a.clone(); 5];
        assert!(mean_of(&copies).unwrap().max_abs_diff(&a).unwrap() < 1e-15);
        assert!(matches!(mean_of(std::iter::empty()), Err(FedError::Empty(_))));
        assert!(mean_of([&a, &pv(&[1.0])]).is_err());
    }

    #[test]
    fn clip_cases() {
        assert_eq!(clip_inf(&pv(&[5., -0.5]), 1.0).unwrap(), pv(&[1., -0.5]));
        let g = pv(&[0.3, -0.9]);
        assert_eq!(clip_inf(&g, 1.0).unwrap(), g);
        assert_eq!(
            clip_inf(&ParamVector::zeros(3), 2.0).unwrap(),
            ParamVector::zeros(3)
        );
        assert!(clip_inf(&g, 0.0).is_err());
        assert!(clip_inf(&g, -1.0).is_err());
    }

    fn vec_pair(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-1e3f64..1e3, len),
            prop::collection::vec(-1e3f64..1e3, len),
        )
    }

    proptest! {
        #[test]
        fn max_dominates_first_argument((a, b) in (1usize..16).prop_flat_map(vec_pair)) {
            let (a, b) = (pv(&a), pv(&b));
            let out = elementwise_max(&a, &b).unwrap();
            for j in 0..a.dim() {
                prop_assert!(out[j] >= a[j] && out[j] >= b[j]);
            }
        }

        #[test]
        fn inv_sqrt_of_floored_max_is_finite(
            v in prop::collection::vec(0.0f64..1e6, 1..16),
            eps in 1e-8f64..1.0,
        ) {
            let floor = ParamVector::filled(v.len(), eps * eps);
            let out = inv_sqrt(&elementwise_max(&floor, &pv(&v)).unwrap()).unwrap();
            prop_assert!(out.is_finite());
            prop_assert!(out.iter().all(|&e| e <= 1.0 / eps * (1.0 + 1e-12)));
        }

        #[test]
        fn mean_is_bit_reproducible(vs in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 4), 1..10)) {
            let vs: Vec<ParamVector> = vs.into_iter().map(ParamVector::new).collect();
            let a = mean_of(&vs).unwrap();
            let b = mean_of(&vs).unwrap();
            prop_assert_eq!(a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn clip_bounds_inf_norm(v in prop::collection::vec(-1e3f64..1e3, 1..16), bound in 1e-3f64..10.0) {
            let out = clip_inf(&pv(&v), bound).unwrap();
            prop_assert!(norms(&out).inf <= bound);
        }
    }
}
