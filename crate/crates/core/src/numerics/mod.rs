//! Desk-scale models, losses and hand-written gradients.
//!
//! Everything here is a pure function of its inputs. The only randomness is
//! mini-batch sampling, which consumes an explicitly passed [`RandomStream`].

mod data;
mod model;

pub use data::{make_synthetic, DatasetShard, Synthetic, SyntheticTask};
pub use model::{accuracy, gradient, full_gradient, loss, Activation, BatchSize, ModelKind, ModelSpec, SgdConfig};

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(doc)]
use crate::rng::RandomStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: expected d = {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidShard(String),
    #[error("label {label} at row {row} is not valid for this model")]
    InvalidLabel { row: usize, label: f64 },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("step size must be positive, got {0}")]
    InvalidStep(f64),
}

/// Flat model coordinates. Carries models, gradients and deltas alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Largest absolute coordinate.
    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector, NumericsError> {
        check_len(self.len(), other.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector, NumericsError> {
        check_len(self.len(), other.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<(), NumericsError> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<(), NumericsError> {
    if expected == actual {
        Ok(())
    } else {
        Err(NumericsError::DimensionMismatch { expected, actual })
    }
}

/// One plain SGD step: `params - eta * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, eta: f64) -> Result<ParamVector, NumericsError> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(NumericsError::InvalidStep(eta));
    }
    check_len(params.len(), grad.len())?;
    Ok(ParamVector(params.iter().zip(grad.iter()).map(|(p, g)| p - eta * g).collect()))
}

/// Central differences of an arbitrary scalar function.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + h;
            let up = f(&probe);
            probe[j] = orig - h;
            let down = f(&probe);
            probe[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Full-batch central-difference gradient of [`loss`].
pub fn finite_diff_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    shard: &DatasetShard,
    h: f64,
) -> Result<ParamVector, NumericsError> {
    // surface dimension errors before probing
    loss(spec, params, shard)?;
    let mut failure = None;
    let g = central_difference(
        |x| match loss(spec, &ParamVector(x.to_vec()), shard) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        params,
        h,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(ParamVector(g)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_zero_gradient_is_fixed_point() {
        let p = ParamVector::new(vec![1.0, 1.0]);
        let out = sgd_step(&p, &ParamVector::zeros(2), 0.1).unwrap();
        assert_eq!(out.as_ref(), &[1.0, 1.0]);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let p = ParamVector::new(vec![1.0, 2.0]);
        let g = ParamVector::new(vec![10.0, -10.0]);
        let out = sgd_step(&p, &g, 0.1).unwrap();
        assert_eq!(out.as_ref(), &[0.0, 3.0]);
        assert_eq!(p.as_ref(), &[1.0, 2.0]);
    }

    #[test]
    fn sgd_step_stationary_for_any_eta() {
        let x_star = ParamVector::new(vec![0.3, -1.7, 4.0]);
        for eta in [1e-6, 0.1, 1.0, 50.0] {
            assert_eq!(sgd_step(&x_star, &ParamVector::zeros(3), eta).unwrap(), x_star);
        }
    }

    #[test]
    fn sgd_step_rejects_bad_input() {
        let p = ParamVector::zeros(2);
        assert!(matches!(
            sgd_step(&p, &ParamVector::zeros(3), 0.1),
            Err(NumericsError::DimensionMismatch { expected: 2, actual: 3 })
        ));
        assert!(matches!(sgd_step(&p, &p, 0.0), Err(NumericsError::InvalidStep(_))));
    }

    #[test]
    fn central_difference_on_square() {
        let g = central_difference(|x| x[0] * x[0], &[3.0], 1e-6);
        assert!((g[0] - 6.0).abs() <= 1e-6, "{}", g[0]);
    }
}
