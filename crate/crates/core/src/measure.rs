//! Probability vectors on a finite state space.

use nalgebra::DVector;
use thiserror::Error;

/// Tolerance on `|Σ weights − 1|` accepted by [`ProbMeasure::new`].
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasureError {
    #[error("measure is empty")]
    Empty,
    #[error("weight {value} at state {index} is negative or non-finite")]
    BadWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("cannot normalize a measure with zero total mass")]
    ZeroMass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbMeasure(DVector<f64>);

impl ProbMeasure {
    /// Requires nonnegative weights summing to one within [`MASS_TOL`].
    pub fn new(weights: DVector<f64>) -> Result<Self, MeasureError> {
        if weights.is_empty() {
            return Err(MeasureError::Empty);
        }
        if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
            return Err(MeasureError::BadWeight { index, value });
        }
        let sum = weights.sum();
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(MeasureError::NotNormalized { sum });
        }
        Ok(ProbMeasure(weights))
    }

    pub fn from_slice(weights: &[f64]) -> Result<Self, MeasureError> {
        Self::new(DVector::from_column_slice(weights))
    }

    /// Divides nonnegative weights by their total mass.
    pub fn normalized(weights: DVector<f64>) -> Result<Self, MeasureError> {
        if weights.is_empty() {
            return Err(MeasureError::Empty);
        }
        if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
            return Err(MeasureError::BadWeight { index, value });
        }
        let sum = weights.sum();
        if sum <= 0.0 {
            return Err(MeasureError::ZeroMass);
        }
        Ok(ProbMeasure(weights / sum))
    }

    pub fn uniform(d: usize) -> Self {
        ProbMeasure(DVector::from_element(d, 1.0 / d as f64))
    }

    pub fn dirac(d: usize, i: usize) -> Self {
        let mut w = DVector::zeros(d);
        w[i] = 1.0;
        ProbMeasure(w)
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_weights(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `μ(f)`.
    pub fn integrate(&self, f: &DVector<f64>) -> f64 {
        self.0.dot(f)
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|&w| w > 0.0)
    }

    /// Indices with positive weight.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.0[i] > 0.0).collect()
    }

    pub fn tv_distance(&self, other: &ProbMeasure) -> f64 {
        tv_distance(&self.0, &other.0)
    }
}

/// Total variation distance `½ Σ|p − q|`.
pub fn tv_distance(p: &DVector<f64>, q: &DVector<f64>) -> f64 {
    0.5 * p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `softmax(θ)`, computed after subtracting `max θ`.
pub fn softmax(theta: &DVector<f64>) -> DVector<f64> {
    let m = theta.max();
    let e = theta.map(|t| (t - m).exp());
    let s = e.sum();
    e / s
}

/// Pulls a gradient with respect to `p = softmax(θ)` back to `θ`.
pub fn softmax_pullback(p: &DVector<f64>, grad_p: &DVector<f64>) -> DVector<f64> {
    let mean = p.dot(grad_p);
    DVector::from_fn(p.len(), |k, _| p[k] * (grad_p[k] - mean))
}

/// Pairwise (cascade) summation; order-deterministic.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_weights() {
        assert!(matches!(ProbMeasure::from_slice(&[0.5, -0.1, 0.6]), Err(MeasureError::BadWeight { index: 1, .. })));
        assert!(matches!(ProbMeasure::from_slice(&[0.5, 0.4]), Err(MeasureError::NotNormalized { .. })));
        assert_eq!(ProbMeasure::from_slice(&[]), Err(MeasureError::Empty));
        assert_eq!(ProbMeasure::normalized(DVector::zeros(3)), Err(MeasureError::ZeroMass));
    }

    #[test]
    fn tv_of_disjoint_diracs_is_one() {
        let a = ProbMeasure::dirac(3, 0);
        let b = ProbMeasure::dirac(3, 2);
        assert_eq!(a.tv_distance(&b), 1.0);
        assert_eq!(a.tv_distance(&a), 0.0);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let t = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let p = softmax(&t);
        let q = softmax(&t.add_scalar(700.0));
        assert!((p.sum() - 1.0).abs() < 1e-15);
        assert!((p - q).amax() < 1e-15);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }
}
