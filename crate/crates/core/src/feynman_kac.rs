//! Monte Carlo estimate of `λ_V` from weighted continuous-time Markov chain
//! paths: `λ_V ≈ (1/t) log E[exp ∫_0^t V(X_s) ds]`.
//!
//! Every path draws from its own ChaCha8 stream keyed by `(seed, path index)`,
//! so estimates do not depend on how rayon schedules the paths.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::generator::{Generator, Potential};
use crate::measure::pairwise_sum;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("need at least 2 paths, got {0}")]
    TooFewPaths(usize),
    #[error("time horizon must be finite and positive, got {0}")]
    BadTime(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    /// Visited states; consecutive entries are joined by positive rates.
    pub states: Vec<usize>,
    /// Time spent in each visited state, the last one truncated at the horizon.
    pub holding_times: Vec<f64>,
    pub total_time: f64,
    /// `∫_0^t V(X_s) ds`; zero for unweighted paths.
    pub weight_exponent: f64,
}

impl PathSample {
    /// Fraction of time spent in each of `d` states.
    pub fn occupation(&self, d: usize) -> DVector<f64> {
        let mut occ = DVector::zeros(d);
        for (&s, &h) in self.states.iter().zip(&self.holding_times) {
            occ[s] += h;
        }
        if self.total_time > 0.0 {
            occ /= self.total_time;
        }
        occ
    }
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_path(q: &Generator, v: Option<&Potential>, x0: usize, t: f64, rng: &mut ChaCha8Rng) -> PathSample {
    let rates = q.rates();
    let d = q.dim();
    let mut states = vec![x0];
    let mut holding_times = Vec::new();
    let mut elapsed = 0.0;
    let mut state = x0;
    loop {
        let exit = -rates[(state, state)];
        let remaining = t - elapsed;
        let hold = if exit > 0.0 {
            // 1 − U lies in (0, 1], so the logarithm is finite.
            -(1.0 - rng.random::<f64>()).ln() / exit
        } else {
            f64::INFINITY
        };
        if hold >= remaining {
            holding_times.push(remaining);
            break;
        }
        holding_times.push(hold);
        elapsed += hold;
        let mut target = rng.random::<f64>() * exit;
        let mut next = state;
        for j in (0..d).filter(|&j| j != state && rates[(state, j)] > 0.0) {
            next = j;
            target -= rates[(state, j)];
            if target < 0.0 {
                break;
            }
        }
        state = next;
        states.push(state);
    }
    let weight_exponent = v.map_or(0.0, |v| states.iter().zip(&holding_times).map(|(&s, &h)| v.values()[s] * h).sum());
    PathSample { states, holding_times, total_time: t, weight_exponent }
}

/// Gillespie path of the chain started at `x0` on `[0, t]`, from stream 0 of `seed`.
///
/// # Panics
/// If `x0` is not a state of `q` or `t` is negative or not finite.
pub fn simulate_ctmc(q: &Generator, x0: usize, t: f64, seed: u64) -> PathSample {
    assert!(x0 < q.dim(), "initial state {x0} out of range");
    assert!(t >= 0.0 && t.is_finite(), "bad horizon {t}");
    sample_path(q, None, x0, t, &mut path_rng(seed, 0))
}

/// As [`simulate_ctmc`], also recording `∫_0^t V(X_s) ds`.
pub fn simulate_weighted(q: &Generator, v: &Potential, x0: usize, t: f64, seed: u64) -> PathSample {
    assert_eq!(v.len(), q.dim(), "potential length");
    assert!(x0 < q.dim(), "initial state {x0} out of range");
    assert!(t >= 0.0 && t.is_finite(), "bad horizon {t}");
    sample_path(q, Some(v), x0, t, &mut path_rng(seed, 0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// `log((1/n) Σ e^{x_k})` computed after subtracting `max x`, with the
/// delta-method standard error of that logarithm.
pub fn log_mean_exp(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let top = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n == 0 || !top.is_finite() {
        return (top, f64::NAN);
    }
    let w: Vec<f64> = xs.iter().map(|x| (x - top).exp()).collect();
    let mean = pairwise_sum(&w) / n as f64;
    let se = if n > 1 {
        let sq: Vec<f64> = w.iter().map(|x| (x - mean).powi(2)).collect();
        (pairwise_sum(&sq) / (n - 1) as f64).sqrt() / (mean * (n as f64).sqrt())
    } else {
        f64::NAN
    };
    (top + mean.ln(), se)
}

/// `(1/t) log mean_k exp(∫_0^t V(X^k_s) ds)` over `n_paths` paths started
/// uniformly at random. Exponents are taken relative to `min V`, so a
/// constant potential is reproduced exactly.
pub fn estimate_lambda(q: &Generator, v: &Potential, t: f64, n_paths: usize, seed: u64) -> Result<McEstimate, McError> {
    let d = q.dim();
    if v.len() != d {
        return Err(McError::DimensionMismatch { expected: d, found: v.len() });
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(McError::BadTime(t));
    }
    if n_paths < 2 {
        return Err(McError::TooFewPaths(n_paths));
    }
    let vmin = v.min();
    let excess = v.shifted(-vmin);
    let exponents: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = path_rng(seed, k as u64);
            let x0 = rng.random_range(0..d);
            sample_path(q, Some(&excess), x0, t, &mut rng).weight_exponent
        })
        .collect();
    let (lme, se) = log_mean_exp(&exponents);
    Ok(McEstimate { estimate: vmin + lme / t, std_error: se / t })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q() -> Generator {
        Generator::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap()
    }

    #[test]
    fn single_state_holds_forever() {
        let one = Generator::from_rows(&[vec![0.0]]).unwrap();
        let p = simulate_ctmc(&one, 0, 7.5, 3);
        assert_eq!(p.states, vec![0]);
        assert_eq!(p.holding_times, vec![7.5]);
    }

    #[test]
    fn paths_are_reproducible_and_consistent() {
        let a = simulate_ctmc(&q(), 0, 20.0, 42);
        assert_eq!(a, simulate_ctmc(&q(), 0, 20.0, 42));
        assert_ne!(a, simulate_ctmc(&q(), 0, 20.0, 43));
        let total: f64 = a.holding_times.iter().sum();
        assert!((total - 20.0).abs() < 1e-12);
        assert!(a.holding_times.iter().all(|&h| h > 0.0));
        for w in a.states.windows(2) {
            assert!(q().rates()[(w[0], w[1])] > 0.0);
        }
    }

    #[test]
    fn occupation_approaches_stationary() {
        let occ = simulate_ctmc(&q(), 0, 10_000.0, 7).occupation(2);
        let tv = 0.5 * ((occ[0] - 2.0 / 3.0).abs() + (occ[1] - 1.0 / 3.0).abs());
        assert!(tv < 0.01, "{tv}");
    }

    #[test]
    fn weight_exponent_is_exact_integral() {
        let v = Potential::from_slice(&[1.5, -0.5]).unwrap();
        let p = simulate_weighted(&q(), &v, 1, 5.0, 9);
        let occ = p.occupation(2) * 5.0;
        assert!((p.weight_exponent - (1.5 * occ[0] - 0.5 * occ[1])).abs() < 1e-12);
    }

    #[test]
    fn trivial_potentials_are_exact() {
        let zero = estimate_lambda(&q(), &Potential::zeros(2), 10.0, 100, 1).unwrap();
        assert_eq!(zero.estimate, 0.0);
        assert_eq!(zero.std_error, 0.0);
        let c = estimate_lambda(&q(), &Potential::constant(2, -0.7), 10.0, 100, 1).unwrap();
        assert_eq!(c.estimate, -0.7);
    }

    #[test]
    fn shift_moves_estimate() {
        let v = Potential::from_slice(&[1.0, 0.0]).unwrap();
        let a = estimate_lambda(&q(), &v, 5.0, 500, 11).unwrap();
        let b = estimate_lambda(&q(), &v.shifted(2.5), 5.0, 500, 11).unwrap();
        assert!((b.estimate - a.estimate - 2.5).abs() < 1e-12);
        assert_eq!(a.std_error, b.std_error);
    }

    #[test]
    fn log_mean_exp_is_shift_invariant() {
        let xs = [0.3, -1.2, 4.0, 2.2];
        let (a, sa) = log_mean_exp(&xs);
        let shifted: Vec<f64> = xs.iter().map(|x| x - 700.0).collect();
        let (b, sb) = log_mean_exp(&shifted);
        assert!((a - 700.0 - b).abs() < 1e-12);
        assert!((sa - sb).abs() < 1e-12 * sa);
        let direct = (xs.iter().map(|x| x.exp()).sum::<f64>() / 4.0).ln();
        assert!((a - direct).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        let v = Potential::zeros(2);
        assert_eq!(estimate_lambda(&q(), &v, 1.0, 1, 0), Err(McError::TooFewPaths(1)));
        assert_eq!(estimate_lambda(&q(), &v, 0.0, 10, 0), Err(McError::BadTime(0.0)));
    }
}
