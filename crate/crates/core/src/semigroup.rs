//! The Markov semigroup `P_t = exp(tQ)` and the Schrödinger semigroup
//! `P_t^V = exp(t(Q + diag V))`.
//!
//! Matrix exponentials use scaling and squaring around a fixed-degree Taylor
//! approximant applied to the diagonally shifted matrix `A + sI` (entrywise
//! nonnegative when `A` is Metzler). For `Q + diag V` every intermediate is then
//! a sum of nonnegative terms, so small entries of `exp(tM)` keep their relative
//! accuracy and never turn negative.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::generator::{check_len, Generator, GeneratorError, Potential};

/// Scaled norm bound `‖A/2^k‖_∞ ≤ 0.5` before the Taylor step.
const SCALED_NORM: f64 = 0.5;
/// Truncation degree; the remainder at norm 0.5 is below 1e-19.
const TAYLOR_DEGREE: usize = 16;
/// Nonnegative inputs map to outputs clamped within `CLAMP_BAND · scale` of zero.
const CLAMP_BAND: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SemigroupError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("time must be finite and nonnegative, got {0}")]
    BadTime(f64),
    #[error("matrix exponential overflowed (t·‖M‖ = {0})")]
    NonFinite(f64),
    #[error("input vector has a negative entry at {index}")]
    NegativeInput { index: usize },
    #[error("quadrature needs at least 2 panels, got {0}")]
    TooFewPanels(usize),
    #[error("time grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

fn check_dim(expected: usize, found: usize) -> Result<(), SemigroupError> {
    if expected != found {
        return Err(SemigroupError::DimensionMismatch { expected, found });
    }
    Ok(())
}

fn check_time(t: f64) -> Result<(), SemigroupError> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(SemigroupError::BadTime(t));
    }
    Ok(())
}

/// Matrix exponential by scaling and squaring.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, SemigroupError> {
    expm_impl(a, false)
}

/// `exp(tQ)` for a generator, with rows rescaled to unit sum after every
/// squaring so conservation does not degrade with `log₂(t‖Q‖)` squarings.
pub fn expm_stochastic(q: &Generator, t: f64) -> Result<DMatrix<f64>, SemigroupError> {
    check_time(t)?;
    expm_impl(&(q.rates() * t), true)
}

fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
}

fn expm_impl(a: &DMatrix<f64>, stochastic: bool) -> Result<DMatrix<f64>, SemigroupError> {
    let n = a.nrows();
    check_dim(n, a.ncols())?;
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(SemigroupError::NonFinite(f64::INFINITY));
    }
    let shift = (0..n).map(|i| -a[(i, i)]).fold(0.0_f64, f64::max);
    let mut b = a.clone();
    for i in 0..n {
        b[(i, i)] += shift;
    }
    let norm = inf_norm(&b);
    let mut squarings = 0_i32;
    while norm / 2f64.powi(squarings) > SCALED_NORM {
        squarings += 1;
    }
    let factor = 2f64.powi(squarings);
    let c = b / factor;

    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=TAYLOR_DEGREE {
        term = (&term * &c) / k as f64;
        result += &term;
    }
    result *= (-shift / factor).exp();
    if stochastic {
        normalize_rows(&mut result);
    }
    for _ in 0..squarings {
        result = &result * &result;
        if stochastic {
            normalize_rows(&mut result);
        }
    }
    if result.iter().any(|x| !x.is_finite()) {
        return Err(SemigroupError::NonFinite(inf_norm(a)));
    }
    Ok(result)
}

pub(crate) fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `L + V` as a matrix, together with its pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct SchrodingerOperator {
    generator: Generator,
    potential: Potential,
    matrix: DMatrix<f64>,
}

impl SchrodingerOperator {
    pub fn new(generator: &Generator, potential: &Potential) -> Result<Self, SemigroupError> {
        check_len(generator.dim(), potential.len())?;
        let mut matrix = generator.rates().clone();
        for i in 0..generator.dim() {
            matrix[(i, i)] += potential.values()[i];
        }
        Ok(SchrodingerOperator { generator: generator.clone(), potential: potential.clone(), matrix })
    }

    /// `V = 0`: the Markov semigroup itself.
    pub fn markov(generator: &Generator) -> Self {
        Self::new(generator, &Potential::zeros(generator.dim())).expect("dimensions agree")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    /// `M = Q + diag(V)`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn scale(&self) -> f64 {
        crate::generator::matrix_scale(&self.matrix)
    }

    /// `exp(tM)`.
    pub fn propagator(&self, t: f64) -> Result<DMatrix<f64>, SemigroupError> {
        self.renormalized_propagator(t, 0.0)
    }

    /// `Some(c)` when `V ≡ c`.
    fn constant_potential(&self) -> Option<f64> {
        let (lo, hi) = (self.potential.min(), self.potential.max());
        (lo == hi).then_some(lo)
    }

    /// `exp(t(M − λI))`, the renormalized semigroup `e^{−λt} P_t^V`.
    pub fn renormalized_propagator(&self, t: f64, lambda: f64) -> Result<DMatrix<f64>, SemigroupError> {
        check_time(t)?;
        if let Some(c) = self.constant_potential() {
            let growth = ((c - lambda) * t).exp();
            if !growth.is_finite() {
                return Err(SemigroupError::NonFinite((c - lambda) * t));
            }
            return Ok(expm_stochastic(&self.generator, t)? * growth);
        }
        let mut a = &self.matrix * t;
        for i in 0..self.dim() {
            a[(i, i)] -= lambda * t;
        }
        expm(&a)
    }
}

fn clamp_if_nonnegative(input: &DVector<f64>, out: &mut DVector<f64>) {
    if input.iter().all(|&x| x >= 0.0) {
        let band = CLAMP_BAND * out.amax().max(1.0);
        out.iter_mut().for_each(|x| {
            if *x < 0.0 && *x >= -band {
                *x = 0.0;
            }
        });
    }
}

/// `P_t^V f = exp(tM) f`.
pub fn evolve(op: &SchrodingerOperator, t: f64, f: &DVector<f64>) -> Result<DVector<f64>, SemigroupError> {
    check_dim(op.dim(), f.len())?;
    if t == 0.0 {
        return Ok(f.clone());
    }
    let p = op.propagator(t)?;
    let mut out = p * f;
    clamp_if_nonnegative(f, &mut out);
    Ok(out)
}

/// Row-vector action `νᵀ exp(tM)` (evolution of a measure).
pub fn evolve_measure(op: &SchrodingerOperator, t: f64, nu: &DVector<f64>) -> Result<DVector<f64>, SemigroupError> {
    check_dim(op.dim(), nu.len())?;
    if t == 0.0 {
        return Ok(nu.clone());
    }
    let p = op.propagator(t)?;
    let mut out = p.tr_mul(nu);
    clamp_if_nonnegative(nu, &mut out);
    Ok(out)
}

/// `‖u(t) − P_t f − ∫_0^t P_{t−s} V u(s) ds‖_∞` with `u(s) = P_s^V f` and the
/// integral by composite Simpson on `n_steps` panels (midpoint per panel).
pub fn duhamel_residual(op: &SchrodingerOperator, t: f64, f: &DVector<f64>, n_steps: usize) -> Result<f64, SemigroupError> {
    check_dim(op.dim(), f.len())?;
    check_time(t)?;
    if n_steps < 2 {
        return Err(SemigroupError::TooFewPanels(n_steps));
    }
    let markov = SchrodingerOperator::markov(op.generator());
    let v = op.potential().values();
    let integrand = |s: f64| -> Result<DVector<f64>, SemigroupError> {
        let u = evolve(op, s, f)?;
        evolve(&markov, t - s, &v.component_mul(&u))
    };
    let h = t / n_steps as f64;
    let mut integral = DVector::zeros(op.dim());
    for k in 0..n_steps {
        let s0 = k as f64 * h;
        let s1 = if k + 1 == n_steps { t } else { (k + 1) as f64 * h };
        let sm = 0.5 * (s0 + s1);
        integral += (integrand(s0)? + 4.0 * integrand(sm)? + integrand(s1)?) * ((s1 - s0) / 6.0);
    }
    let lhs = evolve(op, t, f)?;
    let free = evolve(&markov, t, f)?;
    Ok((lhs - free - integral).amax())
}

/// `e^{t min V} P_t f ≤ P_t^V f ≤ e^{t max V} P_t f` entrywise for `f ≥ 0`,
/// within `1e-12` relative to the upper envelope.
pub fn sandwich_check(op: &SchrodingerOperator, t: f64, f: &DVector<f64>) -> Result<bool, SemigroupError> {
    check_dim(op.dim(), f.len())?;
    if let Some(index) = f.iter().position(|&x| x < 0.0) {
        return Err(SemigroupError::NegativeInput { index });
    }
    let markov = SchrodingerOperator::markov(op.generator());
    let free = evolve(&markov, t, f)?;
    let mid = evolve(op, t, f)?;
    let lower = &free * (t * op.potential().min()).exp();
    let upper = &free * (t * op.potential().max()).exp();
    let tol = 1e-12 * upper.amax().max(1.0);
    Ok((0..op.dim()).all(|i| lower[i] <= mid[i] + tol && mid[i] <= upper[i] + tol))
}

/// `max_{t ∈ grid} e^{−λt} max_x (P_t^V 1)(x)`, a lower estimate of
/// `sup_{t≥0} e^{−λt}‖P_t^V‖`.
pub fn growth_bound(op: &SchrodingerOperator, lambda: f64, t_grid: &[f64]) -> Result<f64, SemigroupError> {
    if t_grid.is_empty() {
        return Err(SemigroupError::EmptyGrid);
    }
    let ones = DVector::from_element(op.dim(), 1.0);
    let mut best = f64::NEG_INFINITY;
    for &t in t_grid {
        let p = op.renormalized_propagator(t, lambda)?;
        best = best.max((p * &ones).max());
    }
    Ok(best)
}

/// Positivity improvement: every entry of `exp(tQ)` is strictly positive.
pub fn check_condition_b(q: &Generator, t: f64) -> Result<bool, SemigroupError> {
    check_time(t)?;
    let p = expm(&(q.rates() * t))?;
    Ok(p.iter().all(|&x| x > 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> Generator {
        Generator::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap()
    }

    /// exp(tA) for 2×2 A with distinct real eigenvalues, by eigendecomposition.
    fn expm_2x2_oracle(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let (p, q, r, s) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
        let tr = p + s;
        let det = p * s - q * r;
        let disc = (tr * tr / 4.0 - det).sqrt();
        let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
        // Sylvester: exp(tA) = (e^{l1 t}(A − l2 I) − e^{l2 t}(A − l1 I)) / (l1 − l2)
        let id = DMatrix::<f64>::identity(2, 2);
        ((a - &id * l2) * (l1 * t).exp() - (a - &id * l1) * (l2 * t).exp()) / (l1 - l2)
    }

    #[test]
    fn expm_matches_eigendecomposition() {
        let q = two_state();
        let op = SchrodingerOperator::new(&q, &Potential::from_slice(&[1.0, 0.0]).unwrap()).unwrap();
        for t in [0.1, 1.0, 7.5] {
            let p = op.propagator(t).unwrap();
            let oracle = expm_2x2_oracle(op.matrix(), t);
            let rel = (&p - &oracle).amax() / oracle.amax();
            assert!(rel < 1e-13, "t={t} rel={rel}");
        }
    }

    #[test]
    fn evolve_two_state_example() {
        let q = two_state();
        let op = SchrodingerOperator::new(&q, &Potential::from_slice(&[1.0, 0.0]).unwrap()).unwrap();
        let f = DVector::from_vec(vec![1.0, 0.0]);
        let got = evolve(&op, 1.0, &f).unwrap();
        let want = expm_2x2_oracle(op.matrix(), 1.0) * &f;
        assert!((got - &want).amax() <= 1e-12 * want.amax());
    }

    #[test]
    fn evolve_at_zero_is_identity() {
        let op = SchrodingerOperator::new(&two_state(), &Potential::from_slice(&[0.3, -4.0]).unwrap()).unwrap();
        let f = DVector::from_vec(vec![0.123, -9.0]);
        assert_eq!(evolve(&op, 0.0, &f).unwrap(), f);
    }

    #[test]
    fn markov_conserves_ones() {
        let op = SchrodingerOperator::markov(&two_state());
        let ones = DVector::from_element(2, 1.0);
        for t in [0.01, 1.0, 50.0, 1e4] {
            assert!((evolve(&op, t, &ones).unwrap() - &ones).amax() < 1e-12);
        }
    }

    #[test]
    fn expm_stays_positive_on_sparse_paths() {
        // Path graph on 8 states, tiny time: far corners ~ t^7/7!.
        let d = 8;
        let mut raw = DMatrix::zeros(d, d);
        for i in 0..d - 1 {
            raw[(i, i + 1)] = 1.0;
            raw[(i + 1, i)] = 1.0;
        }
        for i in 0..d {
            raw[(i, i)] = -raw.row(i).sum();
        }
        let q = Generator::new(raw).unwrap();
        assert!(check_condition_b(&q, 0.01).unwrap());
        let p = expm(&(q.rates() * 0.01)).unwrap();
        // Direct Taylor series of tQ: the corner's leading term is t^7/7! and
        // the series converges fast enough at t = 0.01 to be exact to 1e-13.
        let a = q.rates() * 0.01;
        let mut term = DMatrix::<f64>::identity(d, d);
        let mut series = term.clone();
        for k in 1..40 {
            term = &term * &a / k as f64;
            series += &term;
        }
        assert!(p[(0, 7)] > 0.0);
        assert!((p[(0, 7)] / series[(0, 7)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn overflow_is_reported() {
        let q = two_state();
        let op = SchrodingerOperator::new(&q, &Potential::from_slice(&[10.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(evolve(&op, 1e4, &DVector::from_element(2, 1.0)), Err(SemigroupError::NonFinite(_))));
    }

    #[test]
    fn bad_inputs() {
        let op = SchrodingerOperator::markov(&two_state());
        assert!(matches!(evolve(&op, -1.0, &DVector::zeros(2)), Err(SemigroupError::BadTime(_))));
        assert!(matches!(evolve(&op, 1.0, &DVector::zeros(3)), Err(SemigroupError::DimensionMismatch { .. })));
        assert!(matches!(
            sandwich_check(&op, 1.0, &DVector::from_vec(vec![1.0, -1.0])),
            Err(SemigroupError::NegativeInput { index: 1 })
        ));
        assert!(matches!(duhamel_residual(&op, 1.0, &DVector::zeros(2), 1), Err(SemigroupError::TooFewPanels(1))));
        assert!(matches!(growth_bound(&op, 0.0, &[]), Err(SemigroupError::EmptyGrid)));
    }

    #[test]
    fn duhamel_vanishes_without_potential() {
        let op = SchrodingerOperator::markov(&two_state());
        let r = duhamel_residual(&op, 1.0, &DVector::from_vec(vec![0.2, 1.7]), 4).unwrap();
        assert!(r <= 1e-12);
    }

    #[test]
    fn duhamel_fourth_order_convergence() {
        let op = SchrodingerOperator::new(&two_state(), &Potential::from_slice(&[1.0, 0.0]).unwrap()).unwrap();
        let f = DVector::from_vec(vec![1.0, 0.0]);
        let r64 = duhamel_residual(&op, 1.0, &f, 64).unwrap();
        let r128 = duhamel_residual(&op, 1.0, &f, 128).unwrap();
        assert!(r64 <= 1e-8, "r64={r64}");
        let ratio = r128 / r64;
        assert!(ratio > 1.0 / 64.0 && ratio < 4.0 / 16.0, "ratio={ratio} r64={r64} r128={r128}");
    }

    #[test]
    fn sandwich_examples() {
        let q = two_state();
        let c = DVector::from_vec(vec![0.7, 2.0]);
        let constant = SchrodingerOperator::new(&q, &Potential::constant(2, 1.3)).unwrap();
        let markov = SchrodingerOperator::markov(&q);
        let lhs = evolve(&constant, 2.0, &c).unwrap();
        let rhs = evolve(&markov, 2.0, &c).unwrap() * (2.6_f64).exp();
        assert!((lhs - &rhs).amax() <= 1e-12 * rhs.amax());
        assert!(sandwich_check(&constant, 2.0, &c).unwrap());

        let op = SchrodingerOperator::new(&q, &Potential::from_slice(&[1.0, 0.0]).unwrap()).unwrap();
        for t in [0.1, 1.0, 10.0] {
            assert!(sandwich_check(&op, t, &c).unwrap());
        }
        assert!(sandwich_check(&op, 1.0, &DVector::zeros(2)).unwrap());
        assert_eq!(evolve(&op, 1.0, &DVector::zeros(2)).unwrap(), DVector::zeros(2));
    }

    #[test]
    fn growth_bound_trivial_cases() {
        let q = two_state();
        let grid: Vec<f64> = (0..=20).map(|k| k as f64).collect();
        let markov = SchrodingerOperator::markov(&q);
        assert!((growth_bound(&markov, 0.0, &grid).unwrap() - 1.0).abs() < 1e-12);
        let constant = SchrodingerOperator::new(&q, &Potential::constant(2, -0.4)).unwrap();
        assert!((growth_bound(&constant, -0.4, &grid).unwrap() - 1.0).abs() < 1e-12);
    }
}
