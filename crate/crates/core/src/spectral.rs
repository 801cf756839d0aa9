//! Principal eigenvalue, ground state, ground measure and equilibrium measure
//! of `M = Q + diag(V)`, the Doob transform, and the time-averaged
//! reconstruction of the ground measure from an equilibrium measure.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::generator::{validate_generator, Generator, GeneratorError, Potential, DEFAULT_ROW_TOL};
use crate::measure::{MeasureError, ProbMeasure};
use crate::semigroup::{expm, SchrodingerOperator, SemigroupError};

const MAX_ITER: usize = 10_000;
const PLATEAU_WINDOW: usize = 50;
const POWER_TOL: f64 = 1e-14;
/// Residual bound `‖Mψ − λψ‖_∞ ≤ RESIDUAL_TOL · scale · ‖ψ‖_∞` required on exit.
const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },
    #[error("Perron vector is not strictly positive")]
    NotPositive,
    #[error("averaging grid needs at least 2 points, got {0}")]
    TooFewGridPoints(usize),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// `(λ, ψ, π, μ)` with `Mψ = λψ`, `πᵀM = λπᵀ`, `Σπ = 1`, `Σψπ = 1`, `μ = ψπ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundData {
    pub lambda: f64,
    pub psi: DVector<f64>,
    pub pi: ProbMeasure,
    pub mu: ProbMeasure,
}

impl GroundData {
    /// `(‖Mψ − λψ‖_∞, ‖πᵀM − λπᵀ‖_∞)`.
    pub fn residuals(&self, op: &SchrodingerOperator) -> (f64, f64) {
        let m = op.matrix();
        let right = (m * &self.psi - &self.psi * self.lambda).amax();
        let left = (m.tr_mul(self.pi.weights()) - self.pi.weights() * self.lambda).amax();
        (right, left)
    }
}

pub fn principal_eigen(q: &Generator, v: &Potential) -> Result<GroundData, SpectralError> {
    principal_eigen_op(&SchrodingerOperator::new(q, v)?)
}

/// Perron pair of `M` by power iteration on `exp(hM)`, `h = 1/max|M_ii|`,
/// squaring the iteration matrix whenever 50 steps pass without convergence,
/// then refined by shifted inverse iteration at the two-sided Rayleigh quotient.
pub fn principal_eigen_op(op: &SchrodingerOperator) -> Result<GroundData, SpectralError> {
    let m = op.matrix();
    let d = op.dim();
    let (vmin, vmax) = (op.potential().min(), op.potential().max());
    if d == 1 {
        let one = DVector::from_element(1, 1.0);
        return Ok(GroundData {
            lambda: m[(0, 0)],
            psi: one.clone(),
            pi: ProbMeasure::new(one.clone())?,
            mu: ProbMeasure::new(one)?,
        });
    }

    let diag_max = (0..d).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let h = if diag_max > 0.0 { 1.0 / diag_max } else { 1.0 };
    let mut b = expm(&(m * h))?;
    b /= b.max();

    let mut x = DVector::from_element(d, 1.0 / d as f64);
    let mut y = x.clone();
    let mut iterations = 0;
    let mut since_square = 0;
    let mut best_change = f64::INFINITY;
    let mut since_best = 0;
    while iterations < MAX_ITER {
        let mut nx = &b * &x;
        let mut ny = b.tr_mul(&y);
        nx /= nx.sum();
        ny /= ny.sum();
        let change = (&nx - &x).amax().max((&ny - &y).amax());
        x = nx;
        y = ny;
        iterations += 1;
        if change <= POWER_TOL {
            break;
        }
        if change < best_change {
            best_change = change;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 4 * PLATEAU_WINDOW {
                break;
            }
        }
        since_square += 1;
        if since_square == PLATEAU_WINDOW {
            b = &b * &b;
            let top = b.max();
            if top > 0.0 && top.is_finite() {
                b /= top;
            }
            since_square = 0;
        }
    }

    let rayleigh = |x: &DVector<f64>, y: &DVector<f64>| (y.dot(&(m * x))) / y.dot(x);
    let residual = |x: &DVector<f64>, y: &DVector<f64>, lam: f64| {
        let r = (m * x - x * lam).amax() / x.amax();
        let l = (m.tr_mul(y) - y * lam).amax() / y.amax();
        r.max(l)
    };

    let mut lambda = rayleigh(&x, &y);
    let mut res = residual(&x, &y, lambda);
    for _ in 0..2 {
        let shifted = m - DMatrix::<f64>::identity(d, d) * lambda;
        let lu = shifted.clone().lu();
        let lu_t = shifted.transpose().lu();
        let (Some(zx), Some(zy)) = (lu.solve(&x), lu_t.solve(&y)) else {
            break;
        };
        let (Some(zx), Some(zy)) = (positive_direction(zx), positive_direction(zy)) else {
            break;
        };
        let lam = rayleigh(&zx, &zy);
        let r = residual(&zx, &zy, lam);
        if r < res {
            x = zx;
            y = zy;
            lambda = lam;
            res = r;
        } else {
            break;
        }
    }

    let scale = op.scale();
    if !(res <= RESIDUAL_TOL * scale) {
        return Err(SpectralError::ConvergenceFailure { iterations, residual: res });
    }
    if x.iter().chain(y.iter()).any(|&e| !(e > 0.0)) {
        return Err(SpectralError::NotPositive);
    }

    let pi_w = &y / y.sum();
    let psi = &x / x.dot(&pi_w);
    let mu_w = psi.component_mul(&pi_w);
    let mu = ProbMeasure::normalized(mu_w)?;
    Ok(GroundData { lambda: lambda.clamp(vmin, vmax), psi, pi: ProbMeasure::normalized(pi_w)?, mu })
}

/// Normalizes to unit sum; `None` unless the result is strictly positive.
fn positive_direction(z: DVector<f64>) -> Option<DVector<f64>> {
    let s = z.sum();
    if !s.is_finite() || s == 0.0 {
        return None;
    }
    let z = z / s;
    z.iter().all(|&e| e > 0.0 && e.is_finite()).then_some(z)
}

/// `(1/t) log max_x (P_t^V 1)(x)`, the finite-time growth rate.
pub fn log_growth_rate(op: &SchrodingerOperator, t: f64) -> Result<f64, SpectralError> {
    let shift = op.potential().max();
    let p = op.renormalized_propagator(t, shift)?;
    let top = (p * DVector::from_element(op.dim(), 1.0)).max();
    Ok(shift + top.ln() / t)
}

/// `D = diag(ψ)^{-1}(M − λI)diag(ψ)`, with the diagonal set so rows sum to zero.
pub fn doob_transform(q: &Generator, v: &Potential, gd: &GroundData) -> Result<Generator, SpectralError> {
    let op = SchrodingerOperator::new(q, v)?;
    let m = op.matrix();
    let d = op.dim();
    let psi = &gd.psi;
    let mut raw = DMatrix::from_fn(d, d, |i, j| if i == j { 0.0 } else { psi[j] * m[(i, j)] / psi[i] });
    for i in 0..d {
        raw[(i, i)] = -raw.row(i).sum();
    }
    Ok(validate_generator(&raw, DEFAULT_ROW_TOL)?)
}

/// `π_t = μ_t / μ_t(1)` with `μ_t = e^{−λt} μᵀ exp(tM)`.
pub fn ground_measure_at_time(op: &SchrodingerOperator, lambda: f64, mu0: &ProbMeasure, t: f64) -> Result<ProbMeasure, SpectralError> {
    let p = op.renormalized_propagator(t, lambda)?;
    Ok(ProbMeasure::normalized(p.tr_mul(mu0.weights()).map(|x| x.max(0.0)))?)
}

/// Normalized time average `π̄_T = ∫_0^T μ_t dt / ∫_0^T μ_t(1) dt` by the
/// trapezoid rule on `n_grid` equally spaced points.
pub fn ground_measure_by_averaging(
    q: &Generator,
    v: &Potential,
    mu0: &ProbMeasure,
    horizon: f64,
    n_grid: usize,
) -> Result<ProbMeasure, SpectralError> {
    let op = SchrodingerOperator::new(q, v)?;
    let gd = principal_eigen_op(&op)?;
    averaged_ground_measure(&op, gd.lambda, mu0, horizon, n_grid)
}

/// [`ground_measure_by_averaging`] with a known eigenvalue.
pub fn averaged_ground_measure(
    op: &SchrodingerOperator,
    lambda: f64,
    mu0: &ProbMeasure,
    horizon: f64,
    n_grid: usize,
) -> Result<ProbMeasure, SpectralError> {
    if n_grid < 2 {
        return Err(SpectralError::TooFewGridPoints(n_grid));
    }
    let step = horizon / (n_grid - 1) as f64;
    let e = op.renormalized_propagator(step, lambda)?;
    let mut current = mu0.weights().clone();
    let mut acc = &current * 0.5;
    for k in 1..n_grid {
        current = e.tr_mul(&current);
        let w = if k == n_grid - 1 { 0.5 } else { 1.0 };
        acc += &current * w;
    }
    Ok(ProbMeasure::normalized(acc.map(|x| x.max(0.0)))?)
}

/// `‖e^{−λt}P_t^V ψ − ψ‖_∞ / ‖ψ‖_∞`: how far `ψ` is from a ground state.
pub fn ground_state_residual(op: &SchrodingerOperator, lambda: f64, psi: &DVector<f64>, t: f64) -> Result<f64, SpectralError> {
    let p = op.renormalized_propagator(t, lambda)?;
    Ok((p * psi - psi).amax() / psi.amax())
}

/// `‖πᵀe^{−λt}P_t^V − πᵀ‖_1`: how far `π` is from a ground measure.
pub fn ground_measure_residual(op: &SchrodingerOperator, lambda: f64, pi: &ProbMeasure, t: f64) -> Result<f64, SpectralError> {
    let p = op.renormalized_propagator(t, lambda)?;
    Ok((p.tr_mul(pi.weights()) - pi.weights()).lp_norm(1))
}
