//! Donsker–Varadhan rate function and its dual problems.
//!
//! `I(μ) = −inf_{u>0} Σ_i μ_i (Lu/u)_i`. Writing `u = e^w`, the objective
//! `F(w) = Σ_i μ_i Σ_j Q_ij e^{w_j − w_i}` is convex and gauge invariant
//! (`w → w + c`); its Hessian is the Laplacian of the graph with edge weights
//! `μ_i Q_ij e^{w_j − w_i}`, so damped Newton with a per-component gauge
//! projection converges in a handful of steps.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::generator::{support_components, Generator, Potential};
use crate::measure::{softmax, softmax_pullback, MeasureError, ProbMeasure};
use crate::optim::{minimize, BfgsOptions};
use crate::semigroup::{SchrodingerOperator, SemigroupError};
use crate::spectral::{principal_eigen, principal_eigen_op, SpectralError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RateError {
    #[error("solver did not converge: best value {best_value}, gradient norm {gradient_norm:e}")]
    NotConverged { best_value: f64, gradient_norm: f64 },
    #[error("measure has zero weight at states {zeros:?}")]
    UnsupportedSupport { zeros: Vec<usize> },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// What to do with measures that vanish somewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryPolicy {
    #[default]
    Reject,
    /// Minimize over the support only; terms pointing off the support are sent
    /// to their infimum 0.
    RestrictToSupport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateOptions {
    /// Gradient tolerance `‖∇F‖_∞` for the inner Newton solve.
    pub tol: f64,
    pub max_iter: usize,
    pub boundary: BoundaryPolicy,
    /// Agreement target for the dual problems.
    pub dual_tol: f64,
    /// Seed for the restarts of [`dv_sup`].
    pub seed: u64,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions { tol: 1e-10, max_iter: 200, boundary: BoundaryPolicy::Reject, dual_tol: 1e-8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    /// `I(μ)`.
    pub value: f64,
    /// Optimal `log u`, mean zero on each support component; `−∞` off the support.
    pub minimizer_logu: DVector<f64>,
    /// `(Lu/u)_i` at the optimum; `−∂I/∂μ_i`. `NaN` off the support.
    pub lu_over_u: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

struct Objective<'a> {
    rates: &'a DMatrix<f64>,
    mu: &'a DVector<f64>,
    active: Vec<usize>,
}

impl Objective<'_> {
    fn value(&self, w: &DVector<f64>) -> f64 {
        let mut f = 0.0;
        for (a, &i) in self.active.iter().enumerate() {
            let mut row = self.rates[(i, i)];
            for (b, &j) in self.active.iter().enumerate() {
                if a != b && self.rates[(i, j)] > 0.0 {
                    row += self.rates[(i, j)] * (w[b] - w[a]).exp();
                }
            }
            f += self.mu[i] * row;
        }
        f
    }

    fn grad_hess(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.active.len();
        let mut g = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        for (a, &i) in self.active.iter().enumerate() {
            for (b, &j) in self.active.iter().enumerate() {
                if a == b || self.rates[(i, j)] <= 0.0 {
                    continue;
                }
                let e = self.mu[i] * self.rates[(i, j)] * (w[b] - w[a]).exp();
                g[b] += e;
                g[a] -= e;
                h[(a, a)] += e;
                h[(b, b)] += e;
                h[(a, b)] -= e;
                h[(b, a)] -= e;
            }
        }
        (g, h)
    }

    fn drift(&self, w: &DVector<f64>) -> DVector<f64> {
        let d = self.mu.len();
        let mut r = DVector::from_element(d, f64::NAN);
        for (a, &i) in self.active.iter().enumerate() {
            let mut row = self.rates[(i, i)];
            for (b, &j) in self.active.iter().enumerate() {
                if a != b {
                    row += self.rates[(i, j)] * (w[b] - w[a]).exp();
                }
            }
            r[i] = row;
        }
        r
    }
}

fn recenter(w: &mut DVector<f64>, components: &[Vec<usize>]) {
    for c in components {
        let mean = c.iter().map(|&a| w[a]).sum::<f64>() / c.len() as f64;
        c.iter().for_each(|&a| w[a] -= mean);
    }
}

/// `I(μ)` by damped Newton on `F(w)`; see the module docs.
pub fn rate_i(q: &Generator, mu: &ProbMeasure, opts: &RateOptions) -> Result<RateResult, RateError> {
    let d = q.dim();
    if mu.len() != d {
        return Err(RateError::DimensionMismatch { expected: d, found: mu.len() });
    }
    let zeros: Vec<usize> = (0..d).filter(|&i| mu.weights()[i] <= 0.0).collect();
    if !zeros.is_empty() && opts.boundary == BoundaryPolicy::Reject {
        return Err(RateError::UnsupportedSupport { zeros });
    }
    let active = mu.support();
    let k = active.len();
    let sub = DMatrix::from_fn(k, k, |a, b| q.rates()[(active[a], active[b])]);
    let components = support_components(&sub);
    let obj = Objective { rates: q.rates(), mu: mu.weights(), active: active.clone() };

    let mut w = DVector::zeros(k);
    let mut fw = obj.value(&w);
    let mut iterations = 0;
    let mut gradient_norm;
    loop {
        let (g, mut h) = obj.grad_hess(&w);
        gradient_norm = g.amax();
        if gradient_norm <= opts.tol {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(RateError::NotConverged { best_value: -fw, gradient_norm });
        }
        for c in &components {
            let s = 1.0 / c.len() as f64;
            for &a in c {
                for &b in c {
                    h[(a, b)] += s;
                }
            }
        }
        let newton = h.lu().solve(&(-&g)).filter(|p| p.dot(&g) < 0.0 && p.iter().all(|x| x.is_finite()));
        let direction = newton.clone().unwrap_or_else(|| -g.clone());
        let slope = direction.dot(&g);
        let mut step = 1.0;
        let mut accepted = false;
        if newton.is_some() && gradient_norm < 1e-6 {
            // Quadratic convergence region: take the full step.
            let mut trial = &w + &direction;
            recenter(&mut trial, &components);
            let ft = obj.value(&trial);
            if ft <= fw + 1e-12 * fw.abs().max(1.0) {
                w = trial;
                fw = ft;
                accepted = true;
            }
        }
        while !accepted && step > 1e-20 {
            let mut trial = &w + &direction * step;
            recenter(&mut trial, &components);
            let ft = obj.value(&trial);
            if ft.is_finite() && ft <= fw + 1e-4 * step * slope {
                w = trial;
                fw = ft;
                accepted = true;
            } else {
                step *= 0.5;
            }
        }
        iterations += 1;
        if !accepted {
            let (g, _) = obj.grad_hess(&w);
            gradient_norm = g.amax();
            if gradient_norm <= opts.tol.max(1e-9) {
                break;
            }
            return Err(RateError::NotConverged { best_value: -fw, gradient_norm });
        }
    }

    let mut logu = DVector::from_element(d, f64::NEG_INFINITY);
    for (a, &i) in active.iter().enumerate() {
        logu[i] = w[a];
    }
    Ok(RateResult {
        value: (-fw).max(0.0),
        minimizer_logu: logu,
        lu_over_u: obj.drift(&w),
        converged: true,
        iterations,
        gradient_norm,
    })
}

/// `I^V(μ) = I(μ) − μ(V) + λ_V`.
pub fn rate_iv(q: &Generator, v: &Potential, mu: &ProbMeasure) -> Result<f64, RateError> {
    let lambda = principal_eigen(q, v)?.lambda;
    rate_iv_with(q, v, mu, lambda, &RateOptions::default())
}

/// [`rate_iv`] with a known eigenvalue.
pub fn rate_iv_with(q: &Generator, v: &Potential, mu: &ProbMeasure, lambda: f64, opts: &RateOptions) -> Result<f64, RateError> {
    let i = rate_i(q, mu, opts)?.value;
    Ok(i - mu.integrate(v.values()) + lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualResult {
    /// `sup_μ (μ(V) − I(μ))`.
    pub lambda_hat: f64,
    pub mu_star: ProbMeasure,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Maximizes `μ(V) − I(μ)` over the open simplex with `μ = softmax(θ)`, using
/// the envelope gradient `V + Lu/u` and three seeded starting points.
pub fn dv_sup(q: &Generator, v: &Potential, opts: &RateOptions) -> Result<DualResult, RateError> {
    let d = q.dim();
    if v.len() != d {
        return Err(RateError::DimensionMismatch { expected: d, found: v.len() });
    }
    let inner = RateOptions { tol: opts.tol.min(1e-11), boundary: BoundaryPolicy::Reject, ..*opts };
    let objective = |theta: &DVector<f64>| -> Result<(f64, DVector<f64>), RateError> {
        let mu = ProbMeasure::normalized(softmax(theta))?;
        let r = rate_i(q, &mu, &inner)?;
        let value = mu.integrate(v.values()) - r.value;
        let grad_mu = v.values() + &r.lu_over_u;
        Ok((-value, -softmax_pullback(mu.weights(), &grad_mu)))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![DVector::zeros(d)];
    for _ in 0..2 {
        starts.push(DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)));
    }
    let bfgs = BfgsOptions { grad_tol: opts.tol, max_iter: 1000 };
    let mut best: Option<crate::optim::BfgsOutcome> = None;
    for x0 in starts {
        let out = minimize(objective, x0, &bfgs)?;
        if best.as_ref().is_none_or(|b| out.value < b.value) {
            best = Some(out);
        }
    }
    let best = best.expect("at least one start");
    if best.grad_norm > opts.dual_tol.sqrt() {
        return Err(RateError::NotConverged { best_value: -best.value, gradient_norm: best.grad_norm });
    }
    Ok(DualResult {
        lambda_hat: -best.value,
        mu_star: ProbMeasure::normalized(softmax(&best.x))?,
        iterations: best.iterations,
        gradient_norm: best.grad_norm,
    })
}

/// `I(μ) = sup_V (μ(V) − λ_V)`, maximized over `V` with gradient `μ − μ_V`
/// (`μ_V` the equilibrium measure of `V`). An oracle for [`rate_i`].
pub fn legendre_i(q: &Generator, mu: &ProbMeasure, opts: &RateOptions) -> Result<f64, RateError> {
    let d = q.dim();
    if mu.len() != d {
        return Err(RateError::DimensionMismatch { expected: d, found: mu.len() });
    }
    if !mu.is_strictly_positive() {
        return Err(RateError::UnsupportedSupport { zeros: (0..d).filter(|&i| mu.weights()[i] <= 0.0).collect() });
    }
    let objective = |v: &DVector<f64>| -> Result<(f64, DVector<f64>), RateError> {
        let pot = Potential::new(v.clone()).map_err(SpectralError::from)?;
        let op = SchrodingerOperator::new(q, &pot)?;
        let gd = principal_eigen_op(&op)?;
        let value = mu.integrate(v) - gd.lambda;
        Ok((-value, -(mu.weights() - gd.mu.weights())))
    };
    let out = minimize(objective, DVector::zeros(d), &BfgsOptions { grad_tol: opts.tol, max_iter: 2000 })?;
    if out.grad_norm > opts.dual_tol.sqrt() {
        return Err(RateError::NotConverged { best_value: -out.value, gradient_norm: out.grad_norm });
    }
    Ok(-out.value)
}

/// `H(μ, π) = Σ μ_i log(μ_i/π_i)`, `+∞` when `μ` charges a `π`-null state.
///
/// Panics if the measures live on different state spaces.
pub fn relative_entropy(mu: &ProbMeasure, pi: &ProbMeasure) -> f64 {
    assert_eq!(mu.len(), pi.len(), "measures on different state spaces");
    let mut h = 0.0;
    for (&m, &p) in mu.weights().iter().zip(pi.weights().iter()) {
        if m <= 0.0 {
            continue;
        }
        if p <= 0.0 {
            return f64::INFINITY;
        }
        h += m * (m / p).ln();
    }
    h.max(0.0)
}

/// `(∫ log⁺ r dμ, ∫ log⁻ r dμ)` for `r = e^{−λt}P_t^V u / u`.
pub fn log_ratio_integrals(
    op: &SchrodingerOperator,
    lambda: f64,
    mu: &ProbMeasure,
    u: &DVector<f64>,
    t: f64,
) -> Result<(f64, f64), RateError> {
    if u.len() != op.dim() || mu.len() != op.dim() {
        return Err(RateError::DimensionMismatch { expected: op.dim(), found: u.len().max(mu.len()) });
    }
    let p = op.renormalized_propagator(t, lambda)?;
    let pu = p * u;
    let mut plus = 0.0;
    let mut minus = 0.0;
    for i in 0..op.dim() {
        let l = (pu[i] / u[i]).ln();
        let w = mu.weights()[i];
        if l > 0.0 {
            plus += w * l;
        } else {
            minus -= w * l;
        }
    }
    Ok((plus, minus))
}
