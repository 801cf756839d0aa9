//! Marginal-to-potential uniqueness on finite product systems.
//!
//! For `N` identical particles with generator `Q_N`, interaction `V_0` and a
//! separable external potential built from `v`, the one-particle marginal
//! `ρ` of the equilibrium measure determines `v` up to an additive constant.
//! This module checks that statement numerically, inverts the map
//! `v ↦ ρ(v)`, and evaluates the reduced functional
//! `I_HK(ρ) = inf { I(μ) − μ(V_0) : μ symmetric, marginal(μ) = ρ }`.

use log::debug;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::generator::{carre_du_champ, Generator, GeneratorError, Potential};
use crate::measure::{softmax, softmax_pullback, tv_distance, MeasureError, ProbMeasure};
use crate::multiparticle::{is_symmetric, marginal, separable_potential, symmetrize_measure, MultiparticleError, TensorSystem};
use crate::optim::{minimize, BfgsOptions};
use crate::rate_function::{rate_i, RateError, RateOptions};
use crate::spectral::{principal_eigen, SpectralError};

/// Default state cap for [`i_hk`] and [`reduced_variational`].
pub const IHK_STATE_CAP: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HkError {
    #[error("{what} did not converge: best error {best_error:e} after {iterations} iterations")]
    NotConverged { what: &'static str, best_error: f64, iterations: usize },
    #[error("target marginal must be strictly positive")]
    TargetNotPositive,
    #[error("interaction potential is not permutation symmetric")]
    InteractionNotSymmetric,
    #[error("{states} states exceed the cap of {cap} for this operation")]
    StateSpaceTooLarge { states: usize, cap: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Multiparticle(#[from] MultiparticleError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

fn check_dim(expected: usize, found: usize) -> Result<(), HkError> {
    if expected != found {
        return Err(HkError::DimensionMismatch { expected, found });
    }
    Ok(())
}

fn check_interaction(sys: &TensorSystem, v0: &Potential) -> Result<(), HkError> {
    check_dim(sys.states(), v0.len())?;
    let tol = 1e-12 * v0.values().amax().max(1.0);
    if !is_symmetric(v0.values(), sys, tol)? {
        return Err(HkError::InteractionNotSymmetric);
    }
    Ok(())
}

/// Principal eigenvalue of `Q_N + V_0 + sep(v)` and the marginal of its
/// symmetrized equilibrium measure.
pub fn equilibrium_marginal(sys: &TensorSystem, v0: &Potential, v: &Potential) -> Result<(f64, ProbMeasure), HkError> {
    check_dim(sys.single_dim(), v.len())?;
    check_dim(sys.states(), v0.len())?;
    let full = v0.add(&separable_potential(v, sys.particles())?);
    let gd = principal_eigen(sys.generator(), &full)?;
    let sym = symmetrize_measure(&gd.mu, sys)?;
    Ok((gd.lambda, marginal(&sym, sys)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HkConclusion {
    SamePotentialUpToConstant,
    DistinctMarginals,
    Violation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HkReport {
    /// `TV(ρ_1, ρ_2)`.
    pub marginal_distance: f64,
    /// `max |(v_1 − v_2) − mean(v_1 − v_2)|`.
    pub potential_residual: f64,
    pub lambdas: (f64, f64),
    /// `potential_residual / marginal_distance`, when the distance is positive.
    pub kappa: Option<f64>,
    /// `(λ_2 − λ_1) − ρ_1(v_2 − v_1)` and `(λ_1 − λ_2) − ρ_2(v_1 − v_2)`; both
    /// must be strictly positive when `v_1 − v_2` is not constant.
    pub strict_gaps: Option<(f64, f64)>,
    pub rho1: Vec<f64>,
    pub rho2: Vec<f64>,
    pub conclusion: HkConclusion,
}

/// Compares the equilibrium marginals generated by `v1` and `v2`.
///
/// Marginals within `tol` must come from potentials whose difference is
/// constant within `tol`; distinct potentials must give distinct marginals and
/// satisfy both strict inequalities. Anything else is a `Violation`.
pub fn hk_verify(sys: &TensorSystem, v0: &Potential, v1: &Potential, v2: &Potential, tol: f64) -> Result<HkReport, HkError> {
    check_interaction(sys, v0)?;
    let (l1, rho1) = equilibrium_marginal(sys, v0, v1)?;
    let (l2, rho2) = equilibrium_marginal(sys, v0, v2)?;
    let dv = v1.values() - v2.values();
    let mean = dv.mean();
    let potential_residual = dv.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    let marginal_distance = rho1.tv_distance(&rho2);
    let kappa = (marginal_distance > 0.0).then(|| potential_residual / marginal_distance);

    let constant = potential_residual <= tol;
    let strict_gaps = (!constant).then(|| {
        let g1 = (l2 - l1) + rho1.integrate(&dv);
        let g2 = (l1 - l2) - rho2.integrate(&dv);
        (g1, g2)
    });
    let conclusion = match (marginal_distance <= tol, constant, strict_gaps) {
        (true, true, _) => HkConclusion::SamePotentialUpToConstant,
        (false, false, Some((g1, g2))) if g1 > 0.0 && g2 > 0.0 => HkConclusion::DistinctMarginals,
        _ => HkConclusion::Violation,
    };
    if let Some(k) = kappa {
        debug!("hk_verify: TV = {marginal_distance:e}, residual = {potential_residual:e}, kappa = {k:e}");
    }
    Ok(HkReport {
        marginal_distance,
        potential_residual,
        lambdas: (l1, l2),
        kappa,
        strict_gaps,
        rho1: rho1.weights().iter().copied().collect(),
        rho2: rho2.weights().iter().copied().collect(),
        conclusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionOptions {
    pub step: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InversionOptions {
    fn default() -> Self {
        InversionOptions { step: 0.5, tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    /// Mean-zero potential.
    pub v_recovered: Potential,
    pub iterations: usize,
    /// `TV(ρ(v_recovered), ρ_target)`.
    pub marginal_error: f64,
    pub converged: bool,
}

/// Damped log-density fixed point `v ← v + α(log ρ_target − log ρ(v))`,
/// re-centred after every step; `α` halves whenever a step increases the error.
pub fn invert_potential(sys: &TensorSystem, v0: &Potential, rho_target: &ProbMeasure, opts: &InversionOptions) -> Result<InversionResult, HkError> {
    check_interaction(sys, v0)?;
    check_dim(sys.single_dim(), rho_target.len())?;
    if !rho_target.is_strictly_positive() {
        return Err(HkError::TargetNotPositive);
    }
    let log_target = rho_target.weights().map(f64::ln);
    let mut v = Potential::zeros(sys.single_dim());
    let mut rho = equilibrium_marginal(sys, v0, &v)?.1;
    let mut err = rho.tv_distance(rho_target);
    let mut alpha = opts.step;
    let mut iterations = 0;
    while err > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let step = (&log_target - rho.weights().map(f64::ln)) * alpha;
        let trial = Potential::new(v.values() + step)?.centered();
        let trial_rho = equilibrium_marginal(sys, v0, &trial)?.1;
        let trial_err = trial_rho.tv_distance(rho_target);
        if trial_err < err {
            v = trial;
            rho = trial_rho;
            err = trial_err;
        } else {
            alpha *= 0.5;
            if alpha < 1e-12 {
                break;
            }
        }
    }
    if err > opts.tol {
        return Err(HkError::NotConverged { what: "potential inversion", best_error: err, iterations });
    }
    Ok(InversionResult { v_recovered: v, iterations, marginal_error: err, converged: true })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IhkOptions {
    /// Bound on `‖marginal(μ) − ρ‖_∞` at exit.
    pub tol: f64,
    /// Inner gradient tolerance, in softmax coordinates.
    pub grad_tol: f64,
    pub max_outer: usize,
    pub max_states: usize,
    pub rate: RateOptions,
}

impl Default for IhkOptions {
    fn default() -> Self {
        IhkOptions { tol: 1e-10, grad_tol: 1e-11, max_outer: 60, max_states: IHK_STATE_CAP, rate: RateOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IhkResult {
    /// `I(μ) − μ(V_0)` at the minimizer.
    pub value: f64,
    /// Symmetric minimizer on `X^N`.
    pub mu: ProbMeasure,
    /// Lagrange multiplier `y` of the marginal constraint; `∂I_HK/∂ρ = −y`
    /// up to an additive constant.
    pub multiplier: DVector<f64>,
    pub violation: f64,
    pub outer_iterations: usize,
}

/// `I_HK(ρ)` by an augmented Lagrangian over symmetric measures, each
/// parametrized by a softmax over permutation orbits and started from `ρ^{⊗N}`.
pub fn i_hk(sys: &TensorSystem, v0: &Potential, rho: &ProbMeasure, opts: &IhkOptions) -> Result<IhkResult, HkError> {
    check_interaction(sys, v0)?;
    let d = sys.single_dim();
    let n = sys.particles();
    check_dim(d, rho.len())?;
    if sys.states() > opts.max_states {
        return Err(HkError::StateSpaceTooLarge { states: sys.states(), cap: opts.max_states });
    }
    if !rho.is_strictly_positive() {
        return Err(HkError::TargetNotPositive);
    }
    let qn = sys.generator();
    let v0w = v0.values();
    if n == 1 {
        let r = rate_i(qn, rho, &opts.rate)?;
        return Ok(IhkResult {
            value: r.value - rho.integrate(v0w),
            mu: rho.clone(),
            multiplier: &r.lu_over_u + v0w,
            violation: 0.0,
            outer_iterations: 0,
        });
    }

    let orbits = sys.orbits();
    let k = orbits.len();
    let a = DMatrix::from_fn(d, k, |j, o| orbits[o].counts[j] as f64 / n as f64);
    let spread = |p: &DVector<f64>| {
        let mut mu = DVector::zeros(sys.states());
        for (o, orbit) in orbits.iter().enumerate() {
            let share = p[o] / orbit.members.len() as f64;
            orbit.members.iter().for_each(|&x| mu[x] = share);
        }
        mu
    };
    let target = rho.weights();
    let mut theta = DVector::from_fn(k, |o, _| {
        let orbit = &orbits[o];
        let x = sys.multi(orbit.members[0]);
        (orbit.members.len() as f64).ln() + x.iter().map(|&xi| target[xi].ln()).sum::<f64>()
    });

    let inner = |theta: &DVector<f64>, y: &DVector<f64>, c: f64| -> Result<(f64, DVector<f64>), HkError> {
        let p = softmax(theta);
        let mu = ProbMeasure::normalized(spread(&p))?;
        let r = rate_i(qn, &mu, &opts.rate)?;
        let viol = &a * &p - target;
        let value = r.value - mu.integrate(v0w) + y.dot(&viol) + 0.5 * c * viol.norm_squared();
        let grad_x = -(&r.lu_over_u + v0w);
        let mut grad_p = DVector::from_fn(k, |o, _| {
            let orbit = &orbits[o];
            orbit.members.iter().map(|&x| grad_x[x]).sum::<f64>() / orbit.members.len() as f64
        });
        grad_p += a.tr_mul(&(y + viol * c));
        Ok((value, softmax_pullback(&p, &grad_p)))
    };

    let bfgs = BfgsOptions { grad_tol: opts.grad_tol, max_iter: 2000 };
    let mut y = DVector::zeros(d);
    let mut c = 10.0;
    let mut violation = f64::INFINITY;
    let mut outer = 0;
    while outer < opts.max_outer {
        outer += 1;
        let out = minimize(|t: &DVector<f64>| inner(t, &y, c), theta.clone(), &bfgs)?;
        theta = out.x;
        let viol = &a * softmax(&theta) - target;
        let new_violation = viol.amax();
        y += &viol * c;
        debug!("i_hk outer {outer}: violation {new_violation:e}, inner gradient {:e}", out.grad_norm);
        if new_violation <= opts.tol {
            violation = new_violation;
            break;
        }
        if new_violation > 0.25 * violation {
            c = (2.0 * c).min(1e8);
        }
        violation = new_violation;
    }
    if violation > opts.tol {
        return Err(HkError::NotConverged { what: "I_HK", best_error: violation, iterations: outer });
    }
    let mu = ProbMeasure::normalized(spread(&softmax(&theta)))?;
    let value = rate_i(qn, &mu, &opts.rate)?.value - mu.integrate(v0w);
    Ok(IhkResult { value, mu, multiplier: y, violation, outer_iterations: outer })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedOptions {
    /// Gradient tolerance of the outer ascent.
    pub tol: f64,
    pub max_iter: usize,
    pub ihk: IhkOptions,
}

impl Default for ReducedOptions {
    fn default() -> Self {
        ReducedOptions { tol: 1e-8, max_iter: 200, ihk: IhkOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedResult {
    pub lambda_hat: f64,
    pub rho_star: ProbMeasure,
    pub iterations: usize,
    pub converged: bool,
}

/// `sup_ρ (ρ(v) − I_HK(ρ))` over the open simplex, ascending along
/// `v + y(ρ)` with `y` the multiplier returned by [`i_hk`].
pub fn reduced_variational(sys: &TensorSystem, v0: &Potential, v: &Potential, opts: &ReducedOptions) -> Result<ReducedResult, HkError> {
    let d = sys.single_dim();
    check_dim(d, v.len())?;
    let vw = v.values();
    let objective = |eta: &DVector<f64>| -> Result<(f64, DVector<f64>), HkError> {
        let rho = ProbMeasure::normalized(softmax(eta))?;
        let r = i_hk(sys, v0, &rho, &opts.ihk)?;
        let grad_rho = -(vw + &r.multiplier);
        Ok((r.value - rho.integrate(vw), softmax_pullback(rho.weights(), &grad_rho)))
    };
    let bfgs = BfgsOptions { grad_tol: opts.tol, max_iter: opts.max_iter };
    let out = minimize(objective, DVector::zeros(d), &bfgs)?;
    Ok(ReducedResult {
        lambda_hat: -out.value,
        rho_star: ProbMeasure::normalized(softmax(&out.x))?,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// `∫ Γ(ψ_1/ψ_2) dμ_1`, with `ψ_i` the ground state of `(Q, V_i)` and `μ_1`
/// the equilibrium measure of `(Q, V_1)`. Vanishes iff `V_2 − V_1` is constant.
pub fn theorem3_gamma_check(q: &Generator, v1: &Potential, v2: &Potential) -> Result<f64, HkError> {
    let g1 = principal_eigen(q, v1)?;
    let g2 = principal_eigen(q, v2)?;
    let ratio = g1.psi.component_div(&g2.psi);
    let gamma = carre_du_champ(q, &ratio)?;
    Ok(g1.mu.integrate(&gamma))
}

/// `TV` between two marginals given as plain vectors.
pub fn marginal_tv(a: &[f64], b: &[f64]) -> f64 {
    tv_distance(&DVector::from_column_slice(a), &DVector::from_column_slice(b))
}
