//! Small dense quasi-Newton minimizer shared by the variational solvers.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    /// Stop when `‖∇f‖_∞` falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { grad_tol: 1e-10, max_iter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;

/// Minimizes `f` (returning value and gradient) from `x0` with BFGS and
/// backtracking. Errors at trial points shrink the step; an error at `x0`
/// is returned.
pub fn minimize<E, F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions) -> Result<BfgsOutcome, E>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>), E>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first_update = true;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        if g.amax() <= opts.grad_tol {
            converged = true;
            break;
        }
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            first_update = true;
            p = -g.clone();
            slope = g.dot(&p);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let trial = &x + &p * alpha;
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) {
                    let armijo = ft <= fx + ARMIJO * alpha * slope;
                    // Near the optimum values stop resolving; a smaller gradient at no
                    // measurable increase still counts as progress.
                    let flat = ft <= fx + 4.0 * f64::EPSILON * fx.abs().max(1.0) && gt.amax() < g.amax();
                    if armijo || flat {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-16 * s.norm() * y.norm() && sy > 0.0 {
            if first_update {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H⁺ = H − ρ(s(Hy)ᵀ + (Hy)sᵀ) + (ρ²yᵀHy + ρ) ssᵀ
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations += 1;
    }
    if !converged && g.amax() <= opts.grad_tol {
        converged = true;
    }
    let grad_norm = g.amax();
    Ok(BfgsOutcome { x, value: fx, grad: g, grad_norm, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let out = minimize::<(), _>(
            |x| {
                let ax = &a * x;
                Ok((0.5 * x.dot(&ax) - b.dot(x), ax - &b))
            },
            DVector::zeros(2),
            &BfgsOptions::default(),
        )
        .unwrap();
        let exact = a.lu().solve(&b).unwrap();
        assert!(out.converged);
        assert!((out.x - exact).amax() < 1e-9);
    }

    #[test]
    fn rosenbrock() {
        let out = minimize::<(), _>(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
                Ok((f, g))
            },
            DVector::from_vec(vec![-1.2, 1.0]),
            &BfgsOptions { grad_tol: 1e-9, max_iter: 1000 },
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }
}
