//! Non-interacting N-particle systems on `X^N`.
//!
//! States are flattened row-major with coordinate 1 slowest: the multi-index
//! `(x_1, …, x_N)` maps to `Σ_i x_i d^{N−1−i}`, so the states with a fixed
//! first coordinate form one contiguous block.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::generator::{validate_generator, Generator, GeneratorError, Potential, DEFAULT_ROW_TOL};
use crate::measure::{MeasureError, ProbMeasure};

pub const DEFAULT_STATE_CAP: usize = 20_000;
/// Permutations are enumerated explicitly up to this many particles.
pub const MAX_PARTICLES: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MultiparticleError {
    #[error("state space of {d}^{n} exceeds the cap of {cap} states")]
    StateSpaceTooLarge { d: usize, n: usize, cap: usize },
    #[error("particle count must be between 1 and {MAX_PARTICLES}, got {0}")]
    BadParticleCount(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("pair interaction matrix must be square and symmetric")]
    NotSymmetric,
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

fn state_count(d: usize, n: usize, cap: usize) -> Result<usize, MultiparticleError> {
    if n == 0 || n > MAX_PARTICLES {
        return Err(MultiparticleError::BadParticleCount(n));
    }
    let mut total: usize = 1;
    for _ in 0..n {
        total = total.checked_mul(d).filter(|&t| t <= cap).ok_or(MultiparticleError::StateSpaceTooLarge { d, n, cap })?;
    }
    Ok(total)
}

fn check_dim(expected: usize, found: usize) -> Result<(), MultiparticleError> {
    if expected != found {
        return Err(MultiparticleError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Multi-index of every flat state, in flat order.
fn multi_indices(d: usize, n: usize, states: usize) -> Vec<Vec<usize>> {
    (0..states)
        .map(|mut flat| {
            let mut x = vec![0; n];
            for slot in x.iter_mut().rev() {
                *slot = flat % d;
                flat /= d;
            }
            x
        })
        .collect()
}

/// One orbit of the coordinate-permutation action.
#[derive(Debug, Clone, PartialEq)]
pub struct Orbit {
    /// Flat indices in the orbit, ascending.
    pub members: Vec<usize>,
    /// `counts[j]` = number of coordinates equal to `j` in any member.
    pub counts: Vec<usize>,
}

/// Product system of `N` identical non-interacting particles.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSystem {
    d: usize,
    n: usize,
    q1: Generator,
    qn: Generator,
    indices: Vec<Vec<usize>>,
}

impl TensorSystem {
    pub fn single_dim(&self) -> usize {
        self.d
    }

    pub fn particles(&self) -> usize {
        self.n
    }

    pub fn states(&self) -> usize {
        self.indices.len()
    }

    pub fn single(&self) -> &Generator {
        &self.q1
    }

    /// Kronecker-sum generator on `d^N` states.
    pub fn generator(&self) -> &Generator {
        &self.qn
    }

    pub fn flat(&self, x: &[usize]) -> usize {
        x.iter().fold(0, |acc, &xi| acc * self.d + xi)
    }

    pub fn multi(&self, flat: usize) -> &[usize] {
        &self.indices[flat]
    }

    /// `f^σ(x) = f(x_{σ(1)}, …, x_{σ(N)})`.
    pub fn permute(&self, f: &DVector<f64>, sigma: &[usize]) -> Result<DVector<f64>, MultiparticleError> {
        check_dim(self.states(), f.len())?;
        let mut y = vec![0; self.n];
        Ok(DVector::from_fn(self.states(), |flat, _| {
            let x = &self.indices[flat];
            for (i, slot) in y.iter_mut().enumerate() {
                *slot = x[sigma[i]];
            }
            f[self.flat(&y)]
        }))
    }

    /// Orbits of the permutation action, ordered by smallest member.
    pub fn orbits(&self) -> Vec<Orbit> {
        let mut seen = vec![usize::MAX; self.states()];
        let mut orbits: Vec<Orbit> = Vec::new();
        for flat in 0..self.states() {
            let mut sorted = self.indices[flat].clone();
            sorted.sort_unstable();
            let rep = self.flat(&sorted);
            if seen[rep] == usize::MAX {
                let mut counts = vec![0; self.d];
                sorted.iter().for_each(|&j| counts[j] += 1);
                seen[rep] = orbits.len();
                orbits.push(Orbit { members: Vec::new(), counts });
            }
            orbits[seen[rep]].members.push(flat);
        }
        orbits
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                extend(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

pub fn kronecker_sum(q1: &Generator, n: usize) -> Result<TensorSystem, MultiparticleError> {
    kronecker_sum_with_cap(q1, n, DEFAULT_STATE_CAP)
}

/// `Q_N = Σ_i I ⊗ … ⊗ Q_1 ⊗ … ⊗ I` (Q_1 in slot `i`).
pub fn kronecker_sum_with_cap(q1: &Generator, n: usize, cap: usize) -> Result<TensorSystem, MultiparticleError> {
    let d = q1.dim();
    let states = state_count(d, n, cap)?;
    let indices = multi_indices(d, n, states);
    let r = q1.rates();
    let mut raw = DMatrix::zeros(states, states);
    let mut stride = 1;
    for i in (0..n).rev() {
        for (flat, x) in indices.iter().enumerate() {
            let xi = x[i];
            raw[(flat, flat)] += r[(xi, xi)];
            for yi in 0..d {
                if yi != xi && r[(xi, yi)] != 0.0 {
                    let target = flat + yi * stride - xi * stride;
                    raw[(flat, target)] += r[(xi, yi)];
                }
            }
        }
        stride *= d;
    }
    let qn = validate_generator(&raw, DEFAULT_ROW_TOL)?;
    Ok(TensorSystem { d, n, q1: q1.clone(), qn, indices })
}

/// `V(x) = (v(x_1) + … + v(x_N)) / N`.
pub fn separable_potential(v: &Potential, n: usize) -> Result<Potential, MultiparticleError> {
    let d = v.len();
    let states = state_count(d, n, DEFAULT_STATE_CAP)?;
    let vals = multi_indices(d, n, states)
        .iter()
        .map(|x| x.iter().map(|&xi| v.values()[xi]).sum::<f64>() / n as f64)
        .collect::<Vec<_>>();
    Ok(Potential::from_slice(&vals)?)
}

/// `V_0(x) = Σ_{i<j} w(x_i, x_j) / C(N, 2)`; zero for a single particle.
pub fn pairwise_potential(w: &DMatrix<f64>, n: usize) -> Result<Potential, MultiparticleError> {
    let d = w.nrows();
    if w.ncols() != d || (0..d).any(|i| (0..d).any(|j| w[(i, j)] != w[(j, i)])) {
        return Err(MultiparticleError::NotSymmetric);
    }
    let states = state_count(d, n, DEFAULT_STATE_CAP)?;
    if n < 2 {
        return Ok(Potential::zeros(states));
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let vals = multi_indices(d, n, states)
        .iter()
        .map(|x| {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    s += w[(x[i], x[j])];
                }
            }
            s / pairs
        })
        .collect::<Vec<_>>();
    Ok(Potential::from_slice(&vals)?)
}

/// `(1/N!) Σ_σ μ^σ`.
pub fn symmetrize_measure(mu: &ProbMeasure, sys: &TensorSystem) -> Result<ProbMeasure, MultiparticleError> {
    let sym = symmetrize_vector(mu.weights(), sys)?;
    Ok(ProbMeasure::normalized(sym)?)
}

/// Permutation average of any vector on `X^N`.
pub fn symmetrize_vector(f: &DVector<f64>, sys: &TensorSystem) -> Result<DVector<f64>, MultiparticleError> {
    check_dim(sys.states(), f.len())?;
    let perms = permutations(sys.particles());
    let mut acc = DVector::zeros(sys.states());
    for sigma in &perms {
        acc += sys.permute(f, sigma)?;
    }
    Ok(acc / perms.len() as f64)
}

/// Marginal on the first coordinate.
pub fn marginal(mu: &ProbMeasure, sys: &TensorSystem) -> Result<ProbMeasure, MultiparticleError> {
    marginal_coordinate(mu, sys, 0)
}

/// Marginal on coordinate `k` (0-based).
pub fn marginal_coordinate(mu: &ProbMeasure, sys: &TensorSystem, k: usize) -> Result<ProbMeasure, MultiparticleError> {
    check_dim(sys.states(), mu.len())?;
    if k >= sys.particles() {
        return Err(MultiparticleError::DimensionMismatch { expected: sys.particles(), found: k + 1 });
    }
    let mut rho = DVector::zeros(sys.single_dim());
    for (flat, &w) in mu.weights().iter().enumerate() {
        rho[sys.multi(flat)[k]] += w;
    }
    Ok(ProbMeasure::normalized(rho)?)
}

/// Invariance under every coordinate permutation within `tol`.
pub fn is_symmetric(f: &DVector<f64>, sys: &TensorSystem, tol: f64) -> Result<bool, MultiparticleError> {
    check_dim(sys.states(), f.len())?;
    for sigma in permutations(sys.particles()) {
        if (sys.permute(f, &sigma)? - f).amax() > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q1() -> Generator {
        Generator::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap()
    }

    #[test]
    fn one_particle_is_identity() {
        let sys = kronecker_sum(&q1(), 1).unwrap();
        assert_eq!(sys.generator(), &q1());
        let v = Potential::from_slice(&[0.3, -1.0]).unwrap();
        assert_eq!(separable_potential(&v, 1).unwrap(), v);
    }

    #[test]
    fn two_particle_sparsity() {
        let sys = kronecker_sum(&q1(), 2).unwrap();
        let r = sys.generator().rates();
        let off = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).filter(|&(i, j)| i != j && r[(i, j)] != 0.0).count();
        // Each of the 4 states has N·(d−1) = 2 neighbours.
        assert_eq!(off, 8);
        // (0,0) -> (0,1) at rate Q1[0][1] = 1; (0,0) -> (1,1) forbidden.
        assert_eq!(r[(0, 1)], 1.0);
        assert_eq!(r[(0, 2)], 1.0);
        assert_eq!(r[(0, 3)], 0.0);
        assert_eq!(r[(3, 3)], -4.0);
    }

    #[test]
    fn state_cap_enforced() {
        assert!(matches!(
            kronecker_sum_with_cap(&q1(), 5, 16),
            Err(MultiparticleError::StateSpaceTooLarge { d: 2, n: 5, cap: 16 })
        ));
        assert!(matches!(kronecker_sum(&q1(), 0), Err(MultiparticleError::BadParticleCount(0))));
    }

    #[test]
    fn separable_examples() {
        let v = Potential::from_slice(&[0.0, 1.0]).unwrap();
        let big = separable_potential(&v, 2).unwrap();
        assert_eq!(big.values().as_slice(), &[0.0, 0.5, 0.5, 1.0]);
        let c = separable_potential(&Potential::constant(3, 2.0), 3).unwrap();
        assert!(c.values().iter().all(|&x| (x - 2.0).abs() < 1e-15));
        let sys = kronecker_sum(&q1(), 2).unwrap();
        assert!(is_symmetric(big.values(), &sys, 0.0).unwrap());
    }

    #[test]
    fn indicator_is_not_symmetric() {
        let sys = kronecker_sum(&q1(), 2).unwrap();
        let f = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
        assert!(!is_symmetric(&f, &sys, 1e-12).unwrap());
    }

    #[test]
    fn symmetrize_examples() {
        let sys = kronecker_sum(&q1(), 2).unwrap();
        let delta = ProbMeasure::dirac(4, 1);
        let sym = symmetrize_measure(&delta, &sys).unwrap();
        assert_eq!(sym.weights().as_slice(), &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(symmetrize_measure(&sym, &sys).unwrap(), sym);
    }

    #[test]
    fn marginal_examples() {
        let sys = kronecker_sum(&q1(), 2).unwrap();
        let mu = ProbMeasure::from_slice(&[0.5, 0.3, 0.1, 0.1]).unwrap();
        let rho = marginal(&mu, &sys).unwrap();
        assert!((rho.weights()[0] - 0.8).abs() < 1e-15 && (rho.weights()[1] - 0.2).abs() < 1e-15);
        let r = ProbMeasure::from_slice(&[0.25, 0.75]).unwrap();
        let product = ProbMeasure::from_slice(&[0.0625, 0.1875, 0.1875, 0.5625]).unwrap();
        assert!(marginal(&product, &sys).unwrap().tv_distance(&r) < 1e-15);
    }

    #[test]
    fn pairwise_potential_averages_pairs() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let v0 = pairwise_potential(&w, 3).unwrap();
        // (0,0,1): pairs (0,0),(0,1),(0,1) -> (1 + 0 + 0)/3.
        let sys = kronecker_sum(&q1(), 3).unwrap();
        assert!((v0.values()[sys.flat(&[0, 0, 1])] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v0.values()[sys.flat(&[1, 1, 1])] - 3.0).abs() < 1e-15);
        assert!(is_symmetric(v0.values(), &sys, 0.0).unwrap());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        assert_eq!(pairwise_potential(&asym, 2), Err(MultiparticleError::NotSymmetric));
    }

    #[test]
    fn orbits_of_two_particles() {
        let q = Generator::from_rows(&[vec![-2.0, 1.0, 1.0], vec![1.0, -2.0, 1.0], vec![1.0, 1.0, -2.0]]).unwrap();
        let sys = kronecker_sum(&q, 2).unwrap();
        let orbits = sys.orbits();
        assert_eq!(orbits.len(), 6);
        assert_eq!(orbits.iter().map(|o| o.members.len()).sum::<usize>(), 9);
        assert_eq!(orbits[1].members, vec![1, 3]);
        assert_eq!(orbits[1].counts, vec![1, 1, 0]);
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(permutations(1), vec![vec![0]]);
    }
}
