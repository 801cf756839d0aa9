//! Finite-state Markov generators and potentials.
//!
//! A [`Generator`] is a rate matrix `Q` with nonnegative off-diagonal entries,
//! zero row sums and a connected (undirected) adjacency graph. The carré du
//! champ `Γ(g) = L(g²) − 2gLg` and the structural conditions used by the
//! uniqueness results live here as well.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default row-sum tolerance, relative to `max(1, max|Q|)`.
pub const DEFAULT_ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("rate matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("rate matrix is empty")]
    Empty,
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("negative off-diagonal rate {value} at ({row}, {col})")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, not zero")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("adjacency graph is disconnected: components {components:?}")]
    GraphDisconnected { components: Vec<Vec<usize>> },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Validated rate matrix on `{0, …, d−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    rates: DMatrix<f64>,
}

impl Generator {
    /// Validates with the default row-sum tolerance.
    pub fn new(raw: DMatrix<f64>) -> Result<Self, GeneratorError> {
        validate_generator(&raw, DEFAULT_ROW_TOL)
    }

    /// Builds a generator from row-major nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GeneratorError> {
        Self::new(matrix_from_rows(rows)?)
    }

    pub fn dim(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn into_rates(self) -> DMatrix<f64> {
        self.rates
    }

    /// `max(1, max|Q|)`, the reference scale for absolute tolerances.
    pub fn scale(&self) -> f64 {
        matrix_scale(&self.rates)
    }

    /// `Lg`.
    pub fn apply(&self, g: &DVector<f64>) -> Result<DVector<f64>, GeneratorError> {
        check_len(self.dim(), g.len())?;
        Ok(&self.rates * g)
    }

    /// Stationary distribution: the unique probability vector with `πᵀQ = 0`.
    pub fn stationary(&self) -> DVector<f64> {
        let d = self.dim();
        if d == 1 {
            return DVector::from_element(1, 1.0);
        }
        // Replace one equation of Qᵀπ = 0 by Σπ = 1.
        let mut a = self.rates.transpose();
        let mut b = DVector::zeros(d);
        for j in 0..d {
            a[(d - 1, j)] = 1.0;
        }
        b[d - 1] = 1.0;
        let mut pi = a.lu().solve(&b).unwrap_or_else(|| DVector::from_element(d, 1.0 / d as f64));
        pi.iter_mut().for_each(|p| *p = p.max(0.0));
        let s = pi.sum();
        pi / s
    }
}

/// Real-valued function on the state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential(DVector<f64>);

impl Potential {
    pub fn new(values: DVector<f64>) -> Result<Self, GeneratorError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GeneratorError::NonFinite { row: i, col: 0 });
        }
        Ok(Potential(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, GeneratorError> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(d: usize) -> Self {
        Potential(DVector::zeros(d))
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Potential(DVector::from_element(d, c))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.min()
    }

    pub fn max(&self) -> f64 {
        self.0.max()
    }

    pub fn shifted(&self, c: f64) -> Potential {
        Potential(self.0.add_scalar(c))
    }

    pub fn add(&self, other: &Potential) -> Potential {
        Potential(&self.0 + &other.0)
    }

    /// Same potential with mean zero.
    pub fn centered(&self) -> Potential {
        let m = self.0.mean();
        self.shifted(-m)
    }
}

pub(crate) fn matrix_scale(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()))
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<(), GeneratorError> {
    if expected != found {
        return Err(GeneratorError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Row-major nested rows into a matrix; rows must be rectangular and square.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, GeneratorError> {
    let n = rows.len();
    if n == 0 {
        return Err(GeneratorError::Empty);
    }
    for r in rows {
        if r.len() != n {
            return Err(GeneratorError::NotSquare { rows: n, cols: r.len() });
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Checks the generator invariants and re-zeros row sums through the diagonal.
///
/// Row sums within `tol_row · max(1, max|Q|)` are repaired by setting
/// `Q[i][i] = −Σ_{j≠i} Q[i][j]`; larger violations are errors.
pub fn validate_generator(raw: &DMatrix<f64>, tol_row: f64) -> Result<Generator, GeneratorError> {
    let (rows, cols) = raw.shape();
    if rows != cols {
        return Err(GeneratorError::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(GeneratorError::Empty);
    }
    for i in 0..rows {
        for j in 0..cols {
            if !raw[(i, j)].is_finite() {
                return Err(GeneratorError::NonFinite { row: i, col: j });
            }
        }
    }
    for i in 0..rows {
        for j in 0..cols {
            if i != j && raw[(i, j)] < 0.0 {
                return Err(GeneratorError::NegativeOffDiagonal { row: i, col: j, value: raw[(i, j)] });
            }
        }
    }
    let scale = matrix_scale(raw);
    let mut rates = raw.clone();
    for i in 0..rows {
        let sum: f64 = raw.row(i).iter().sum();
        if sum.abs() > tol_row * scale {
            return Err(GeneratorError::RowSumNonzero { row: i, sum });
        }
        let off: f64 = (0..cols).filter(|&j| j != i).map(|j| raw[(i, j)]).sum();
        rates[(i, i)] = -off;
    }
    let components = support_components(raw);
    if components.len() > 1 {
        return Err(GeneratorError::GraphDisconnected { components });
    }
    Ok(Generator { rates })
}

/// Connected components of the undirected support graph, `{i,j}` an edge when
/// `Q[i][j] > 0` or `Q[j][i] > 0`. Components are sorted by smallest member.
pub fn support_components(raw: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = raw.nrows().min(raw.ncols());
    let mut label = vec![usize::MAX; n];
    let mut components = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![start];
        label[start] = id;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if j != i && label[j] == usize::MAX && (raw[(i, j)] > 0.0 || raw[(j, i)] > 0.0) {
                    label[j] = id;
                    members.push(j);
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components
}

/// Carré du champ `Γ(g)[i] = Σ_j Q[i][j]·(g[j] − g[i])²`.
pub fn carre_du_champ(q: &Generator, g: &DVector<f64>) -> Result<DVector<f64>, GeneratorError> {
    let d = q.dim();
    check_len(d, g.len())?;
    let rates = q.rates();
    Ok(DVector::from_fn(d, |i, _| {
        (0..d)
            .filter(|&j| j != i)
            .map(|j| {
                let diff = g[j] - g[i];
                rates[(i, j)] * diff * diff
            })
            .sum()
    }))
}

/// Middle term `L(fg²) − 2gL(fg) + g²Lf` of the Γ sandwich, by direct matrix arithmetic.
pub fn gamma_middle(q: &Generator, f: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>, GeneratorError> {
    check_len(q.dim(), f.len())?;
    check_len(q.dim(), g.len())?;
    let fg = f.component_mul(g);
    let fgg = fg.component_mul(g);
    let l_fgg = q.apply(&fgg)?;
    let l_fg = q.apply(&fg)?;
    let l_f = q.apply(f)?;
    let gg = g.component_mul(g);
    Ok(l_fgg - 2.0 * g.component_mul(&l_fg) + gg.component_mul(&l_f))
}

/// `max f·Γ(g) ≥ L(fg²) − 2gL(fg) + g²Lf ≥ min f·Γ(g)` entrywise, within
/// `1e-10` relative to the magnitude of the terms involved.
pub fn gamma_sandwich_check(q: &Generator, f: &DVector<f64>, g: &DVector<f64>) -> Result<bool, GeneratorError> {
    let middle = gamma_middle(q, f, g)?;
    let gamma = carre_du_champ(q, g)?;
    let (fmin, fmax) = (f.min(), f.max());
    let fnorm = f.amax().max(1.0);
    let gnorm = g.amax().max(1.0);
    let tol = 1e-10 * q.scale() * fnorm * gnorm * gnorm;
    Ok(middle
        .iter()
        .zip(gamma.iter())
        .all(|(&m, &gam)| m <= fmax * gam + tol && m >= fmin * gam - tol))
}

/// Nondegeneracy on raw matrices: the undirected support graph is
/// connected, which on a finite space is exactly "Γ(g) ≡ 0 forces g constant".
pub fn check_condition_d(raw: &DMatrix<f64>) -> bool {
    support_components(raw).len() <= 1
}

/// Uniformity constant of condition (A) at time `t`:
/// `ε = min_j (min_x P[x][j] / max_y P[y][j])` with `P = exp(tQ)`.
pub fn check_condition_a(q: &Generator, t: f64) -> Result<f64, crate::semigroup::SemigroupError> {
    let p = crate::semigroup::expm(&(q.rates() * t))?;
    let d = q.dim();
    let mut eps = 1.0_f64;
    for j in 0..d {
        let col = p.column(j);
        let (lo, hi) = (col.min(), col.max());
        if hi > 0.0 {
            eps = eps.min(lo / hi);
        } else {
            eps = 0.0;
        }
    }
    Ok(eps)
}
