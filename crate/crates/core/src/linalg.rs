//! Thin singular value decomposition by one-sided Jacobi rotations. Stays
//! accurate on exactly rank-deficient matrices.

use nalgebra::{DMatrix, DVector};

use crate::scalar::{abs, from_usize, lit, Real};

const MAX_SWEEPS: usize = 100;

/// `A = U diag(σ) Vᵀ` with `σ` nonincreasing. Columns of `U` paired with a
/// zero singular value are zero.
#[derive(Clone, Debug)]
pub struct Svd<T: Real> {
    pub u: DMatrix<T>,
    pub singular_values: DVector<T>,
    pub v_t: DMatrix<T>,
}

impl<T: Real> Svd<T> {
    pub fn new(a: &DMatrix<T>) -> Self {
        if a.nrows() >= a.ncols() {
            let (u, s, v) = jacobi(a.clone());
            Self { u, singular_values: s, v_t: v.transpose() }
        } else {
            let (u, s, v) = jacobi(a.transpose());
            Self { u: v, singular_values: s, v_t: u.transpose() }
        }
    }

    pub fn recompose(&self) -> DMatrix<T> {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * &self.v_t
    }

    /// Singular values above `cutoff` are inverted, the rest dropped.
    pub fn pseudo_inverse(&self, cutoff: T) -> DMatrix<T> {
        let inv = self.singular_values.map(|s| if s > cutoff { T::one() / s } else { T::zero() });
        self.v_t.transpose() * DMatrix::from_diagonal(&inv) * self.u.transpose()
    }

    pub fn solve(&self, b: &DVector<T>, cutoff: T) -> DVector<T> {
        let mut c = self.u.transpose() * b;
        for (k, s) in self.singular_values.iter().enumerate() {
            c[k] = if *s > cutoff { c[k] / *s } else { T::zero() };
        }
        self.v_t.transpose() * c
    }

    pub fn top(&self) -> T {
        self.singular_values.get(0).copied().unwrap_or_else(T::zero)
    }
}

pub fn singular_values<T: Real>(a: &DMatrix<T>) -> DVector<T> {
    Svd::new(a).singular_values
}

/// Moore-Penrose pseudo-inverse, dropping singular values at or below
/// `rel_cutoff · σ_max`.
pub fn pseudo_inverse<T: Real>(a: &DMatrix<T>, rel_cutoff: T) -> DMatrix<T> {
    let svd = Svd::new(a);
    svd.pseudo_inverse(rel_cutoff * svd.top())
}

/// Requires `nrows ≥ ncols`. Returns `(U, σ, V)` sorted by `σ`.
fn jacobi<T: Real>(mut w: DMatrix<T>) -> (DMatrix<T>, DVector<T>, DMatrix<T>) {
    let (m, n) = w.shape();
    let mut v = DMatrix::<T>::identity(n, n);
    let tol = T::default_epsilon() * from_usize::<T>(m.max(1));
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = w.column(i).norm_squared();
                let beta = w.column(j).norm_squared();
                let gamma = w.column(i).dot(&w.column(j));
                if gamma == T::zero() || abs(gamma) <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = if abs(zeta) > lit(1e100) {
                    T::one() / (zeta + zeta)
                } else {
                    let sign = if zeta < T::zero() { -T::one() } else { T::one() };
                    sign / (abs(zeta) + (T::one() + zeta * zeta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<T> = w.column_iter().map(|c| c.norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut u = DMatrix::zeros(m, n);
    let mut vs = DMatrix::zeros(n, n);
    let s = DVector::from_fn(n, |k, _| norms[order[k]]);
    for (k, &idx) in order.iter().enumerate() {
        if s[k] > T::zero() {
            u.set_column(k, &(w.column(idx) / s[k]));
        }
        vs.set_column(k, &v.column(idx));
    }
    (u, s, vs)
}

fn rotate<T: Real>(a: &mut DMatrix<T>, i: usize, j: usize, c: T, s: T) {
    for r in 0..a.nrows() {
        let x = a[(r, i)];
        let y = a[(r, j)];
        a[(r, i)] = c * x - s * y;
        a[(r, j)] = s * x + c * y;
    }
}
