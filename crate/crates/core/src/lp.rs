//! Dense two-phase simplex for small standard-form linear programs
//! `min cᵀx  s.t.  Ax = b, x ≥ 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};
use crate::scalar::{abs, from_usize, lit, Real};

/// Consecutive degenerate pivots before switching from Dantzig's rule to
/// Bland's rule.
const DEGENERATE_LIMIT: usize = 50;

#[derive(Clone, Debug)]
pub struct LpSolution<T: Real> {
    pub x: DVector<T>,
    pub objective: T,
    /// Simplex multipliers `y` with `Aᵀy ≤ c` and `bᵀy = cᵀx`; zero on
    /// constraints found to be redundant.
    pub duals: DVector<T>,
    pub pivots: usize,
}

struct Tableau<T: Real> {
    /// `rows x (cols + 1)`; the last column holds the right-hand side.
    body: DMatrix<T>,
    /// Reduced costs, with the negated objective in the last slot.
    cost: DVector<T>,
    basis: Vec<usize>,
    tol: T,
    pivots: usize,
}

impl<T: Real> Tableau<T> {
    fn rhs_col(&self) -> usize {
        self.body.ncols() - 1
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let rhs = self.rhs_col();
        let p = self.body[(row, col)];
        for j in 0..=rhs {
            self.body[(row, j)] /= p;
        }
        for i in 0..self.body.nrows() {
            if i == row {
                continue;
            }
            let f = self.body[(i, col)];
            if f != T::zero() {
                for j in 0..=rhs {
                    let v = self.body[(row, j)];
                    self.body[(i, j)] -= f * v;
                }
            }
        }
        let f = self.cost[col];
        if f != T::zero() {
            for j in 0..=rhs {
                self.cost[j] -= f * self.body[(row, j)];
            }
        }
        self.basis[row] = col;
        self.pivots += 1;
    }

    fn set_costs(&mut self, costs: &[T]) {
        let rhs = self.rhs_col();
        self.cost.fill(T::zero());
        for (j, c) in costs.iter().enumerate() {
            self.cost[j] = *c;
        }
        for (i, &bj) in self.basis.iter().enumerate() {
            let cb = if bj < costs.len() { costs[bj] } else { T::zero() };
            if cb != T::zero() {
                for j in 0..=rhs {
                    self.cost[j] -= cb * self.body[(i, j)];
                }
            }
        }
    }

    /// Runs simplex iterations over columns `< allowed`.
    fn optimize(&mut self, allowed: usize, max_pivots: usize) -> Result<()> {
        let rhs = self.rhs_col();
        let mut degenerate = 0;
        loop {
            let bland = degenerate >= DEGENERATE_LIMIT;
            let mut enter = None;
            let mut best = -self.tol;
            for j in 0..allowed {
                let r = self.cost[j];
                if r < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = r;
                }
            }
            let Some(col) = enter else { return Ok(()) };
            let mut leave: Option<(usize, T)> = None;
            for i in 0..self.body.nrows() {
                let a = self.body[(i, col)];
                if a > self.tol {
                    let ratio = self.body[(i, rhs)] / a;
                    let better = match leave {
                        None => true,
                        Some((l, best_ratio)) => {
                            ratio < best_ratio - self.tol
                                || (ratio <= best_ratio + self.tol && self.basis[i] < self.basis[l])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((row, ratio)) = leave else {
                return Err(Error::LinearProgram("objective is unbounded below".into()));
            };
            if ratio <= self.tol {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(row, col);
            if self.pivots > max_pivots {
                return Err(Error::LinearProgram(format!("no convergence after {max_pivots} pivots")));
            }
        }
    }
}

/// Solves `min cᵀx` subject to `Ax = b`, `x ≥ 0`.
pub fn solve_standard_form<T: Real>(
    a: &DMatrix<T>,
    b: &DVector<T>,
    c: &DVector<T>,
) -> Result<LpSolution<T>> {
    let (m, n) = a.shape();
    if b.len() != m || c.len() != n {
        return Err(shape_err(format!("b[{m}], c[{n}]"), format!("b[{}], c[{}]", b.len(), c.len())));
    }
    if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::LinearProgram("non-finite problem data".into()));
    }
    let scale = a.iter().chain(b.iter()).fold(T::one(), |acc, v| crate::scalar::max(acc, abs(*v)));
    let tol = lit::<T>(1e4) * T::default_epsilon() * scale;
    let max_pivots = 50 * (m + n) + 1000;

    let mut body = DMatrix::zeros(m, n + m + 1);
    for i in 0..m {
        let sign = if b[i] < T::zero() { -T::one() } else { T::one() };
        for j in 0..n {
            body[(i, j)] = a[(i, j)] * sign;
        }
        body[(i, n + i)] = T::one();
        body[(i, n + m)] = b[i] * sign;
    }
    let mut tab = Tableau {
        body,
        cost: DVector::zeros(n + m + 1),
        basis: (n..n + m).collect(),
        tol,
        pivots: 0,
    };

    let mut phase_one = vec![T::zero(); n + m];
    for v in phase_one.iter_mut().skip(n) {
        *v = T::one();
    }
    tab.set_costs(&phase_one);
    tab.optimize(n + m, max_pivots)?;
    let infeasibility = -tab.cost[n + m];
    if infeasibility > tol * from_usize::<T>(m.max(1)) {
        return Err(Error::LinearProgram(format!("infeasible (phase-one value {infeasibility})")));
    }

    // Drive remaining artificials out of the basis; rows where that is
    // impossible are linearly dependent on the others and are dropped.
    let mut keep = vec![true; m];
    for i in 0..m {
        if tab.basis[i] < n {
            continue;
        }
        let col = (0..n).find(|&j| abs(tab.body[(i, j)]) > tol);
        match col {
            Some(j) => tab.pivot(i, j),
            None => keep[i] = false,
        }
    }
    let kept: Vec<usize> = (0..m).filter(|&i| keep[i]).collect();
    if kept.len() < m {
        let mut body = DMatrix::zeros(kept.len(), n + m + 1);
        for (r, &i) in kept.iter().enumerate() {
            body.set_row(r, &tab.body.row(i));
        }
        tab.basis = kept.iter().map(|&i| tab.basis[i]).collect();
        tab.body = body;
    }

    let costs: Vec<T> = c.iter().copied().chain(std::iter::repeat_n(T::zero(), m)).collect();
    tab.set_costs(&costs);
    tab.optimize(n, max_pivots)?;

    let rhs = tab.rhs_col();
    let mut x = DVector::zeros(n);
    for (i, &bj) in tab.basis.iter().enumerate() {
        if bj < n {
            x[bj] = tab.body[(i, rhs)];
        }
    }
    let objective = c.dot(&x);

    let k = kept.len();
    let mut basis_t = DMatrix::zeros(k, k);
    let mut c_b = DVector::zeros(k);
    for (col, &bj) in tab.basis.iter().enumerate() {
        c_b[col] = c[bj];
        for (row, &i) in kept.iter().enumerate() {
            basis_t[(col, row)] = a[(i, bj)];
        }
    }
    let y_kept = if k == 0 {
        DVector::zeros(0)
    } else {
        basis_t
            .lu()
            .solve(&c_b)
            .ok_or_else(|| Error::LinearProgram("final basis is singular".into()))?
    };
    let mut duals = DVector::zeros(m);
    for (r, &i) in kept.iter().enumerate() {
        duals[i] = y_kept[r];
    }
    Ok(LpSolution {
        x,
        objective,
        duals,
        pivots: tab.pivots,
    })
}
