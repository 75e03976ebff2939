use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::bellman_matrix;
use super::power::sorted_eigen;
use crate::error::{shape_err, Result};
use crate::features::StateActionDist;
use crate::linalg::{singular_values, Svd};
use crate::mdp::TabularMdp;
use crate::scalar::{abs, lit, max, Real};

/// Relative singular-value gap below which the spectrum counts as repeated.
const DEGENERACY_GAP: f64 = 1e-6;

/// Numerical comparison of the Bellman-matrix SVD against the factors built
/// from `Φ_P = diag(√ρ)Φ` and `Θ̃_P = Θ̃ diag(√ν)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SvdReport<T: Real> {
    pub dim: usize,
    /// All singular values of the augmented Bellman matrix, nonincreasing.
    pub singular_values: Vec<T>,
    /// Largest singular value beyond index `d` (0 when there is none).
    pub tail_max: T,
    /// `Λ₀`: eigenvalues of `Λ = Φ_PᵀΦ_P`, nonincreasing.
    pub eigenvalues: Vec<T>,
    /// `max_k |σ_k − √λ_k|` over the top `d`.
    pub sv_gap: T,
    /// `‖Φ_P − ŨΣ_dKᵀ‖_F` after sign matching.
    pub phi_residual: T,
    /// `‖Θ̃_P − KΣ_dṼᵀ‖_F` after sign matching.
    pub theta_residual: T,
    /// `‖Λ₁ − Λ₂‖_F` at `Φ = ŨΣ_dKᵀ`, `Θ̃ = KΣ_dṼᵀ`.
    pub covariance_gap: T,
    /// `‖T̄Q − Φ_PΘ̃_P‖_F`; zero exactly when `T Q_θ = Φθ̃(θ)` on the grid.
    pub factorization_residual: T,
    /// `max_k |σ_k − √eig_k(Λ₁Λ₂)|` with `Λ₁ = Φ_PᵀΦ_P`, `Λ₂ = Θ̃_PΘ̃_Pᵀ`.
    pub product_sv_gap: T,
    /// `‖T̄Q − (ŨΣ_dKᵀ)(KΣ_dṼᵀ)‖_F`.
    pub constructed_product_residual: T,
    /// `‖T̄Q − (ŨΣ_d^{1/2})(Σ_d^{1/2}Ṽᵀ)‖_F`.
    pub balanced_residual: T,
    /// Largest principal sine between `span Φ_P` and `span Ũ`, and between
    /// the row spaces of `Θ̃_P` and `Ṽᵀ`.
    pub subspace_residual: T,
    /// Two of the top `d + 1` singular values coincide to relative `1e-6`.
    pub degenerate_spectrum: bool,
}

impl<T: Real> SvdReport<T> {
    /// Factor residuals used for pass/fail: the literal ones, or the
    /// subspace residual when the spectrum is degenerate.
    pub fn factor_residual(&self) -> T {
        if self.degenerate_spectrum {
            self.subspace_residual
        } else {
            max(self.phi_residual, self.theta_residual)
        }
    }

    /// All claimed relations within `tol`.
    pub fn passes_literal(&self, tol: T) -> bool {
        self.sv_gap <= tol && self.tail_max <= tol && self.factor_residual() <= tol && self.covariance_gap <= tol
    }

    /// The relations that hold whenever `T̄Q = Φ_PΘ̃_P`: rank, product
    /// spectrum, balanced factorization and subspaces.
    pub fn passes_consistent(&self, tol: T) -> bool {
        self.tail_max <= tol
            && self.factorization_residual <= tol
            && self.product_sv_gap <= tol
            && self.balanced_residual <= tol
            && self.subspace_residual <= tol
            && self.covariance_gap <= tol
    }
}

fn orthonormal_basis<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let svd = Svd::new(m);
    let top = svd.top();
    let u = svd.u;
    let keep: Vec<_> = (0..svd.singular_values.len())
        .filter(|&k| top > T::zero() && svd.singular_values[k] > lit::<T>(1e-12) * top)
        .map(|k| u.column(k).into_owned())
        .collect();
    if keep.is_empty() {
        DMatrix::zeros(m.nrows(), 0)
    } else {
        DMatrix::from_columns(&keep)
    }
}

fn one_sided_sine<T: Real>(qa: &DMatrix<T>, qb: &DMatrix<T>) -> T {
    if qa.ncols() == 0 {
        return T::zero();
    }
    let resid = qa - qb * (qb.transpose() * qa);
    singular_values(&resid).iter().copied().fold(T::zero(), max)
}

/// Sine of the largest principal angle between the column spaces of `a`
/// and `b` (symmetrized, so unequal ranks give 1).
pub fn max_principal_sine<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let qa = orthonormal_basis(a);
    let qb = orthonormal_basis(b);
    max(one_sided_sine(&qa, &qb), one_sided_sine(&qb, &qa))
}

fn sym_sqrt<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let (vals, vecs) = sorted_eigen(m);
    let mut scaled = vecs.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= max(vals[k], T::zero()).sqrt();
    }
    scaled * vecs.transpose()
}

/// SVD of the augmented Bellman matrix compared against the given factors.
pub fn svd_verify<T: Real>(
    mdp: &TabularMdp<T>,
    features: &DMatrix<T>,
    outputs: &DMatrix<T>,
    grid: &DMatrix<T>,
    rho: &StateActionDist<T>,
    nu: &DVector<T>,
) -> Result<SvdReport<T>> {
    if outputs.shape() != grid.shape() {
        return Err(shape_err(format!("outputs {:?}", grid.shape()), format!("{:?}", outputs.shape())));
    }
    let b = bellman_matrix(mdp, features, grid, rho, nu)?;
    let d = features.ncols();
    let sr = rho.probs().map(|x| x.sqrt());
    let sn = nu.map(|x| x.sqrt());
    let mut phi_p = features.clone();
    for (i, mut row) in phi_p.row_iter_mut().enumerate() {
        row *= sr[i];
    }
    let mut theta_p = outputs.clone();
    for (j, mut col) in theta_p.column_iter_mut().enumerate() {
        col *= sn[j];
    }

    let svd = Svd::new(&b);
    let (u_all, vt_all) = (&svd.u, &svd.v_t);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &c| {
        svd.singular_values[c]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&c))
    });
    let sigma: Vec<T> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let k_top = d.min(sigma.len());
    let pad = |k: usize| if k < sigma.len() { sigma[k] } else { T::zero() };
    let tail_max = sigma.iter().skip(d).copied().fold(T::zero(), max);

    let mut u = DMatrix::zeros(b.nrows(), d);
    let mut vt = DMatrix::zeros(d, b.ncols());
    for (k, &idx) in order.iter().take(k_top).enumerate() {
        u.set_column(k, &u_all.column(idx));
        vt.set_row(k, &vt_all.row(idx));
    }
    let s_d = DVector::from_fn(d, |k, _| pad(k));

    let lambda = phi_p.transpose() * &phi_p;
    let (lambda0, kmat) = sorted_eigen(&lambda);
    let sv_gap = (0..d).fold(T::zero(), |acc, k| max(acc, abs(s_d[k] - max(lambda0[k], T::zero()).sqrt())));

    // Joint sign per direction; the separable residual is minimized by the
    // sign of the combined alignment.
    let mut signs = DVector::from_element(d, T::one());
    for k in 0..d {
        let kk = kmat.column(k);
        let align = u.column(k).dot(&(&phi_p * kk)) + kk.dot(&(&theta_p * vt.row(k).transpose()));
        if align < T::zero() {
            signs[k] = -T::one();
        }
    }
    let mut us = u.clone();
    let mut vts = vt.clone();
    for k in 0..d {
        us.column_mut(k).scale_mut(signs[k]);
        vts.row_mut(k).scale_mut(signs[k]);
    }
    let diag = DMatrix::from_diagonal(&s_d);
    let phi_c = &us * &diag * kmat.transpose();
    let theta_c = &kmat * &diag * &vts;
    let phi_residual = (&phi_p - &phi_c).norm();
    let theta_residual = (&theta_p - &theta_c).norm();
    let lambda1_c = phi_c.transpose() * &phi_c;
    let lambda2_c = &theta_c * theta_c.transpose();
    let covariance_gap = (lambda1_c - lambda2_c).norm();

    let factorization_residual = (&b - &phi_p * &theta_p).norm();
    let lambda2 = &theta_p * theta_p.transpose();
    let root = sym_sqrt(&lambda);
    let (prod_eig, _) = sorted_eigen(&(&root * lambda2 * &root));
    let product_sv_gap = (0..d).fold(T::zero(), |acc, k| max(acc, abs(s_d[k] - max(prod_eig[k], T::zero()).sqrt())));
    let constructed_product_residual = (&b - &phi_c * &theta_c).norm();
    let half = DMatrix::from_diagonal(&s_d.map(|s| s.sqrt()));
    let balanced_residual = (&b - (&u * &half) * (&half * &vt)).norm();
    let subspace_residual = max(
        max_principal_sine(&phi_p, &u),
        max_principal_sine(&theta_p.transpose(), &vt.transpose()),
    );

    let top = pad(0);
    let degenerate_spectrum = top > T::zero()
        && (0..k_top).any(|k| k + 1 < sigma.len().min(d + 1) && (sigma[k] - sigma[k + 1]) < lit::<T>(DEGENERACY_GAP) * top);

    Ok(SvdReport {
        dim: d,
        singular_values: sigma,
        tail_max,
        eigenvalues: lambda0.iter().copied().collect(),
        sv_gap,
        phi_residual,
        theta_residual,
        covariance_gap,
        factorization_residual,
        product_sv_gap,
        constructed_product_residual,
        balanced_residual,
        subspace_residual,
        degenerate_spectrum,
    })
}
