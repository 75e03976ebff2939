use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SpectralProblem;
use crate::error::{shape_err, Result};
use crate::features::{covariance, param_covariance, ParamMap};
use crate::scalar::{lit, sup_norm, Real};

/// The quantities held fixed inside one SBM window: `Λ₁,t`, `Λ₂,t`, `Φ_t`
/// and `Θ̃_t`.
#[derive(Clone, Debug)]
pub struct SbmRefs<T: Real> {
    pub lambda1: DMatrix<T>,
    pub lambda2: DMatrix<T>,
    pub features: DMatrix<T>,
    pub outputs: DMatrix<T>,
}

impl<T: Real> SbmRefs<T> {
    /// References taken from the iterate itself, with exact covariances.
    pub fn current(state: &super::SpectralState<T>) -> Result<Self> {
        let outputs = state.outputs()?;
        Ok(Self {
            lambda1: covariance(&state.features, &state.problem.rho)?,
            lambda2: param_covariance(&outputs, &state.problem.nu)?,
            features: state.features.clone(),
            outputs,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SbmLossBreakdown<T: Real> {
    pub l1: T,
    pub l2: T,
    pub l_orth: T,
    pub total: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SbmTerm {
    L1,
    L2,
    Orth,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamGradient<T: Real> {
    Tabular(DMatrix<T>),
    Affine { a: DMatrix<T>, b: DVector<T> },
}

impl<T: Real> ParamGradient<T> {
    pub fn sup_norm(&self) -> T {
        match self {
            ParamGradient::Tabular(g) => sup_norm(g.iter().copied()),
            ParamGradient::Affine { a, b } => sup_norm(a.iter().chain(b.iter()).copied()),
        }
    }

    fn add(&mut self, other: &Self) {
        match (self, other) {
            (ParamGradient::Tabular(x), ParamGradient::Tabular(y)) => *x += y,
            (ParamGradient::Affine { a, b }, ParamGradient::Affine { a: a2, b: b2 }) => {
                *a += a2;
                *b += b2;
            }
            _ => unreachable!("gradients of one parameter map share a variant"),
        }
    }

    /// Applies `map ← map − step · gradient`.
    pub fn descend(&self, map: &mut ParamMap<T>, step: T) {
        match (map, self) {
            (ParamMap::Tabular { outputs }, ParamGradient::Tabular(g)) => *outputs -= g * step,
            (ParamMap::Affine { a, b }, ParamGradient::Affine { a: ga, b: gb }) => {
                *a -= ga * step;
                *b -= gb * step;
            }
            _ => unreachable!("gradient variant follows the parameter map"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SbmGradient<T: Real> {
    pub features: DMatrix<T>,
    pub params: ParamGradient<T>,
}

impl<T: Real> SbmGradient<T> {
    pub fn sup_norm(&self) -> T {
        crate::scalar::max(sup_norm(self.features.iter().copied()), self.params.sup_norm())
    }
}

fn scale_rows<T: Real>(m: &DMatrix<T>, w: &DVector<T>) -> DMatrix<T> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}

fn scale_cols<T: Real>(m: &DMatrix<T>, w: &DVector<T>) -> DMatrix<T> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= w[j];
    }
    out
}

fn off_diagonal<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let mut out = m.clone();
    out.fill_diagonal(T::zero());
    out
}

fn check<T: Real>(features: &DMatrix<T>, problem: &SpectralProblem<T>) -> Result<()> {
    if features.shape() != (problem.n_pairs(), problem.dim()) {
        return Err(shape_err(
            format!("features {}x{}", problem.n_pairs(), problem.dim()),
            format!("{}x{}", features.nrows(), features.ncols()),
        ));
    }
    Ok(())
}

/// `L₁ + L₂ + L_orth` with expectations as exact weighted sums.
///
/// `L₁(Φ) = Σ_i ρ_i φ_iᵀΛ₂,t φ_i − 2 Σ_ij ρ_i ν_j T_ij φ_iᵀθ̃_t,j`,
/// `L₂(Θ̃) = Σ_j ν_j θ̃_jᵀΛ₁,t θ̃_j − 2 Σ_ij ρ_i ν_j T_ij θ̃_jᵀφ_t,i`,
/// `L_orth = λ (Σ_{k≠l} (Θ̃ diag(ν) Θ̃ᵀ)_kl² + Σ_{k≠l} (Φᵀ diag(ρ) Φ)_kl²)`.
pub fn sbm_loss<T: Real>(
    features: &DMatrix<T>,
    params: &ParamMap<T>,
    refs: &SbmRefs<T>,
    problem: &SpectralProblem<T>,
    lambda_orth: T,
) -> Result<SbmLossBreakdown<T>> {
    check(features, problem)?;
    let outputs = params.outputs(&problem.grid)?;
    let rho = problem.rho.probs();
    let nu = &problem.nu;
    let two = lit::<T>(2.0);
    let weighted_t = scale_cols(&scale_rows(&problem.targets, rho), nu);

    let quad1 = (0..features.nrows()).fold(T::zero(), |acc, i| {
        let phi = features.row(i).transpose();
        acc + rho[i] * (phi.transpose() * &refs.lambda2 * &phi)[(0, 0)]
    });
    let cross1 = weighted_t.component_mul(&(features * &refs.outputs)).sum();
    let l1 = quad1 - two * cross1;

    let quad2 = (0..outputs.ncols()).fold(T::zero(), |acc, j| {
        let th = outputs.column(j);
        acc + nu[j] * (th.transpose() * &refs.lambda1 * th)[(0, 0)]
    });
    let cross2 = weighted_t.component_mul(&(&refs.features * &outputs)).sum();
    let l2 = quad2 - two * cross2;

    let g1 = off_diagonal(&covariance(features, &problem.rho)?);
    let g2 = off_diagonal(&param_covariance(&outputs, nu)?);
    let l_orth = lambda_orth * (g1.norm_squared() + g2.norm_squared());
    Ok(SbmLossBreakdown {
        l1,
        l2,
        l_orth,
        total: l1 + l2 + l_orth,
    })
}

fn chain_to_params<T: Real>(params: &ParamMap<T>, grad_outputs: DMatrix<T>, grid: &DMatrix<T>) -> ParamGradient<T> {
    match params {
        ParamMap::Tabular { .. } => ParamGradient::Tabular(grad_outputs),
        ParamMap::Affine { .. } => {
            let a = &grad_outputs * grid.transpose();
            let b = grad_outputs.column_sum();
            ParamGradient::Affine { a, b }
        }
    }
}

/// Gradient of a single SBM term.
pub fn sbm_term_gradient<T: Real>(
    term: SbmTerm,
    features: &DMatrix<T>,
    params: &ParamMap<T>,
    refs: &SbmRefs<T>,
    problem: &SpectralProblem<T>,
    lambda_orth: T,
) -> Result<SbmGradient<T>> {
    check(features, problem)?;
    let outputs = params.outputs(&problem.grid)?;
    let rho = problem.rho.probs();
    let nu = &problem.nu;
    let two = lit::<T>(2.0);
    let (gf, go) = match term {
        SbmTerm::L1 => {
            let inner = features * &refs.lambda2 - scale_cols(&problem.targets, nu) * refs.outputs.transpose();
            (scale_rows(&inner, rho) * two, DMatrix::zeros(outputs.nrows(), outputs.ncols()))
        }
        SbmTerm::L2 => {
            let inner = &refs.lambda1 * &outputs - refs.features.transpose() * scale_rows(&problem.targets, rho);
            (DMatrix::zeros(features.nrows(), features.ncols()), scale_cols(&inner, nu) * two)
        }
        SbmTerm::Orth => {
            let four = lit::<T>(4.0) * lambda_orth;
            let g1 = off_diagonal(&covariance(features, &problem.rho)?);
            let g2 = off_diagonal(&param_covariance(&outputs, nu)?);
            let gf = scale_rows(&(features * g1), rho) * four;
            let go = scale_cols(&(g2 * &outputs), nu) * four;
            (gf, go)
        }
    };
    Ok(SbmGradient {
        features: gf,
        params: chain_to_params(params, go, &problem.grid),
    })
}

/// Gradient of the full Lagrangian `L₁ + L₂ + L_orth`.
pub fn sbm_gradient<T: Real>(
    features: &DMatrix<T>,
    params: &ParamMap<T>,
    refs: &SbmRefs<T>,
    problem: &SpectralProblem<T>,
    lambda_orth: T,
) -> Result<SbmGradient<T>> {
    let mut total = sbm_term_gradient(SbmTerm::L1, features, params, refs, problem, lambda_orth)?;
    for term in [SbmTerm::L2, SbmTerm::Orth] {
        let g = sbm_term_gradient(term, features, params, refs, problem, lambda_orth)?;
        total.features += g.features;
        total.params.add(&g.params);
    }
    Ok(total)
}

/// `L_MSE = Σ_ij ρ_i ν_j (T_ij − φ_iᵀθ̃_j)²`.
pub fn mse_loss<T: Real>(features: &DMatrix<T>, params: &ParamMap<T>, problem: &SpectralProblem<T>) -> Result<T> {
    check(features, problem)?;
    let outputs = params.outputs(&problem.grid)?;
    let residual = &problem.targets - features * &outputs;
    let sq = residual.component_mul(&residual);
    Ok(scale_cols(&scale_rows(&sq, problem.rho.probs()), &problem.nu).sum())
}

pub fn mse_gradient<T: Real>(
    features: &DMatrix<T>,
    params: &ParamMap<T>,
    problem: &SpectralProblem<T>,
) -> Result<SbmGradient<T>> {
    check(features, problem)?;
    let outputs = params.outputs(&problem.grid)?;
    let residual = &problem.targets - features * &outputs;
    let weighted = scale_cols(&scale_rows(&residual, problem.rho.probs()), &problem.nu) * lit::<T>(-2.0);
    let gf = &weighted * outputs.transpose();
    let go = features.transpose() * &weighted;
    Ok(SbmGradient {
        features: gf,
        params: chain_to_params(params, go, &problem.grid),
    })
}
