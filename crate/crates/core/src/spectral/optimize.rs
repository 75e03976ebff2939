use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::loss::{mse_gradient, mse_loss, sbm_gradient, sbm_loss, SbmGradient, SbmRefs};
use super::power::eq8_residual;
use super::SpectralState;
use crate::error::{Error, Result};
use crate::features::{clip_feature_norms, covariance, param_covariance, CovarianceSlot, ParamMap};
use crate::scalar::{lit, to_f64, Real};

/// Consecutive loss increases (under fixed references) treated as divergence.
const DIVERGENCE_STREAK: usize = 10;

/// Relative loss increase attributed to rounding rather than divergence.
const ROUNDING_SLACK: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SbmOptions<T: Real> {
    pub step_size: T,
    pub max_iters: usize,
    /// Stop once the gradient ∞-norm is at most this.
    pub tol: T,
    pub lambda_orth: T,
    /// Gradient steps between refreshes of `Λ₁,t`, `Λ₂,t`, `Φ_t`, `Θ̃_t`.
    pub refresh_every: usize,
    /// Clip feature rows to the unit ball after each step.
    pub clip_rows: bool,
    /// Divide `step_size` by a curvature bound recomputed at every refresh.
    pub normalize_step: bool,
}

impl<T: Real> Default for SbmOptions<T> {
    fn default() -> Self {
        Self {
            step_size: lit(0.5),
            max_iters: 10_000,
            tol: lit(1e-8),
            lambda_orth: T::one(),
            refresh_every: 1,
            clip_rows: true,
            normalize_step: false,
        }
    }
}

/// One row of the per-iteration diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub pm_residual: f64,
    pub l1: f64,
    pub l2: f64,
    pub l_orth: f64,
    pub total: f64,
    pub lambda_gap: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct SbmRun<T: Real> {
    pub state: SpectralState<T>,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct MseRun<T: Real> {
    pub features: DMatrix<T>,
    pub param_map: ParamMap<T>,
    /// `L_MSE` before each step and at the final point.
    pub trace: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
}

fn refresh<T: Real>(state: &mut SpectralState<T>) -> Result<SbmRefs<T>> {
    let outputs = state.outputs()?;
    state.tracker = state
        .tracker
        .ema_update(&covariance(&state.features, &state.problem.rho)?, CovarianceSlot::Feature)?
        .ema_update(&param_covariance(&outputs, &state.problem.nu)?, CovarianceSlot::Param)?;
    Ok(SbmRefs {
        lambda1: state.tracker.lambda1.clone(),
        lambda2: state.tracker.lambda2.clone(),
        features: state.features.clone(),
        outputs,
    })
}

fn row_sum_norm<T: Real>(m: &DMatrix<T>) -> T {
    m.row_iter().fold(T::zero(), |acc, r| crate::scalar::max(acc, r.iter().fold(T::zero(), |a, &v| a + crate::scalar::abs(v))))
}

/// Upper bound on the Lagrangian's curvature at the current references,
/// using `‖·‖_∞ ≥ λ_max` for the symmetric matrices involved.
fn curvature_bound<T: Real>(state: &SpectralState<T>, refs: &SbmRefs<T>, lambda_orth: T) -> Result<T> {
    let rho_max = state.problem.rho.probs().max();
    let nu_max = state.problem.nu.max();
    let g1 = row_sum_norm(&state.feature_covariance()?);
    let g2 = row_sum_norm(&state.param_covariance()?);
    let two = lit::<T>(2.0);
    let param_scale = match &state.param_map {
        ParamMap::Tabular { .. } => T::one(),
        ParamMap::Affine { .. } => {
            let grid = &state.problem.grid;
            let mut x = DMatrix::from_element(grid.nrows() + 1, grid.ncols(), T::one());
            x.view_mut((0, 0), grid.shape()).copy_from(grid);
            row_sum_norm(&(&x * x.transpose()))
        }
    };
    let feature_part = two * rho_max * row_sum_norm(&refs.lambda2) + lit::<T>(12.0) * lambda_orth * rho_max * g1;
    let param_part = (two * nu_max * row_sum_norm(&refs.lambda1) + lit::<T>(12.0) * lambda_orth * nu_max * g2) * param_scale;
    Ok(feature_part + param_part)
}

fn gradient_finite<T: Real>(g: &SbmGradient<T>) -> bool {
    g.sup_norm().is_finite()
}

fn take_step<T: Real>(features: &mut DMatrix<T>, map: &mut ParamMap<T>, grad: &SbmGradient<T>, step: T, clip: bool) {
    *features -= &grad.features * step;
    grad.params.descend(map, step);
    if clip {
        *features = clip_feature_norms(features);
    }
}

fn check_step<T: Real>(step: T) -> Result<()> {
    if !(step > T::zero()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {step}")));
    }
    Ok(())
}

/// Gradient descent on `L₁ + L₂ + L_orth` over the tabular features and the
/// parameter map, with references refreshed every `refresh_every` steps.
pub fn minimize_sbm<T: Real>(state: &SpectralState<T>, opts: &SbmOptions<T>) -> Result<SbmRun<T>> {
    check_step(opts.step_size)?;
    if opts.refresh_every == 0 {
        return Err(Error::InvalidArgument("refresh_every must be positive".into()));
    }
    let mut s = state.clone();
    let mut trace = Vec::new();
    let mut refs = refresh(&mut s)?;
    let effective = |s: &SpectralState<T>, refs: &SbmRefs<T>| -> Result<T> {
        if !opts.normalize_step {
            return Ok(opts.step_size);
        }
        let c = curvature_bound(s, refs, opts.lambda_orth)?;
        Ok(if c > T::zero() { opts.step_size / c } else { opts.step_size })
    };
    let mut step = effective(&s, &refs)?;
    let mut streak = 0;
    let mut converged = false;
    let mut it = 0;
    loop {
        if it > 0 && it % opts.refresh_every == 0 {
            refs = refresh(&mut s)?;
            step = effective(&s, &refs)?;
        }
        let loss = sbm_loss(&s.features, &s.param_map, &refs, &s.problem, opts.lambda_orth)?;
        let grad = sbm_gradient(&s.features, &s.param_map, &refs, &s.problem, opts.lambda_orth)?;
        if !loss.total.is_finite() || !gradient_finite(&grad) {
            return Err(Error::Divergence { step: it, loss: to_f64(loss.total) });
        }
        let grad_norm = grad.sup_norm();
        trace.push(TraceRow {
            iter: it,
            pm_residual: to_f64(eq8_residual(&s)?.pm_residual()),
            l1: to_f64(loss.l1),
            l2: to_f64(loss.l2),
            l_orth: to_f64(loss.l_orth),
            total: to_f64(loss.total),
            lambda_gap: to_f64(s.lambda_gap()),
            grad_norm: to_f64(grad_norm),
        });
        if grad_norm <= opts.tol {
            converged = true;
            break;
        }
        if it == opts.max_iters {
            break;
        }
        take_step(&mut s.features, &mut s.param_map, &grad, step, opts.clip_rows);
        s.iteration += 1;
        it += 1;
        let after = sbm_loss(&s.features, &s.param_map, &refs, &s.problem, opts.lambda_orth)?.total;
        if !after.is_finite() {
            return Err(Error::Divergence { step: it, loss: to_f64(after) });
        }
        let slack = lit::<T>(ROUNDING_SLACK) * (T::one() + crate::scalar::abs(loss.total));
        streak = if after > loss.total + slack { streak + 1 } else { 0 };
        if streak >= DIVERGENCE_STREAK {
            return Err(Error::Divergence { step: it, loss: to_f64(after) });
        }
    }
    Ok(SbmRun {
        state: s,
        trace,
        converged,
        iterations: it,
    })
}

/// Joint gradient descent on `L_MSE` from the same initialization.
pub fn mse_baseline<T: Real>(state: &SpectralState<T>, step_size: T, max_iters: usize, tol: T) -> Result<MseRun<T>> {
    check_step(step_size)?;
    let mut features = state.features.clone();
    let mut map = state.param_map.clone();
    let problem = &state.problem;
    let mut trace = Vec::new();
    let mut streak = 0;
    let mut converged = false;
    let mut it = 0;
    loop {
        let loss = mse_loss(&features, &map, problem)?;
        let grad = mse_gradient(&features, &map, problem)?;
        trace.push(loss);
        if !loss.is_finite() || !gradient_finite(&grad) {
            return Err(Error::Divergence { step: it, loss: to_f64(loss) });
        }
        if trace.len() >= 2 {
            streak = if loss > trace[trace.len() - 2] { streak + 1 } else { 0 };
            if streak >= DIVERGENCE_STREAK {
                return Err(Error::Divergence { step: it, loss: to_f64(loss) });
            }
        }
        if grad.sup_norm() <= tol {
            converged = true;
            break;
        }
        if it == max_iters {
            break;
        }
        take_step(&mut features, &mut map, &grad, step_size, false);
        it += 1;
    }
    Ok(MseRun {
        features,
        param_map: map,
        trace,
        converged,
        iterations: it,
    })
}
