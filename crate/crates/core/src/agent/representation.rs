use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use crate::error::Result;
use crate::features::{covariance, sample_params, FeatureMap, ParamDistribution, ParamMap};
use crate::scalar::{from_usize, lit, Real};
use crate::spectral::{
    eq8_residual, minimize_sbm, power_step, uniform_weights, SbmOptions, SpectralProblem, SpectralState, TraceRow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMethod {
    Sbm,
    Power,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamInit {
    /// `θ̃_j = Λ₁⁺ Φᵀ diag(ρ) T_j`, the regression of the targets on `Φ_t`.
    LeastSquares,
    /// `θ̃_j = θ_j`.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMapKind {
    Tabular,
    Affine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepresentationSettings<T: Real> {
    pub method: RepresentationMethod,
    pub gamma: T,
    pub sigma_rep: T,
    pub grid_size: usize,
    pub steps: usize,
    pub step_size: T,
    pub lambda_orth: T,
    pub ema_alpha: T,
    pub param_init: ParamInit,
    pub param_map: ParamMapKind,
}

#[derive(Clone, Debug)]
pub struct RepresentationOutcome<T: Real> {
    /// `Φ_{t+1}` with rows clipped to the unit ball.
    pub features: FeatureMap<T>,
    pub grid: DMatrix<T>,
    pub grid_mean: DVector<T>,
    pub param_map: ParamMap<T>,
    /// Eq. 8 residual of the final iterate (unclipped).
    pub pm_residual: T,
    /// SBM diagnostics per step (empty for the power method).
    pub trace: Vec<TraceRow>,
}

/// Empirical backups `(T̂ Q_{θ_j})(s,a)` from the buffer; unvisited pairs keep
/// `Q_{θ_j}(s,a)`.
pub fn empirical_targets<T: Real>(
    buffer: &ReplayBuffer<T>,
    features: &FeatureMap<T>,
    grid: &DMatrix<T>,
    gamma: T,
) -> DMatrix<T> {
    let q = features.matrix() * grid;
    let n_states = features.n_states();
    let n_actions = features.n_actions();
    let m = grid.ncols();
    let mut values = DMatrix::zeros(n_states, m);
    for s in 0..n_states {
        for j in 0..m {
            let mut best = q[(s * n_actions, j)];
            for a in 1..n_actions {
                let v = q[(s * n_actions + a, j)];
                if v > best {
                    best = v;
                }
            }
            values[(s, j)] = best;
        }
    }
    let mut sums = DMatrix::<T>::zeros(q.nrows(), m);
    for g in buffer.groups() {
        let i = g.state * n_actions + g.action;
        let n = from_usize::<T>(g.count);
        for j in 0..m {
            let boot = if g.terminal { T::zero() } else { gamma * values[(g.next_state, j)] * n };
            sums[(i, j)] += g.reward_sum + boot;
        }
    }
    let counts = buffer.counts();
    DMatrix::from_fn(q.nrows(), m, |i, j| {
        if counts[i] == 0 {
            q[(i, j)]
        } else {
            sums[(i, j)] / from_usize::<T>(counts[i])
        }
    })
}

fn initial_params<T: Real>(problem: &SpectralProblem<T>, features: &DMatrix<T>, settings: &RepresentationSettings<T>) -> Result<ParamMap<T>> {
    let d = problem.dim();
    let outputs = match settings.param_init {
        ParamInit::Identity => problem.grid.clone(),
        ParamInit::LeastSquares => {
            let l1 = covariance(features, &problem.rho)?;
            let mut weighted = problem.targets.clone();
            for (i, mut row) in weighted.row_iter_mut().enumerate() {
                row *= problem.rho.probs()[i];
            }
            crate::spectral::sym_pinv(&l1, lit(crate::spectral::PINV_CUTOFF)) * features.transpose() * weighted
        }
    };
    Ok(match settings.param_map {
        ParamMapKind::Tabular => ParamMap::Tabular { outputs },
        ParamMapKind::Affine => crate::spectral::refit_param_map(&ParamMap::identity_affine(d), outputs, &problem.grid),
    })
}

/// One representation-learning phase around `θ̂`.
pub fn representation_phase<T: Real>(
    buffer: &ReplayBuffer<T>,
    theta_hat: &DVector<T>,
    features: &FeatureMap<T>,
    settings: &RepresentationSettings<T>,
    seed: u64,
) -> Result<RepresentationOutcome<T>> {
    let rho = buffer.empirical_dist()?;
    let dist = ParamDistribution::new(theta_hat.clone(), settings.sigma_rep)?;
    let grid = sample_params(&dist, settings.grid_size, seed, None)?;
    let targets = empirical_targets(buffer, features, &grid, settings.gamma);
    let problem = SpectralProblem::new(
        features.n_states(),
        features.n_actions(),
        grid.clone(),
        uniform_weights(settings.grid_size),
        rho,
        targets,
    )?;
    let params = initial_params(&problem, features.matrix(), settings)?;
    let state = SpectralState::new(features.matrix().clone(), params, problem, settings.ema_alpha)?;
    let (final_state, trace) = match settings.method {
        RepresentationMethod::Sbm => {
            let opts = SbmOptions {
                step_size: settings.step_size,
                max_iters: settings.steps,
                tol: T::zero(),
                lambda_orth: settings.lambda_orth,
                refresh_every: 1,
                clip_rows: true,
                normalize_step: true,
            };
            let run = minimize_sbm(&state, &opts)?;
            (run.state, run.trace)
        }
        RepresentationMethod::Power => {
            let mut s = state;
            for _ in 0..settings.steps {
                s = power_step(&s)?;
            }
            (s, Vec::new())
        }
    };
    let pm_residual = eq8_residual(&final_state)?.pm_residual();
    let grid_mean = grid.column_mean();
    Ok(RepresentationOutcome {
        features: final_state.feature_map()?,
        grid,
        grid_mean,
        param_map: final_state.param_map,
        pm_residual,
        trace,
    })
}
