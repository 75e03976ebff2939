use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::instance::Instance;
use super::write_csv;
use crate::error::{Error, Result};
use crate::features::{sample_params, ParamDistribution, ParamMap, StateActionDist};
use crate::seeds;
use crate::spectral::{
    eq8_residual, minimize_sbm, power_step, sbm_gradient, sbm_loss, uniform_weights, SbmOptions, SbmRefs,
    SpectralProblem, SpectralState, TraceRow,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMethod {
    #[default]
    Power,
    Sbm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralInit {
    /// Uniform draws in `[-0.5, 0.5]` for features and parameter outputs.
    #[default]
    Random,
    /// The instance features with identity-residual affine parameters.
    Base,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralSettings {
    pub method: SpectralMethod,
    pub init: SpectralInit,
    pub iters: usize,
    pub grid_size: usize,
    pub grid_std: f64,
    pub step_size: f64,
    pub lambda_orth: f64,
    pub ema_alpha: f64,
}

impl Default for SpectralSettings {
    fn default() -> Self {
        Self {
            method: SpectralMethod::Power,
            init: SpectralInit::Random,
            iters: 200,
            grid_size: 50,
            grid_std: 1.0,
            step_size: 0.5,
            lambda_orth: 1.0,
            ema_alpha: 1.0,
        }
    }
}

/// Problem and starting iterate: targets are exact backups of `Φ₀θ` with
/// `Φ₀` the instance features (one-hot when absent).
pub fn initial_state(instance: &Instance, settings: &SpectralSettings, seed: u64) -> Result<SpectralState<f64>> {
    if settings.grid_size == 0 {
        return Err(Error::InvalidArgument("grid size must be at least 1".into()));
    }
    let base = instance.features_or_one_hot();
    let d = base.dim();
    let dist = ParamDistribution::new(DVector::zeros(d), settings.grid_std)?;
    let grid = sample_params(&dist, settings.grid_size, seeds::derive_seed(seed, seeds::NU), None)?;
    let problem = SpectralProblem::from_mdp(
        &instance.mdp,
        base.matrix(),
        grid,
        uniform_weights(settings.grid_size),
        StateActionDist::uniform(instance.mdp.n_pairs()),
    )?;
    let (features, map) = match settings.init {
        SpectralInit::Random => {
            let mut rng = seeds::stream(seed, seeds::INIT);
            let n = problem.n_pairs();
            let phi = DMatrix::from_fn(n, d, |_, _| rng.random_range(-0.5..0.5));
            let out = DMatrix::from_fn(d, settings.grid_size, |_, _| rng.random_range(-0.5..0.5));
            (phi, ParamMap::Tabular { outputs: out })
        }
        SpectralInit::Base => (base.matrix().clone(), ParamMap::identity_affine(d)),
    };
    SpectralState::new(features, map, problem, settings.ema_alpha)
}

fn diagnostics(state: &SpectralState<f64>, iter: usize, lambda_orth: f64) -> Result<TraceRow> {
    let refs = SbmRefs::current(state)?;
    let loss = sbm_loss(&state.features, &state.param_map, &refs, &state.problem, lambda_orth)?;
    let grad = sbm_gradient(&state.features, &state.param_map, &refs, &state.problem, lambda_orth)?;
    Ok(TraceRow {
        iter,
        pm_residual: eq8_residual(state)?.pm_residual(),
        l1: loss.l1,
        l2: loss.l2,
        l_orth: loss.l_orth,
        total: loss.total,
        lambda_gap: state.lambda_gap(),
        grad_norm: grad.sup_norm(),
    })
}

/// Per-iteration diagnostics of the chosen solver. Power-method rows
/// evaluate the SBM terms with references taken at the iterate.
pub fn run_spectral(instance: &Instance, settings: &SpectralSettings, seed: u64) -> Result<Vec<TraceRow>> {
    let mut state = initial_state(instance, settings, seed)?;
    match settings.method {
        SpectralMethod::Power => {
            let mut rows = vec![diagnostics(&state, 0, settings.lambda_orth)?];
            for it in 1..=settings.iters {
                state = power_step(&state)?;
                rows.push(diagnostics(&state, it, settings.lambda_orth)?);
            }
            Ok(rows)
        }
        SpectralMethod::Sbm => {
            let opts = SbmOptions {
                step_size: settings.step_size,
                max_iters: settings.iters,
                tol: 0.0,
                lambda_orth: settings.lambda_orth,
                normalize_step: true,
                ..SbmOptions::default()
            };
            Ok(minimize_sbm(&state, &opts)?.trace)
        }
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_csv(path, rows)
}
