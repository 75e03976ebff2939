//! Spectral Bellman representation learning: the Bellman matrix over a
//! `(s,a) × θ` grid, the power method, the SBM loss and its minimization,
//! and numerical checks of the spectral identities.

mod loss;
mod optimize;
mod power;
mod svd;

use nalgebra::{DMatrix, DVector};

use crate::bellman::apply_optimal;
use crate::error::{shape_err, Error, Result};
use crate::features::{
    clip_to_feature_map, covariance, param_covariance, CovarianceTracker, FeatureMap, ParamMap,
    StateActionDist,
};
use crate::mdp::TabularMdp;
use crate::scalar::{abs, from_usize, lit, Real};

pub use loss::{
    mse_gradient, mse_loss, sbm_gradient, sbm_loss, sbm_term_gradient, ParamGradient, SbmGradient,
    SbmLossBreakdown, SbmRefs, SbmTerm,
};
pub use optimize::{minimize_sbm, mse_baseline, MseRun, SbmOptions, SbmRun, TraceRow};
pub use power::{
    eq8_residual, orthogonalize, power_solve, power_step, prop1_check, Eq8Residual, Prop1Deviation,
};
pub use svd::{max_principal_sine, svd_verify, SvdReport};
pub(crate) use power::refit_param_map;

/// Unaugmented targets `T_ij = (T Q_{θ_j})(κ(i))` with `Q_θ = Φθ`.
pub fn bellman_targets<T: Real>(
    mdp: &TabularMdp<T>,
    features: &DMatrix<T>,
    grid: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    if features.nrows() != mdp.n_pairs() {
        return Err(shape_err(format!("{} feature rows", mdp.n_pairs()), format!("{}", features.nrows())));
    }
    if features.ncols() != grid.nrows() {
        return Err(shape_err(format!("grid with {} rows", features.ncols()), format!("{}", grid.nrows())));
    }
    if grid.ncols() == 0 {
        return Err(Error::InvalidArgument("parameter grid is empty".into()));
    }
    let q = features * grid;
    let mut out = DMatrix::zeros(mdp.n_pairs(), grid.ncols());
    for j in 0..grid.ncols() {
        let table = crate::bellman::QTable::from_vector(mdp.n_states(), mdp.n_actions(), q.column(j).into_owned())?;
        out.set_column(j, apply_optimal(mdp, &table)?.values());
    }
    Ok(out)
}

/// Entry `(i, j)` is `√ρ_i · T_ij · √ν_j`.
pub fn augment_targets<T: Real>(targets: &DMatrix<T>, rho: &DVector<T>, nu: &DVector<T>) -> DMatrix<T> {
    let sr = rho.map(|x| x.sqrt());
    let sn = nu.map(|x| x.sqrt());
    DMatrix::from_fn(targets.nrows(), targets.ncols(), |i, j| sr[i] * targets[(i, j)] * sn[j])
}

/// The distribution-augmented Bellman matrix.
pub fn bellman_matrix<T: Real>(
    mdp: &TabularMdp<T>,
    features: &DMatrix<T>,
    grid: &DMatrix<T>,
    rho: &StateActionDist<T>,
    nu: &DVector<T>,
) -> Result<DMatrix<T>> {
    let targets = bellman_targets(mdp, features, grid)?;
    check_weights(rho, nu, targets.nrows(), targets.ncols())?;
    Ok(augment_targets(&targets, rho.probs(), nu))
}

fn check_weights<T: Real>(rho: &StateActionDist<T>, nu: &DVector<T>, n: usize, m: usize) -> Result<()> {
    if rho.len() != n {
        return Err(shape_err(format!("rho[{n}]"), format!("[{}]", rho.len())));
    }
    if nu.len() != m {
        return Err(shape_err(format!("nu[{m}]"), format!("[{}]", nu.len())));
    }
    if nu.iter().any(|w| !(*w >= T::zero())) || abs(nu.sum() - T::one()) > lit(1e-12) {
        return Err(Error::InvalidArgument("grid weights must form a probability vector".into()));
    }
    Ok(())
}

/// Uniform quadrature weights `1/m`.
pub fn uniform_weights<T: Real>(m: usize) -> DVector<T> {
    DVector::from_element(m, T::one() / from_usize(m))
}

/// The fixed data of one learning phase: the grid, both sampling
/// distributions and the Bellman targets evaluated once at the phase input.
#[derive(Clone, Debug)]
pub struct SpectralProblem<T: Real> {
    pub n_states: usize,
    pub n_actions: usize,
    pub grid: DMatrix<T>,
    pub nu: DVector<T>,
    pub rho: StateActionDist<T>,
    pub targets: DMatrix<T>,
}

impl<T: Real> SpectralProblem<T> {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        grid: DMatrix<T>,
        nu: DVector<T>,
        rho: StateActionDist<T>,
        targets: DMatrix<T>,
    ) -> Result<Self> {
        if targets.nrows() != n_states * n_actions || targets.ncols() != grid.ncols() {
            return Err(shape_err(
                format!("targets {}x{}", n_states * n_actions, grid.ncols()),
                format!("{}x{}", targets.nrows(), targets.ncols()),
            ));
        }
        check_weights(&rho, &nu, targets.nrows(), targets.ncols())?;
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Bellman targets".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            grid,
            nu,
            rho,
            targets,
        })
    }

    /// Targets from exact backups of `Q_θ = Φθ` on `mdp`.
    pub fn from_mdp(
        mdp: &TabularMdp<T>,
        features: &DMatrix<T>,
        grid: DMatrix<T>,
        nu: DVector<T>,
        rho: StateActionDist<T>,
    ) -> Result<Self> {
        let targets = bellman_targets(mdp, features, &grid)?;
        Self::new(mdp.n_states(), mdp.n_actions(), grid, nu, rho, targets)
    }

    pub fn n_pairs(&self) -> usize {
        self.targets.nrows()
    }

    pub fn grid_size(&self) -> usize {
        self.grid.ncols()
    }

    pub fn dim(&self) -> usize {
        self.grid.nrows()
    }

    pub fn augmented(&self) -> DMatrix<T> {
        augment_targets(&self.targets, self.rho.probs(), &self.nu)
    }
}

/// Iterate of the power method / SBM minimization.
#[derive(Clone, Debug)]
pub struct SpectralState<T: Real> {
    /// `Φ_t`, one row per flat `(s,a)` index.
    pub features: DMatrix<T>,
    pub param_map: ParamMap<T>,
    pub tracker: CovarianceTracker<T>,
    pub problem: SpectralProblem<T>,
    pub iteration: usize,
}

impl<T: Real> SpectralState<T> {
    /// Starts a state with the tracker set to the current covariances.
    pub fn new(features: DMatrix<T>, param_map: ParamMap<T>, problem: SpectralProblem<T>, alpha: T) -> Result<Self> {
        if features.nrows() != problem.n_pairs() || features.ncols() != problem.dim() {
            return Err(shape_err(
                format!("features {}x{}", problem.n_pairs(), problem.dim()),
                format!("{}x{}", features.nrows(), features.ncols()),
            ));
        }
        if param_map.dim() != problem.dim() {
            return Err(shape_err(format!("parameter dimension {}", problem.dim()), format!("{}", param_map.dim())));
        }
        let outputs = param_map.outputs(&problem.grid)?;
        let tracker = CovarianceTracker::new(
            covariance(&features, &problem.rho)?,
            param_covariance(&outputs, &problem.nu)?,
            alpha,
        )?;
        Ok(Self {
            features,
            param_map,
            tracker,
            problem,
            iteration: 0,
        })
    }

    pub fn outputs(&self) -> Result<DMatrix<T>> {
        self.param_map.outputs(&self.problem.grid)
    }

    pub fn feature_covariance(&self) -> Result<DMatrix<T>> {
        covariance(&self.features, &self.problem.rho)
    }

    pub fn param_covariance(&self) -> Result<DMatrix<T>> {
        param_covariance(&self.outputs()?, &self.problem.nu)
    }

    /// `Φ_t` with rows clipped to the unit ball.
    pub fn feature_map(&self) -> Result<FeatureMap<T>> {
        clip_to_feature_map(self.problem.n_states, self.problem.n_actions, &self.features)
    }

    /// `‖Λ₁ − Λ₂‖_F` of the tracked covariances.
    pub fn lambda_gap(&self) -> T {
        (&self.tracker.lambda1 - &self.tracker.lambda2).norm()
    }
}

/// Pseudo-inverse of a symmetric PSD matrix with relative eigenvalue cutoff.
pub(crate) fn sym_pinv<T: Real>(m: &DMatrix<T>, rel_cutoff: T) -> DMatrix<T> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(T::zero(), |a, &b| crate::scalar::max(a, abs(b)));
    let cutoff = rel_cutoff * top;
    let inv = eig.eigenvalues.map(|l| if l > cutoff && l > T::zero() { T::one() / l } else { T::zero() });
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv[k];
    }
    let out = scaled * v.transpose();
    (&out + out.transpose()) * lit::<T>(0.5)
}

/// Relative cutoff used for every covariance pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-10;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::make_linear_mdp;

    #[test]
    fn zero_reward_zero_grid_gives_zero_matrix() {
        let lin = make_linear_mdp::<f64>(4, 2, 2, 0.9, 1).unwrap();
        let mdp = TabularMdp::new(4, 2, lin.mdp.transitions().clone(), DVector::zeros(8), 0.9, 1.0, lin.mdp.initial_dist().clone()).unwrap();
        let b = bellman_matrix(&mdp, lin.features.matrix(), &DMatrix::zeros(2, 3), &StateActionDist::uniform(8), &uniform_weights(3)).unwrap();
        assert_eq!(b.amax(), 0.0);
    }

    #[test]
    fn uniform_weights_scale_targets() {
        let lin = make_linear_mdp::<f64>(4, 2, 2, 0.9, 2).unwrap();
        let grid = DMatrix::from_row_slice(2, 3, &[0.1, -0.5, 1.0, 0.3, 0.0, -1.0]);
        let t = bellman_targets(&lin.mdp, lin.features.matrix(), &grid).unwrap();
        let b = bellman_matrix(&lin.mdp, lin.features.matrix(), &grid, &StateActionDist::uniform(8), &uniform_weights(3)).unwrap();
        assert!((b - t / (24.0f64).sqrt()).amax() < 1e-15);
    }

    #[test]
    fn zero_ibe_bellman_matrix_has_rank_d() {
        let lin = make_linear_mdp::<f64>(8, 2, 3, 0.9, 3).unwrap();
        let grid = crate::features::sample_params(&crate::features::ParamDistribution::new(DVector::zeros(3), 2.0).unwrap(), 20, 5, None).unwrap();
        let b = bellman_matrix(&lin.mdp, lin.features.matrix(), &grid, &StateActionDist::uniform(16), &uniform_weights(20)).unwrap();
        let sv = crate::linalg::singular_values(&b);
        let top = sv.max();
        assert!(sv.iter().filter(|&&s| s > 1e-8 * top).count() <= 3);
    }

    #[test]
    fn sym_pinv_inverts_full_rank() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = sym_pinv(&m, 1e-10);
        assert!((p * &m - DMatrix::identity(2, 2)).amax() < 1e-14);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = sym_pinv(&singular, 1e-10);
        assert!((&singular * &p * &singular - &singular).amax() < 1e-14);
    }
}
