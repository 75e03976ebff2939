use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{sym_pinv, SpectralState, PINV_CUTOFF};
use crate::error::{shape_err, Error, Result};
use crate::features::{covariance, param_covariance, CovarianceSlot, CovarianceTracker, ParamMap, StateActionDist};
use crate::scalar::{abs, lit, max, sup_norm, Real};

/// Residuals of the Eq. 8 constraints with covariances taken from the
/// iterate itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Eq8Residual<T: Real> {
    /// `max_i ‖√ρ_i (Λ₂φ_i − Σ_j ν_j T_ij θ̃_j)‖₂`.
    pub feature: T,
    /// `max_j ‖√ν_j (Λ₁θ̃_j − Σ_i ρ_i T_ij φ_i)‖₂`.
    pub param: T,
    /// Largest off-diagonal entry of either Gram matrix.
    pub orthogonality: T,
}

impl<T: Real> Eq8Residual<T> {
    pub fn pm_residual(&self) -> T {
        max(self.feature, self.param)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Prop1Deviation<T: Real> {
    /// `max_j ‖Σ_i B̄_ij φ̄_i − Λ₁θ̄_j‖_∞`.
    pub param_identity: T,
    /// `max_i ‖Σ_j B̄_ij θ̄_j − Λ₂φ̄_i‖_∞`.
    pub feature_identity: T,
}

impl<T: Real> Prop1Deviation<T> {
    pub fn max(&self) -> T {
        max(self.param_identity, self.feature_identity)
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

fn max_off_diagonal<T: Real>(m: &DMatrix<T>) -> T {
    let mut out = T::zero();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                out = max(out, abs(m[(i, j)]));
            }
        }
    }
    out
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
pub(crate) fn sorted_eigen<T: Real>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(order.len(), order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = DMatrix::from_columns(&order.iter().map(|&k| eig.eigenvectors.column(k)).collect::<Vec<_>>());
    (values, vectors)
}

/// Eq. 8 solves from the current iterate, features first.
///
/// `Λ₂` is EMA-updated with the iterate's parameter covariance and
/// `Φ_raw = T diag(ν) Θ̃ᵀ Λ₂⁺`; then `Λ₁` is EMA-updated with the covariance
/// of `Φ_raw` and `Θ̃_raw = Λ₁⁺ Φ_rawᵀ diag(ρ) T`. Returns both solves and
/// the updated tracker.
pub fn power_solve<T: Real>(state: &SpectralState<T>) -> Result<(DMatrix<T>, DMatrix<T>, CovarianceTracker<T>)> {
    let problem = &state.problem;
    let outputs = state.outputs()?;
    let cutoff = lit::<T>(PINV_CUTOFF);
    let tracker = state
        .tracker
        .ema_update(&param_covariance(&outputs, &problem.nu)?, CovarianceSlot::Param)?;
    let phi_raw = scale_cols(&problem.targets, &problem.nu) * outputs.transpose() * sym_pinv(&tracker.lambda2, cutoff);
    let tracker = tracker.ema_update(&covariance(&phi_raw, &problem.rho)?, CovarianceSlot::Feature)?;
    let theta_raw =
        sym_pinv(&tracker.lambda1, cutoff) * phi_raw.transpose() * scale_rows(&problem.targets, problem.rho.probs());
    Ok((phi_raw, theta_raw, tracker))
}

/// Change of basis making both Gram matrices diagonal and equal.
///
/// With `G₁ = Φᵀdiag(ρ)Φ` and `G₂ = Θ̃diag(ν)Θ̃ᵀ`, picks `R` so that
/// `RᵀG₁R = R⁻¹G₂R⁻ᵀ = diag(√w)` with `w` the eigenvalues of `G₁^{1/2}G₂G₁^{1/2}`
/// in decreasing order. The product `ΦΘ̃` is unchanged. Each feature column
/// is signed so that its largest-magnitude entry is positive.
pub fn orthogonalize<T: Real>(
    phi: &DMatrix<T>,
    outputs: &DMatrix<T>,
    rho: &StateActionDist<T>,
    nu: &DVector<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    if phi.ncols() != outputs.nrows() {
        return Err(shape_err(format!("{} parameter rows", phi.ncols()), format!("{}", outputs.nrows())));
    }
    let g1 = covariance(phi, rho)?;
    let g2 = param_covariance(outputs, nu)?;
    let zero = |g: &DMatrix<T>| g.iter().all(|v| *v == T::zero());
    if zero(&g1) || zero(&g2) {
        return Err(Error::Degenerate("all-zero iterate".into()));
    }
    let floor = lit::<T>(PINV_CUTOFF);
    let (g_vals, g_vecs) = sorted_eigen(&g1);
    let g_top = g_vals[0];
    let reg = g_vals.map(|g| max(g, floor * g_top));
    let s = scale_cols(&g_vecs, &reg.map(|g| g.sqrt())) * g_vecs.transpose();
    let s_inv = scale_cols(&g_vecs, &reg.map(|g| T::one() / g.sqrt())) * g_vecs.transpose();
    let w_mat = &s * g2 * &s;
    let w_mat = (&w_mat + w_mat.transpose()) * lit::<T>(0.5);
    let (w, q) = sorted_eigen(&w_mat);
    let w_top = w[0];
    if !(w_top > T::zero()) {
        return Err(Error::Degenerate("all-zero iterate".into()));
    }
    let w = w.map(|x| max(x, floor * w_top));
    let quarter = lit::<T>(0.25);
    let r = scale_cols(&(&s_inv * &q), &w.map(|x| x.powf(quarter)));
    let r_inv = scale_rows(&(q.transpose() * &s), &w.map(|x| x.powf(-quarter)));
    let mut new_phi = phi * r;
    let mut new_outputs = r_inv * outputs;
    for k in 0..new_phi.ncols() {
        let col = new_phi.column(k);
        let pivot = col.iter().copied().fold(T::zero(), |acc, v| if abs(v) > abs(acc) { v } else { acc });
        if pivot < T::zero() {
            new_phi.column_mut(k).neg_mut();
            new_outputs.row_mut(k).neg_mut();
        }
    }
    Ok((new_phi, new_outputs))
}

/// Least-squares fit of a parameter map of the same kind to target outputs.
pub(crate) fn refit_param_map<T: Real>(map: &ParamMap<T>, outputs: DMatrix<T>, grid: &DMatrix<T>) -> ParamMap<T> {
    match map {
        ParamMap::Tabular { .. } => ParamMap::Tabular { outputs },
        ParamMap::Affine { .. } => {
            let d = grid.nrows();
            let m = grid.ncols();
            let mut x = DMatrix::from_element(d + 1, m, T::one());
            x.view_mut((0, 0), (d, m)).copy_from(grid);
            let gram = &x * x.transpose();
            let fit = outputs * x.transpose() * sym_pinv(&gram, lit(PINV_CUTOFF));
            let a = fit.columns(0, d) - DMatrix::identity(d, d);
            let b = fit.column(d).into_owned();
            ParamMap::Affine { a, b }
        }
    }
}

/// One step of the spectral Bellman power method.
pub fn power_step<T: Real>(state: &SpectralState<T>) -> Result<SpectralState<T>> {
    let (phi_raw, theta_raw, tracker) = power_solve(state)?;
    let (features, outputs) = orthogonalize(&phi_raw, &theta_raw, &state.problem.rho, &state.problem.nu)?;
    let param_map = refit_param_map(&state.param_map, outputs, &state.problem.grid);
    Ok(SpectralState {
        features,
        param_map,
        tracker,
        problem: state.problem.clone(),
        iteration: state.iteration + 1,
    })
}

/// Eq. 8 residuals with `Λ₁, Λ₂` recomputed from the iterate.
pub fn eq8_residual<T: Real>(state: &SpectralState<T>) -> Result<Eq8Residual<T>> {
    let problem = &state.problem;
    let outputs = state.outputs()?;
    let phi = &state.features;
    let g1 = covariance(phi, &problem.rho)?;
    let g2 = param_covariance(&outputs, &problem.nu)?;
    let rho = problem.rho.probs();
    let nu = &problem.nu;
    let feat = phi * &g2 - scale_cols(&problem.targets, nu) * outputs.transpose();
    let feature = (0..feat.nrows()).fold(T::zero(), |acc, i| max(acc, feat.row(i).norm() * rho[i].sqrt()));
    let par = &g1 * &outputs - phi.transpose() * scale_rows(&problem.targets, rho);
    let param = (0..par.ncols()).fold(T::zero(), |acc, j| max(acc, par.column(j).norm() * nu[j].sqrt()));
    Ok(Eq8Residual {
        feature,
        param,
        orthogonality: max(max_off_diagonal(&g1), max_off_diagonal(&g2)),
    })
}

/// Deviations of both augmented identities, with self-consistent covariances.
pub fn prop1_check<T: Real>(state: &SpectralState<T>) -> Result<Prop1Deviation<T>> {
    let problem = &state.problem;
    let outputs = state.outputs()?;
    let sr = problem.rho.probs().map(|x| x.sqrt());
    let sn = problem.nu.map(|x| x.sqrt());
    let phi_bar = scale_rows(&state.features, &sr);
    let theta_bar = scale_cols(&outputs, &sn);
    let b = problem.augmented();
    let lambda1 = phi_bar.transpose() * &phi_bar;
    let lambda2 = &theta_bar * theta_bar.transpose();
    let param_dev = phi_bar.transpose() * &b - &lambda1 * &theta_bar;
    let feature_dev = &b * theta_bar.transpose() - &phi_bar * &lambda2;
    Ok(Prop1Deviation {
        param_identity: sup_norm(param_dev.iter().copied()),
        feature_identity: sup_norm(feature_dev.iter().copied()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{sample_params, ParamDistribution};
    use crate::mdp::{make_linear_mdp, TabularMdp};
    use crate::spectral::{sbm_gradient, uniform_weights, SbmRefs, SpectralProblem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact_state(seed: u64, m: usize) -> SpectralState<f64> {
        let lin = make_linear_mdp::<f64>(8, 2, 3, 0.9, seed).unwrap();
        let grid = sample_params(&ParamDistribution::new(DVector::zeros(3), 1.0).unwrap(), m, seed + 100, None).unwrap();
        let outputs = lin.exact_next_grid(&grid);
        let problem = SpectralProblem::from_mdp(
            &lin.mdp,
            lin.features.matrix(),
            grid,
            uniform_weights(m),
            StateActionDist::uniform(16),
        )
        .unwrap();
        SpectralState::new(lin.features.matrix().clone(), ParamMap::Tabular { outputs }, problem, 1.0).unwrap()
    }

    #[test]
    fn identities_hold_with_exact_params() {
        for seed in 0..5 {
            let dev = prop1_check(&exact_state(seed, 20)).unwrap();
            assert!(dev.max() <= 1e-10, "{dev:?}");
        }
    }

    #[test]
    fn scalar_identities_are_exact() {
        let problem = SpectralProblem::new(
            1,
            1,
            DMatrix::from_element(1, 1, 0.3),
            DVector::from_element(1, 1.0),
            StateActionDist::uniform(1),
            DMatrix::from_element(1, 1, 0.6),
        )
        .unwrap();
        let state = SpectralState::new(
            DMatrix::from_element(1, 1, 1.0),
            ParamMap::Tabular { outputs: DMatrix::from_element(1, 1, 0.6) },
            problem,
            1.0,
        )
        .unwrap();
        assert_eq!(prop1_check(&state).unwrap().max(), 0.0);
    }

    #[test]
    fn identity_deviation_is_first_order_in_perturbation() {
        let base = exact_state(3, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dir = DMatrix::from_fn(3, 20, |_, _| rng.random_range(-1.0..1.0));
        let dev = |eta: f64| {
            let mut s = base.clone();
            s.param_map = ParamMap::Tabular { outputs: base.outputs().unwrap() + &dir * eta };
            prop1_check(&s).unwrap().max()
        };
        let (a, b) = (dev(1e-3), dev(1e-2));
        assert!(a > 0.0);
        let ratio = b / a;
        assert!((ratio - 10.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn orthogonalize_balances_and_preserves_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = DMatrix::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0));
        let out = DMatrix::from_fn(3, 7, |_, _| rng.random_range(-1.0..1.0));
        let rho = StateActionDist::uniform(10);
        let nu = uniform_weights::<f64>(7);
        let (p, o) = orthogonalize(&phi, &out, &rho, &nu).unwrap();
        assert!((&p * &o - &phi * &out).amax() < 1e-12);
        let g1 = covariance(&p, &rho).unwrap();
        let g2 = param_covariance(&o, &nu).unwrap();
        assert!(max_off_diagonal(&g1) < 1e-12 && max_off_diagonal(&g2) < 1e-12);
        assert!((&g1 - &g2).amax() < 1e-12);
        assert!(g1[(0, 0)] >= g1[(1, 1)] && g1[(1, 1)] >= g1[(2, 2)]);
        assert!(orthogonalize(&DMatrix::zeros(10, 3), &out, &rho, &nu).is_err());
    }

    #[test]
    fn balanced_svd_is_a_fixed_point() {
        let state = exact_state(1, 30);
        let b = state.problem.augmented();
        let svd = crate::linalg::Svd::new(&b);
        let (sv, u, vt) = (svd.singular_values, svd.u, svd.v_t);
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &c| sv[c].partial_cmp(&sv[a]).unwrap());
        let d = 3;
        let sr = state.problem.rho.probs().map(|x| x.sqrt());
        let sn = state.problem.nu.map(|x| x.sqrt());
        let mut phi = DMatrix::zeros(16, d);
        let mut out = DMatrix::zeros(d, 30);
        for (k, &idx) in order.iter().take(d).enumerate() {
            let s = sv[idx].sqrt();
            phi.set_column(k, &(u.column(idx) * s).component_div(&sr));
            out.set_row(k, &(vt.row(idx) * s).component_div(&sn.transpose()));
        }
        let fixed = SpectralState::new(phi, ParamMap::Tabular { outputs: out }, state.problem.clone(), 1.0).unwrap();
        let next = power_step(&fixed).unwrap();
        assert!(crate::spectral::max_principal_sine(&fixed.features, &next.features) <= 1e-8);
        assert!(eq8_residual(&fixed).unwrap().pm_residual() <= 1e-10);
        let refs = SbmRefs {
            lambda1: fixed.tracker.lambda1.clone(),
            lambda2: fixed.tracker.lambda2.clone(),
            features: fixed.features.clone(),
            outputs: fixed.outputs().unwrap(),
        };
        let g = sbm_gradient(&fixed.features, &fixed.param_map, &refs, &fixed.problem, 1.0).unwrap();
        assert!(g.sup_norm() <= 1e-6);
    }

    #[test]
    fn rank_one_converges_in_one_step() {
        // Single-action chain whose Bellman matrix has rank one: rewards r(s) and
        // absorbing successor.
        let p = DMatrix::<f64>::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let mdp = TabularMdp::new(3, 1, p, DVector::from_vec(vec![0.5, -0.25, 0.0]), 0.0, 1.0, DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        let features = DMatrix::from_element(3, 1, 0.5);
        let grid = DMatrix::from_row_slice(1, 4, &[0.1, 0.7, -0.3, 1.0]);
        let problem = SpectralProblem::from_mdp(&mdp, &features, grid, uniform_weights(4), StateActionDist::uniform(3)).unwrap();
        let b = problem.augmented();
        let state = SpectralState::new(features, ParamMap::Tabular { outputs: DMatrix::from_element(1, 4, 1.0) }, problem, 1.0).unwrap();
        let next = power_step(&state).unwrap();
        let svd = crate::linalg::Svd::new(&b);
        let u = svd.u.column(0).into_owned();
        let sr = next.problem.rho.probs().map(|x| x.sqrt());
        let phi_bar = next.features.column(0).component_mul(&sr);
        let cos = (phi_bar.dot(&u) / phi_bar.norm()).abs();
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_is_non_increasing_on_gapped_instance() {
        let state = exact_state(2, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let init = DMatrix::from_fn(16, 3, |_, _| rng.random_range(-1.0..1.0));
        let out = DMatrix::from_fn(3, 40, |_, _| rng.random_range(-1.0..1.0));
        let mut s = SpectralState::new(init, ParamMap::Tabular { outputs: out }, state.problem.clone(), 1.0).unwrap();
        s = power_step(&s).unwrap();
        let mut prev = eq8_residual(&s).unwrap().pm_residual();
        for _ in 0..50 {
            s = power_step(&s).unwrap();
            let r = eq8_residual(&s).unwrap().pm_residual();
            assert!(r <= prev * (1.0 + 1e-9) + 1e-14, "{r} > {prev}");
            prev = r;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn affine_map_refits_exactly_when_outputs_are_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = DMatrix::from_fn(2, 9, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 0.2, 0.5]);
        let b = DVector::from_vec(vec![0.4, -0.7]);
        let target = ParamMap::Affine { a: a.clone(), b: b.clone() };
        let fitted = refit_param_map(&ParamMap::identity_affine(2), target.outputs(&grid).unwrap(), &grid);
        match fitted {
            ParamMap::Affine { a: fa, b: fb } => {
                assert!((fa - a).amax() < 1e-10 && (fb - b).amax() < 1e-10);
            }
            _ => panic!("kind changed"),
        }
    }
}
