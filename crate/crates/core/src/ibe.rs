//! Inherent Bellman error oracle and the max-uncertainty diagnostic.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bellman::apply_h_step;
use crate::error::{shape_err, Error, Result};
use crate::features::{covariance, FeatureMap, ParamBall, StateActionDist};
use crate::linalg::pseudo_inverse;
use crate::lp::solve_standard_form;
use crate::mdp::{occupancy, PolicyTable, TabularMdp};
use crate::scalar::{from_usize, lit, max, sup_norm, Real};

/// Default cap on the number of enumerated deterministic policies.
pub const POLICY_ENUMERATION_CAP: usize = 1 << 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    /// Exact sup-norm projection by linear programming.
    #[default]
    Chebyshev,
    /// Least-squares projection scaled into the ball; an upper bound.
    LeastSquares,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T: Real> {
    pub theta_tilde: DVector<T>,
    pub error: T,
}

/// `min_{θ̃ ∈ B} ‖y − Φθ̃‖_∞`, solved through the dual LP in standard form.
///
/// The primal is `min t` over `(θ̃, t)` with `|y_i − φ_iᵀθ̃| ≤ t` and
/// `|φ_iᵀθ̃| ≤ D`. Its dual has `d + 1` equality rows and `4N` non-negative
/// variables, and the simplex multipliers of the dual recover `(θ̃, t)`.
pub fn chebyshev_projection<T: Real>(ball: &ParamBall<T>, target: &DVector<T>) -> Result<Projection<T>> {
    let phi = ball.features.matrix();
    let (n, d) = phi.shape();
    if target.len() != n {
        return Err(shape_err(format!("target[{n}]"), format!("[{}]", target.len())));
    }
    let mut a = DMatrix::zeros(d + 1, 4 * n);
    let mut cost = DVector::zeros(4 * n);
    for i in 0..n {
        for k in 0..d {
            let v = phi[(i, k)];
            a[(k, i)] = v;
            a[(k, n + i)] = -v;
            a[(k, 2 * n + i)] = v;
            a[(k, 3 * n + i)] = -v;
        }
        a[(d, i)] = T::one();
        a[(d, n + i)] = T::one();
        cost[i] = target[i];
        cost[n + i] = -target[i];
        cost[2 * n + i] = ball.bound;
        cost[3 * n + i] = ball.bound;
    }
    let mut rhs = DVector::zeros(d + 1);
    rhs[d] = T::one();
    let sol = solve_standard_form(&a, &rhs, &cost)?;
    let theta_tilde = sol.duals.rows(0, d).into_owned();
    // `+ 0` turns a -0.0 objective into 0.0.
    let error = max(-sol.objective, T::zero()) + T::zero();
    Ok(Projection { theta_tilde, error })
}

/// Least-squares fit of `y` in the span of `Φ`, scaled into the ball.
pub fn least_squares_projection<T: Real>(
    ball: &ParamBall<T>,
    target: &DVector<T>,
) -> Result<Projection<T>> {
    let phi = ball.features.matrix();
    if target.len() != phi.nrows() {
        return Err(shape_err(format!("target[{}]", phi.nrows()), format!("[{}]", target.len())));
    }
    let pinv = pseudo_inverse(phi, lit::<T>(1e-12));
    let theta_tilde = ball.project(&(pinv * target));
    let error = sup_norm((target - phi * &theta_tilde).iter().copied());
    Ok(Projection { theta_tilde, error })
}

pub fn project<T: Real>(ball: &ParamBall<T>, target: &DVector<T>, method: InnerMethod) -> Result<Projection<T>> {
    match method {
        InnerMethod::Chebyshev => chebyshev_projection(ball, target),
        InnerMethod::LeastSquares => least_squares_projection(ball, target),
    }
}

/// `T^h Φθ` as a flat vector.
pub fn backed_up<T: Real>(mdp: &TabularMdp<T>, features: &FeatureMap<T>, theta: &DVector<T>, h: usize) -> Result<DVector<T>> {
    Ok(apply_h_step(mdp, &features.q_values(theta), h)?.into_values())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ThetaError<T: Real> {
    pub theta: Vec<T>,
    pub error: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct IbeReport<T: Real> {
    /// Largest inner error over the outer grid; a lower bound on the IBE.
    pub value: T,
    pub witness_theta: Vec<T>,
    pub per_theta_errors: Vec<ThetaError<T>>,
    pub grid_size: usize,
    pub inner_method: InnerMethod,
    pub horizon: usize,
    pub bound: T,
}

/// The outer grid: `±` the eigendirections of `Λ₁` (uniform `ρ`) scaled to
/// the ball boundary, followed by `samples` seeded draws alternating between
/// the boundary and the interior. Draws are sequential, so a larger
/// `samples` extends a smaller grid.
pub fn outer_grid<T: Real>(ball: &ParamBall<T>, samples: usize, seed: u64) -> Result<Vec<DVector<T>>> {
    let phi = ball.features.matrix();
    let d = phi.ncols();
    let lambda = covariance(phi, &StateActionDist::uniform(phi.nrows()))?;
    let eig = lambda.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut grid = Vec::with_capacity(2 * d + samples);
    for k in order {
        let v = eig.eigenvectors.column(k).into_owned();
        let g = ball.gauge(&v);
        if g > lit::<T>(1e-12) {
            let p = ball.project(&(&v * (ball.bound / g)));
            grid.push(p.clone());
            grid.push(-p);
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d_t = from_usize::<T>(d);
    for k in 0..samples {
        let z = DVector::from_fn(d, |_, _| lit::<T>(StandardNormal.sample(&mut rng)));
        let u: f64 = rand::Rng::random(&mut rng);
        let g = ball.gauge(&z);
        if g <= T::zero() {
            grid.push(DVector::zeros(d));
            continue;
        }
        let radius = if k % 2 == 0 {
            T::one()
        } else {
            lit::<T>(u).powf(T::one() / d_t)
        };
        grid.push(ball.project(&(&z * (radius * ball.bound / g))));
    }
    Ok(grid)
}

/// Evaluates the IBE on an explicit grid of `θ` points.
pub fn ibe_on_grid<T: Real>(
    mdp: &TabularMdp<T>,
    ball: &ParamBall<T>,
    grid: &[DVector<T>],
    h: usize,
    method: InnerMethod,
) -> Result<IbeReport<T>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("outer grid is empty".into()));
    }
    check_features(mdp, &ball.features)?;
    let mut per = Vec::with_capacity(grid.len());
    let mut best = 0;
    for (j, theta) in grid.iter().enumerate() {
        let target = backed_up(mdp, &ball.features, theta, h)?;
        let proj = project(ball, &target, method)?;
        if proj.error > per.get(best).map_or(-T::one(), |e: &ThetaError<T>| e.error) {
            best = j;
        }
        per.push(ThetaError {
            theta: theta.iter().copied().collect(),
            error: proj.error,
        });
    }
    Ok(IbeReport {
        value: per[best].error,
        witness_theta: per[best].theta.clone(),
        per_theta_errors: per,
        grid_size: grid.len(),
        inner_method: method,
        horizon: h,
        bound: ball.bound,
    })
}

fn check_features<T: Real>(mdp: &TabularMdp<T>, features: &FeatureMap<T>) -> Result<()> {
    if features.n_states() != mdp.n_states() || features.n_actions() != mdp.n_actions() {
        return Err(shape_err(
            format!("features over {}x{}", mdp.n_states(), mdp.n_actions()),
            format!("{}x{}", features.n_states(), features.n_actions()),
        ));
    }
    Ok(())
}

/// `sup_θ inf_θ̃ ‖T^h Φθ − Φθ̃‖_∞` over the grid of [`outer_grid`].
pub fn compute_ibe<T: Real>(
    mdp: &TabularMdp<T>,
    ball: &ParamBall<T>,
    outer_grid_size: usize,
    seed: u64,
    h: usize,
    method: InnerMethod,
) -> Result<IbeReport<T>> {
    if outer_grid_size == 0 {
        return Err(Error::InvalidArgument("outer grid size must be at least 1".into()));
    }
    if h == 0 {
        return Err(Error::InvalidArgument("horizon h must be at least 1".into()));
    }
    let grid = outer_grid(ball, outer_grid_size, seed)?;
    ibe_on_grid(mdp, ball, &grid, h, method)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HStepBound<T: Real> {
    /// One-step IBE over the outer grid closed under projection chains.
    pub i1: T,
    /// One-step IBE over the outer grid alone.
    pub i1_outer: T,
    pub ih: T,
    pub bound: T,
    pub holds: bool,
    pub outer_points: usize,
    pub closed_points: usize,
}

/// Compares `I^h` with `Σ_{i<h} γⁱ I¹`.
///
/// `I^h` is measured on the outer grid. `I¹` is measured on the same grid
/// extended by the chain `θ̃₁, …, θ̃_{h−1}` of successive one-step projections
/// from every outer point, which are exactly the parameters at which the
/// telescoping argument evaluates the one-step error.
pub fn check_h_step_bound<T: Real>(
    mdp: &TabularMdp<T>,
    ball: &ParamBall<T>,
    h: usize,
    outer_grid_size: usize,
    seed: u64,
) -> Result<HStepBound<T>> {
    if h == 0 {
        return Err(Error::InvalidArgument("horizon h must be at least 1".into()));
    }
    check_features(mdp, &ball.features)?;
    let grid = outer_grid(ball, outer_grid_size.max(1), seed)?;
    let gamma = mdp.discount();
    let mut i1_outer = T::zero();
    let mut i1 = T::zero();
    let mut ih = T::zero();
    let mut closed = grid.len();
    for theta in &grid {
        let mut current = theta.clone();
        for k in 0..h.max(1) {
            let proj = chebyshev_projection(ball, &backed_up(mdp, &ball.features, &current, 1)?)?;
            if k == 0 {
                i1_outer = max(i1_outer, proj.error);
            } else {
                closed += 1;
            }
            i1 = max(i1, proj.error);
            if k + 1 == h {
                break;
            }
            current = ball.project(&proj.theta_tilde);
        }
        if h > 1 {
            let proj = chebyshev_projection(ball, &backed_up(mdp, &ball.features, theta, h)?)?;
            ih = max(ih, proj.error);
        } else {
            ih = i1_outer;
        }
    }
    let mut bound = T::zero();
    let mut g = T::one();
    for _ in 0..h {
        bound += g * i1;
        g *= gamma;
    }
    Ok(HStepBound {
        i1,
        i1_outer,
        ih,
        bound,
        holds: ih <= bound + lit(1e-9),
        outer_points: grid.len(),
        closed_points: closed,
    })
}

/// Enumerates all `n_actions^n_states` deterministic policies.
pub fn deterministic_policies<T: Real>(n_states: usize, n_actions: usize, cap: usize) -> Result<Vec<PolicyTable<T>>> {
    let needed = (n_actions as f64).powi(n_states as i32);
    if needed > cap as f64 {
        return Err(Error::EnumerationCap { needed, cap });
    }
    let count = needed as usize;
    let mut out = Vec::with_capacity(count);
    let mut actions = vec![0usize; n_states];
    for _ in 0..count {
        out.push(PolicyTable::deterministic(&actions, n_actions)?);
        for slot in actions.iter_mut() {
            *slot += 1;
            if *slot < n_actions {
                break;
            }
            *slot = 0;
        }
    }
    Ok(out)
}

/// `√σ ‖φ_π‖_{Σ⁻¹}` with `φ_π = Φᵀ d^π`.
pub fn policy_uncertainty<T: Real>(
    mdp: &TabularMdp<T>,
    features: &FeatureMap<T>,
    precision_chol: &nalgebra::Cholesky<T, nalgebra::Dyn>,
    sigma: T,
    policy: &PolicyTable<T>,
) -> Result<T> {
    let d_pi = occupancy(mdp, policy)?;
    let phi_pi = features.matrix().transpose() * d_pi;
    let solved = precision_chol.solve(&phi_pi);
    Ok(sigma.sqrt() * max(phi_pi.dot(&solved), T::zero()).sqrt())
}

/// `U(σ) = max_π √σ ‖φ_π‖_{Σ⁻¹}` over `candidates`, or over every
/// deterministic policy when none are supplied.
pub fn max_uncertainty<T: Real>(
    mdp: &TabularMdp<T>,
    features: &FeatureMap<T>,
    precision: &DMatrix<T>,
    sigma: T,
    candidates: Option<&[PolicyTable<T>]>,
    cap: usize,
) -> Result<(T, PolicyTable<T>)> {
    check_features(mdp, features)?;
    let d = features.dim();
    if precision.shape() != (d, d) {
        return Err(shape_err(format!("{d}x{d}"), format!("{:?}", precision.shape())));
    }
    if !(sigma >= T::zero()) {
        return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("uncertainty precision".into()))?;
    let owned;
    let pool = match candidates {
        Some(c) => c,
        None => {
            owned = deterministic_policies(mdp.n_states(), mdp.n_actions(), cap)?;
            &owned[..]
        }
    };
    let mut best: Option<(T, &PolicyTable<T>)> = None;
    for pi in pool {
        let u = policy_uncertainty(mdp, features, &chol, sigma, pi)?;
        if best.as_ref().is_none_or(|(b, _)| u > *b) {
            best = Some((u, pi));
        }
    }
    let (value, policy) = best.ok_or_else(|| Error::InvalidArgument("empty candidate set".into()))?;
    Ok((value, policy.clone()))
}

/// Largest LS-projection residual of `TQ` over random bounded tables `Q`;
/// zero (to rounding) exactly when the span of `Φ` is closed under `T`
/// on the sampled inputs.
pub fn span_closure_residual<T: Real>(
    mdp: &TabularMdp<T>,
    features: &FeatureMap<T>,
    bound: T,
    samples: usize,
    seed: u64,
) -> Result<T> {
    check_features(mdp, features)?;
    let phi = features.matrix();
    let pinv = pseudo_inverse(phi, lit::<T>(1e-12));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = T::zero();
    for _ in 0..samples {
        let q = DVector::from_fn(phi.nrows(), |_, _| {
            bound * lit::<T>(rand::Rng::random_range(&mut rng, -1.0..=1.0))
        });
        let table = crate::bellman::QTable::from_vector(mdp.n_states(), mdp.n_actions(), q)?;
        let tq = crate::bellman::apply_optimal(mdp, &table)?.into_values();
        let fit = phi * (&pinv * &tq);
        worst = max(worst, sup_norm((tq - fit).iter().copied()));
    }
    Ok(worst)
}
