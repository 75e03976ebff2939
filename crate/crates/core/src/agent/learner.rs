use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use crate::bellman::retrace_target_sampled;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::Svd;
use crate::scalar::{from_usize, lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Exact ridge-regularized least-squares solve per sweep.
    LeastSquares,
    /// Minibatch gradient steps on the Q-learning loss.
    Sgd,
}

/// Settings of one policy-optimization phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizationSettings<T: Real> {
    pub optimizer: Optimizer,
    pub gamma: T,
    pub ridge: T,
    /// Solves (LS) or gradient steps (SGD) per phase.
    pub steps: usize,
    /// The target parameters are replaced by the current ones every
    /// `target_period` steps.
    pub target_period: usize,
    pub batch_size: usize,
    pub learning_rate: T,
    /// Retrace with this `β`, segment length and target-policy `ε`.
    pub retrace: Option<RetraceSettings<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetraceSettings<T: Real> {
    pub beta: T,
    pub max_len: usize,
    pub epsilon: T,
}

fn state_values<T: Real>(features: &FeatureMap<T>, theta: &DVector<T>) -> Vec<T> {
    let q = features.q_values(theta);
    (0..features.n_states()).map(|s| q.max_value(s)).collect()
}

pub(crate) fn solve_normal<T: Real>(a: DMatrix<T>, b: DVector<T>) -> Result<DVector<T>> {
    NormalSolver::new(a)?.solve(&b)
}

/// Factored normal-equation matrix, reused across right-hand sides.
pub(crate) enum NormalSolver<T: Real> {
    Cholesky(nalgebra::Cholesky<T, nalgebra::Dyn>),
    Svd(Svd<T>),
}

impl<T: Real> NormalSolver<T> {
    pub(crate) fn new(a: DMatrix<T>) -> Result<Self> {
        if let Some(chol) = a.clone().cholesky() {
            return Ok(Self::Cholesky(chol));
        }
        Ok(Self::Svd(Svd::new(&a)))
    }

    pub(crate) fn solve(&self, b: &DVector<T>) -> Result<DVector<T>> {
        match self {
            Self::Cholesky(chol) => Ok(chol.solve(b)),
            Self::Svd(svd) => Ok(svd.solve(b, lit::<T>(1e-12) * svd.top())),
        }
    }
}

/// `λI + Σ φφᵀ` over the buffer.
fn buffer_gram<T: Real>(buffer: &ReplayBuffer<T>, features: &FeatureMap<T>, ridge: T) -> DMatrix<T> {
    let d = features.dim();
    let mut a = DMatrix::identity(d, d) * ridge;
    for g in buffer.groups() {
        let phi = features.phi(g.state, g.action);
        a.ger(from_usize::<T>(g.count), &phi, &phi, T::one());
    }
    a
}

/// `Σ φ y` with one-step Q-learning targets, from grouped sufficient statistics.
fn backup_rhs<T: Real>(buffer: &ReplayBuffer<T>, features: &FeatureMap<T>, target: &DVector<T>, gamma: T) -> DVector<T> {
    let v = state_values(features, target);
    let mut b = DVector::zeros(features.dim());
    for g in buffer.groups() {
        let phi = features.phi(g.state, g.action);
        let boot = if g.terminal { T::zero() } else { gamma * v[g.next_state] * from_usize::<T>(g.count) };
        b.axpy(g.reward_sum + boot, &phi, T::one());
    }
    b
}

fn check_nonempty<T: Real>(buffer: &ReplayBuffer<T>) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("replay buffer is empty".into()));
    }
    Ok(())
}

/// Solves `(λI + Σ φφᵀ) θ̂ = Σ φ y` with `y = r + γ max_a' φ(s',a')ᵀθ⁻`
/// (no bootstrap at terminals).
pub fn least_squares<T: Real>(
    buffer: &ReplayBuffer<T>,
    features: &FeatureMap<T>,
    target: &DVector<T>,
    ridge: T,
    gamma: T,
) -> Result<DVector<T>> {
    check_nonempty(buffer)?;
    NormalSolver::new(buffer_gram(buffer, features, ridge))?.solve(&backup_rhs(buffer, features, target, gamma))
}

/// Least squares against explicit per-transition targets.
pub fn least_squares_on_targets<T: Real>(
    buffer: &ReplayBuffer<T>,
    features: &FeatureMap<T>,
    targets: &[T],
    ridge: T,
) -> Result<DVector<T>> {
    check_nonempty(buffer)?;
    if targets.len() != buffer.len() {
        return Err(crate::error::shape_err(format!("{} targets", buffer.len()), format!("{}", targets.len())));
    }
    NormalSolver::new(buffer_gram(buffer, features, ridge))?.solve(&targets_rhs(buffer, features, targets))
}

fn targets_rhs<T: Real>(buffer: &ReplayBuffer<T>, features: &FeatureMap<T>, targets: &[T]) -> DVector<T> {
    let mut b = DVector::zeros(features.dim());
    for (t, &y) in buffer.iter().zip(targets) {
        b.axpy(y, &features.phi(t.state, t.action), T::one());
    }
    b
}

/// One-step Q-learning targets for every stored transition.
pub fn q_learning_targets<T: Real>(buffer: &ReplayBuffer<T>, features: &FeatureMap<T>, target: &DVector<T>, gamma: T) -> Vec<T> {
    let v = state_values(features, target);
    buffer
        .iter()
        .map(|t| t.reward + if t.terminal { T::zero() } else { gamma * v[t.next_state] })
        .collect()
}

/// Retrace targets for every stored transition from the segment starting
/// there, with `Q = Φθ⁻` and the `ε`-greedy policy of `Φθ`.
pub fn retrace_targets<T: Real>(
    buffer: &ReplayBuffer<T>,
    features: &FeatureMap<T>,
    target: &DVector<T>,
    theta: &DVector<T>,
    settings: &RetraceSettings<T>,
    gamma: T,
) -> Result<Vec<T>> {
    let q = features.q_values(target);
    let policy = features.q_values(theta).epsilon_greedy_policy(settings.epsilon);
    (0..buffer.len())
        .map(|i| {
            let seg = buffer.segment(i, settings.max_len).expect("index within buffer");
            Ok(retrace_target_sampled(&seg, &q, &policy, settings.beta, gamma, None)?[0])
        })
        .collect()
}

fn targets_for<T: Real>(
    buffer: &ReplayBuffer<T>,
    features: &FeatureMap<T>,
    target: &DVector<T>,
    theta: &DVector<T>,
    settings: &OptimizationSettings<T>,
) -> Result<Vec<T>> {
    match &settings.retrace {
        Some(r) => retrace_targets(buffer, features, target, theta, r, settings.gamma),
        None => Ok(q_learning_targets(buffer, features, target, settings.gamma)),
    }
}

/// Runs one policy-optimization phase; returns the new `(θ, θ⁻)`.
pub fn policy_optimization<T: Real, R: Rng + ?Sized>(
    buffer: &ReplayBuffer<T>,
    features: &FeatureMap<T>,
    theta: &DVector<T>,
    target: &DVector<T>,
    settings: &OptimizationSettings<T>,
    rng: &mut R,
) -> Result<(DVector<T>, DVector<T>)> {
    check_nonempty(buffer)?;
    if settings.target_period == 0 {
        return Err(Error::InvalidArgument("target period must be positive".into()));
    }
    let mut theta = theta.clone();
    let mut target = target.clone();
    match settings.optimizer {
        Optimizer::LeastSquares => {
            let solver = NormalSolver::new(buffer_gram(buffer, features, settings.ridge))?;
            for k in 0..settings.steps {
                theta = match &settings.retrace {
                    None => solver.solve(&backup_rhs(buffer, features, &target, settings.gamma))?,
                    Some(_) => {
                        let y = targets_for(buffer, features, &target, &theta, settings)?;
                        solver.solve(&targets_rhs(buffer, features, &y))?
                    }
                };
                if !theta.iter().all(|v| v.is_finite()) {
                    return Err(Error::Divergence { step: k, loss: f64::NAN });
                }
                if (k + 1) % settings.target_period == 0 {
                    target = theta.clone();
                }
            }
        }
        Optimizer::Sgd => {
            if settings.batch_size == 0 || !(settings.learning_rate > T::zero()) {
                return Err(Error::InvalidArgument("SGD needs a positive batch size and learning rate".into()));
            }
            let mut y = targets_for(buffer, features, &target, &theta, settings)?;
            let mut streak = 0;
            let mut prev = None;
            let scale = lit::<T>(2.0) / from_usize::<T>(settings.batch_size);
            for k in 0..settings.steps {
                let batch = buffer.sample_indices(settings.batch_size, rng);
                let mut grad = DVector::zeros(features.dim());
                let mut loss = T::zero();
                for &i in &batch {
                    let t = buffer.get(i).expect("sampled index within buffer");
                    let phi = features.phi(t.state, t.action);
                    let err = phi.dot(&theta) - y[i];
                    loss += err * err;
                    grad += phi * (err * scale);
                }
                let loss = loss / from_usize::<T>(settings.batch_size);
                if !loss.is_finite() {
                    return Err(Error::Divergence { step: k, loss: crate::scalar::to_f64(loss) });
                }
                if let Some(p) = prev {
                    streak = if loss > p { streak + 1 } else { 0 };
                    if streak >= 10 {
                        return Err(Error::Divergence { step: k, loss: crate::scalar::to_f64(loss) });
                    }
                }
                prev = Some(loss);
                theta -= grad * settings.learning_rate;
                if (k + 1) % settings.target_period == 0 {
                    target = theta.clone();
                    y = targets_for(buffer, features, &target, &theta, settings)?;
                    prev = None;
                    streak = 0;
                }
            }
        }
    }
    Ok((theta, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::buffer::StoredTransition;
    use crate::mdp::{make_chain, make_linear_mdp, solve_optimal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn settings(steps: usize) -> OptimizationSettings<f64> {
        OptimizationSettings {
            optimizer: Optimizer::LeastSquares,
            gamma: 0.9,
            ridge: 1e-12,
            steps,
            target_period: 1,
            batch_size: 32,
            learning_rate: 0.1,
            retrace: None,
        }
    }

    fn full_coverage<T: Real>(mdp: &crate::mdp::TabularMdp<T>, copies: usize) -> ReplayBuffer<T> {
        let mut buf = ReplayBuffer::new(100_000, mdp.n_states(), mdp.n_actions()).unwrap();
        for _ in 0..copies {
            for s in 0..mdp.n_states() {
                for a in 0..mdp.n_actions() {
                    for s2 in 0..mdp.n_states() {
                        if mdp.prob(s, a, s2) > T::zero() {
                            buf.push(StoredTransition {
                                state: s,
                                action: a,
                                reward: mdp.reward(s, a),
                                next_state: s2,
                                terminal: false,
                                behavior_prob: T::one(),
                                episode: 0,
                            })
                            .unwrap();
                        }
                    }
                }
            }
        }
        buf
    }

    #[test]
    fn scalar_ridge_example() {
        let features = FeatureMap::new(2, 1, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let mut buf = ReplayBuffer::new(4, 2, 1).unwrap();
        buf.push(StoredTransition { state: 0, action: 0, reward: 3.0, next_state: 1, terminal: true, behavior_prob: 1.0, episode: 0 }).unwrap();
        let theta = least_squares(&buf, &features, &DVector::zeros(2), 1.0, 0.9).unwrap();
        assert!((&theta - DVector::from_vec(vec![1.5, 0.0])).amax() <= 1e-15);
        let (opt, _) = policy_optimization(&buf, &features, &DVector::zeros(2), &DVector::zeros(2), &OptimizationSettings { ridge: 1.0, ..settings(1) }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(opt, theta);
    }

    #[test]
    fn duplicated_buffer_with_doubled_ridge_is_unchanged() {
        let lin = make_linear_mdp::<f64>(5, 2, 3, 0.9, 1).unwrap();
        let one = full_coverage(&lin.mdp, 1);
        let two = full_coverage(&lin.mdp, 2);
        let target = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let a = least_squares(&one, &lin.features, &target, 0.3, 0.9).unwrap();
        let b = least_squares(&two, &lin.features, &target, 0.6, 0.9).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn backup_of_optimal_params_reproduces_them() {
        // Diagonal features on a deterministic MDP have zero inherent Bellman
        // error, so a covering buffer gives the exact backup.
        let mdp = crate::mdp::make_deep_sea::<f64>(4, 0.9).unwrap();
        let n = mdp.n_pairs();
        let scale = DVector::from_fn(n, |i, _| 0.5 + 0.5 * ((i * 7) % 11) as f64 / 11.0);
        let features = FeatureMap::new(mdp.n_states(), 2, DMatrix::from_diagonal(&scale)).unwrap();
        let (qstar, _) = solve_optimal(&mdp, 1e-13).unwrap();
        let theta_star = qstar.values().component_div(&scale);
        let buf = full_coverage(&mdp, 1);
        let fit = least_squares(&buf, &features, &theta_star, 1e-14, 0.9).unwrap();
        assert!((fit - &theta_star).amax() < 1e-8);
    }

    #[test]
    fn one_hot_fitted_iteration_reaches_optimal_q() {
        let mdp = make_chain::<f64>(5, 0.0, 1.0, 0.9).unwrap();
        let features = FeatureMap::one_hot(6, 2);
        let buf = full_coverage(&mdp, 1);
        let (theta, _) = policy_optimization(&buf, &features, &DVector::zeros(12), &DVector::zeros(12), &settings(400), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (qstar, _) = solve_optimal(&mdp, 1e-13).unwrap();
        assert!((theta - qstar.values()).amax() < 1e-6);
    }

    #[test]
    fn zero_reward_keeps_zero_parameters() {
        let mdp = make_chain::<f64>(3, 0.2, 0.0, 0.9).unwrap();
        let features = FeatureMap::one_hot(4, 2);
        let buf = full_coverage(&mdp, 1);
        for optimizer in [Optimizer::LeastSquares, Optimizer::Sgd] {
            let s = OptimizationSettings { optimizer, ..settings(10) };
            let (theta, _) = policy_optimization(&buf, &features, &DVector::zeros(8), &DVector::zeros(8), &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(theta.amax(), 0.0);
        }
    }

    #[test]
    fn sgd_approaches_least_squares() {
        let mdp = make_chain::<f64>(3, 0.0, 1.0, 0.5).unwrap();
        let features = FeatureMap::one_hot(4, 2);
        let buf = full_coverage(&mdp, 1);
        let target = DVector::from_element(8, 0.2);
        let s = OptimizationSettings { optimizer: Optimizer::Sgd, steps: 5000, target_period: 1_000_000, learning_rate: 0.5, batch_size: 8, ..settings(0) };
        let (theta, _) = policy_optimization(&buf, &features, &DVector::zeros(8), &target, &OptimizationSettings { gamma: 0.5, ..s }, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let exact = least_squares(&buf, &features, &target, 1e-12, 0.5).unwrap();
        assert!((theta - exact).amax() < 1e-6);
    }
}
