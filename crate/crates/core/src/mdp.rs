//! Finite MDPs, exact solvers and instance factories.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp1};

use crate::bellman::{apply_optimal, QTable};
use crate::error::{shape_err, Error, Result};
use crate::features::FeatureMap;
use crate::scalar::{abs, from_usize, lit, sup_norm, Real};

/// Tolerance used when validating probability vectors.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Row-major bijection between flat indices and `(state, action)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexBijection {
    pub n_states: usize,
    pub n_actions: usize,
}

impl IndexBijection {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
        }
    }

    #[inline]
    pub fn flat(&self, state: usize, action: usize) -> usize {
        debug_assert!(state < self.n_states && action < self.n_actions);
        state * self.n_actions + action
    }

    #[inline]
    pub fn pair(&self, index: usize) -> (usize, usize) {
        debug_assert!(index < self.len());
        (index / self.n_actions, index % self.n_actions)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_distribution<T: Real>(row: usize, values: impl Iterator<Item = T>) -> Result<()> {
    let mut sum = T::zero();
    let mut min = T::max_value().unwrap_or_else(T::one);
    for v in values {
        if !v.is_finite() {
            return Err(Error::NotStochastic {
                row,
                sum: f64::NAN,
                min: f64::NAN,
            });
        }
        sum += v;
        if v < min {
            min = v;
        }
    }
    let tol = lit::<T>(STOCHASTIC_TOL);
    if min < T::zero() || abs(sum - T::one()) > tol {
        return Err(Error::NotStochastic {
            row,
            sum: crate::scalar::to_f64(sum),
            min: crate::scalar::to_f64(min),
        });
    }
    Ok(())
}

/// A finite discounted MDP.
///
/// `transitions` has one row per flat state-action index and one column per
/// next state; `rewards` is indexed by the flat state-action index.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp<T: Real> {
    index: IndexBijection,
    transitions: DMatrix<T>,
    rewards: DVector<T>,
    discount: T,
    r_max: T,
    initial_dist: DVector<T>,
}

impl<T: Real> TabularMdp<T> {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: DMatrix<T>,
        rewards: DVector<T>,
        discount: T,
        r_max: T,
        initial_dist: DVector<T>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument(
                "an MDP needs at least one state and one action".into(),
            ));
        }
        let index = IndexBijection::new(n_states, n_actions);
        let n = index.len();
        if transitions.nrows() != n || transitions.ncols() != n_states {
            return Err(shape_err(
                format!("transitions {n}x{n_states}"),
                format!("{}x{}", transitions.nrows(), transitions.ncols()),
            ));
        }
        if rewards.len() != n {
            return Err(shape_err(format!("rewards[{n}]"), format!("[{}]", rewards.len())));
        }
        if initial_dist.len() != n_states {
            return Err(shape_err(
                format!("initial_dist[{n_states}]"),
                format!("[{}]", initial_dist.len()),
            ));
        }
        if !(discount >= T::zero() && discount < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in [0, 1), got {discount}"
            )));
        }
        if !(r_max > T::zero()) || !r_max.is_finite() {
            return Err(Error::InvalidArgument(format!("r_max must be positive, got {r_max}")));
        }
        for i in 0..n {
            check_distribution(i, transitions.row(i).iter().copied())?;
        }
        check_distribution(n, initial_dist.iter().copied())?;
        for (i, r) in rewards.iter().enumerate() {
            if !r.is_finite() || abs(*r) > r_max * (T::one() + lit(1e-12)) {
                return Err(Error::InvalidArgument(format!(
                    "reward {r} at index {i} exceeds r_max {r_max}"
                )));
            }
        }
        Ok(Self {
            index,
            transitions,
            rewards,
            discount,
            r_max,
            initial_dist,
        })
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.index.n_states
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.index.n_actions
    }

    #[inline]
    pub fn n_pairs(&self) -> usize {
        self.index.len()
    }

    #[inline]
    pub fn index(&self) -> IndexBijection {
        self.index
    }

    #[inline]
    pub fn discount(&self) -> T {
        self.discount
    }

    #[inline]
    pub fn r_max(&self) -> T {
        self.r_max
    }

    pub fn transitions(&self) -> &DMatrix<T> {
        &self.transitions
    }

    pub fn rewards(&self) -> &DVector<T> {
        &self.rewards
    }

    pub fn initial_dist(&self) -> &DVector<T> {
        &self.initial_dist
    }

    #[inline]
    pub fn reward(&self, state: usize, action: usize) -> T {
        self.rewards[self.index.flat(state, action)]
    }

    #[inline]
    pub fn prob(&self, state: usize, action: usize, next: usize) -> T {
        self.transitions[(self.index.flat(state, action), next)]
    }

    /// Same MDP with a different discount factor.
    pub fn with_discount(&self, discount: T) -> Result<Self> {
        Self::new(
            self.n_states(),
            self.n_actions(),
            self.transitions.clone(),
            self.rewards.clone(),
            discount,
            self.r_max,
            self.initial_dist.clone(),
        )
    }

    /// A state is absorbing when every action self-loops with zero reward.
    pub fn is_absorbing(&self, state: usize) -> bool {
        (0..self.n_actions()).all(|a| {
            self.prob(state, a, state) == T::one() && self.reward(state, a) == T::zero()
        })
    }

    /// Default parameter-ball bound `r_max / (1 - γ)`.
    pub fn default_param_bound(&self) -> T {
        self.r_max / (T::one() - self.discount)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(self.initial_dist.iter().copied(), rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        let row = self.index.flat(state, action);
        sample_index(self.transitions.row(row).iter().copied(), rng)
    }
}

fn sample_index<T: Real, R: Rng + ?Sized>(probs: impl Iterator<Item = T>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        let p = crate::scalar::to_f64(p);
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `π[s][a]`, one probability row per state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable<T: Real> {
    probs: DMatrix<T>,
}

impl<T: Real> PolicyTable<T> {
    pub fn new(probs: DMatrix<T>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::InvalidArgument("empty policy table".into()));
        }
        for s in 0..probs.nrows() {
            check_distribution(s, probs.row(s).iter().copied())?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = T::one() / from_usize(n_actions);
        Self {
            probs: DMatrix::from_element(n_states, n_actions, p),
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = DMatrix::zeros(actions.len(), n_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidArgument(format!(
                    "action {a} out of range for state {s}"
                )));
            }
            probs[(s, a)] = T::one();
        }
        Self::new(probs)
    }

    #[inline]
    pub fn prob(&self, state: usize, action: usize) -> T {
        self.probs[(state, action)]
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn probs(&self) -> &DMatrix<T> {
        &self.probs
    }

    /// Actions of a deterministic policy; `None` if some row is not one-hot.
    pub fn as_deterministic(&self) -> Option<Vec<usize>> {
        (0..self.n_states())
            .map(|s| (0..self.n_actions()).find(|&a| self.probs[(s, a)] == T::one()))
            .collect()
    }

    /// Sum over actions of `π(a|s) q(s, a)`.
    pub fn expectation(&self, q: &QTable<T>, state: usize) -> T {
        (0..self.n_actions()).fold(T::zero(), |acc, a| acc + self.probs[(state, a)] * q.get(state, a))
    }

    pub(crate) fn check_shape(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.n_states() != n_states || self.n_actions() != n_actions {
            return Err(shape_err(
                format!("policy {n_states}x{n_actions}"),
                format!("{}x{}", self.n_states(), self.n_actions()),
            ));
        }
        Ok(())
    }
}

/// Left-to-right chain with an absorbing goal on the right.
///
/// States `0..length` are transient, state `length` is the goal. Action 0
/// advances (succeeding with probability `1 - slip`, otherwise staying put),
/// action 1 retreats one state (state 0 retreats onto itself). The expected
/// reward of a transient action is `goal_reward` times its probability of
/// entering the goal; the goal pays nothing afterwards. Episodes start in
/// state 0.
pub fn make_chain<T: Real>(
    length: usize,
    slip: f64,
    goal_reward: f64,
    discount: f64,
) -> Result<TabularMdp<T>> {
    if length == 0 {
        return Err(Error::InvalidArgument("chain length must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&slip) {
        return Err(Error::InvalidArgument(format!("slip must lie in [0, 1), got {slip}")));
    }
    let n_states = length + 1;
    let n_actions = 2;
    let index = IndexBijection::new(n_states, n_actions);
    let goal = length;
    let mut transitions = DMatrix::<T>::zeros(index.len(), n_states);
    let mut rewards = DVector::<T>::zeros(index.len());
    for s in 0..length {
        let adv = index.flat(s, 0);
        transitions[(adv, s + 1)] += lit(1.0 - slip);
        transitions[(adv, s)] += lit(slip);
        if s + 1 == goal {
            rewards[adv] = lit(goal_reward * (1.0 - slip));
        }
        let back = index.flat(s, 1);
        transitions[(back, s.saturating_sub(1))] = T::one();
    }
    for a in 0..n_actions {
        transitions[(index.flat(goal, a), goal)] = T::one();
    }
    let mut initial = DVector::<T>::zeros(n_states);
    initial[0] = T::one();
    let r_max = if goal_reward.abs() > 0.0 { goal_reward.abs() } else { 1.0 };
    TabularMdp::new(
        n_states,
        n_actions,
        transitions,
        rewards,
        lit(discount),
        lit(r_max),
        initial,
    )
}

/// State layout of the deep-sea grid: the cell `(row, col)` with
/// `col <= row` is augmented with its row, which doubles as the time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeepSeaLayout {
    pub depth: usize,
}

impl DeepSeaLayout {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;

    pub fn state(&self, row: usize, col: usize) -> usize {
        debug_assert!(col <= row && row < self.depth);
        row * (row + 1) / 2 + col
    }

    pub fn terminal(&self) -> usize {
        self.depth * (self.depth + 1) / 2
    }

    pub fn n_states(&self) -> usize {
        self.terminal() + 1
    }

    pub fn move_cost(&self) -> f64 {
        0.01 / self.depth as f64
    }

    /// Undiscounted return of the unique rewarding trajectory.
    pub fn optimal_return(&self) -> f64 {
        1.0 - self.move_cost() * (self.depth as f64 - 1.0)
    }
}

/// Deep-sea exploration grid of the given depth.
///
/// Every step descends one row; "right" moves one column right and costs
/// `0.01 / depth`, "left" moves one column left (clamped at the wall). Taking
/// "right" in the bottom-right cell pays `1` instead of the cost. After
/// `depth` steps the episode enters an absorbing terminal state.
pub fn make_deep_sea<T: Real>(depth: usize, discount: f64) -> Result<TabularMdp<T>> {
    if depth < 2 {
        return Err(Error::InvalidArgument(format!("deep sea depth must be >= 2, got {depth}")));
    }
    let layout = DeepSeaLayout { depth };
    let n_states = layout.n_states();
    let index = IndexBijection::new(n_states, 2);
    let terminal = layout.terminal();
    let mut transitions = DMatrix::<T>::zeros(index.len(), n_states);
    let mut rewards = DVector::<T>::zeros(index.len());
    for row in 0..depth {
        for col in 0..=row {
            let s = layout.state(row, col);
            for a in [DeepSeaLayout::LEFT, DeepSeaLayout::RIGHT] {
                let i = index.flat(s, a);
                let next = if row + 1 == depth {
                    terminal
                } else if a == DeepSeaLayout::RIGHT {
                    layout.state(row + 1, col + 1)
                } else {
                    layout.state(row + 1, col.saturating_sub(1))
                };
                transitions[(i, next)] = T::one();
                if a == DeepSeaLayout::RIGHT {
                    rewards[i] = if row + 1 == depth && col + 1 == depth {
                        T::one()
                    } else {
                        lit(-layout.move_cost())
                    };
                }
            }
        }
    }
    for a in 0..2 {
        transitions[(index.flat(terminal, a), terminal)] = T::one();
    }
    let mut initial = DVector::<T>::zeros(n_states);
    initial[layout.state(0, 0)] = T::one();
    TabularMdp::new(n_states, 2, transitions, rewards, lit(discount), T::one(), initial)
}

/// A Linear MDP together with the factorization that makes it one.
#[derive(Clone, Debug)]
pub struct LinearMdp<T: Real> {
    pub mdp: TabularMdp<T>,
    pub features: FeatureMap<T>,
    /// `d x n_states`; each row is a distribution over next states.
    pub mixture: DMatrix<T>,
    pub reward_weights: DVector<T>,
}

impl<T: Real> LinearMdp<T> {
    /// Exact post-Bellman parameter `w + γ M V_θ` with `V_θ(s) = max_a φ(s,a)ᵀθ`,
    /// so that `T(Φθ) = Φ θ̃(θ)`.
    pub fn exact_next_params(&self, theta: &DVector<T>) -> DVector<T> {
        let q = self.features.q_values(theta);
        let v = DVector::from_iterator(
            self.mdp.n_states(),
            (0..self.mdp.n_states()).map(|s| q.max_value(s)),
        );
        &self.reward_weights + &self.mixture * v * self.mdp.discount()
    }

    /// Applies [`Self::exact_next_params`] to every column of a `d x m` grid.
    pub fn exact_next_grid(&self, grid: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(grid.nrows(), grid.ncols());
        for j in 0..grid.ncols() {
            out.set_column(j, &self.exact_next_params(&grid.column(j).into_owned()));
        }
        out
    }

    /// The same instance with rewards (and reward weights) multiplied by `scale`.
    pub fn with_reward_scale(&self, scale: T) -> Result<Self> {
        let mdp = TabularMdp::new(
            self.mdp.n_states(),
            self.mdp.n_actions(),
            self.mdp.transitions().clone(),
            self.mdp.rewards() * scale,
            self.mdp.discount(),
            crate::scalar::max(self.mdp.r_max() * abs(scale), T::one()),
            self.mdp.initial_dist().clone(),
        )?;
        Ok(Self {
            mdp,
            features: self.features.clone(),
            mixture: self.mixture.clone(),
            reward_weights: &self.reward_weights * scale,
        })
    }
}

const LINEAR_MDP_RETRIES: usize = 32;

fn sample_simplex<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

/// Samples a Linear MDP with `P = ΦM` and `r = Φw`.
///
/// Feature rows are drawn from the `d`-simplex, so they already satisfy
/// `‖φ(s,a)‖₂ ≤ 1` and every row of `ΦM` is a convex combination of the
/// distributions in `M`. Rank-deficient draws are resampled.
pub fn make_linear_mdp<T: Real>(
    n_states: usize,
    n_actions: usize,
    d: usize,
    discount: f64,
    seed: u64,
) -> Result<LinearMdp<T>> {
    let n = n_states * n_actions;
    if d == 0 {
        return Err(Error::InvalidArgument("feature dimension must be positive".into()));
    }
    if d > n {
        return Err(Error::InvalidArgument(format!(
            "feature dimension {d} exceeds the number of state-action pairs {n}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..LINEAR_MDP_RETRIES {
        let mut phi = DMatrix::<f64>::zeros(n, d);
        for i in 0..n {
            for (k, v) in sample_simplex(d, &mut rng).into_iter().enumerate() {
                phi[(i, k)] = v;
            }
        }
        let sv = crate::linalg::singular_values(&phi);
        let top = sv.max();
        if sv.iter().filter(|&&s| s > 1e-8 * top).count() < d {
            continue;
        }
        let mut mixture = DMatrix::<f64>::zeros(d, n_states);
        for k in 0..d {
            for (s, v) in sample_simplex(n_states, &mut rng).into_iter().enumerate() {
                mixture[(k, s)] = v;
            }
        }
        let weights = DVector::<f64>::from_iterator(d, (0..d).map(|_| rng.random_range(-1.0..=1.0)));
        let mut transitions = &phi * &mixture;
        // Renormalize away rounding so rows sum to one at machine precision.
        for mut row in transitions.row_iter_mut() {
            let total: f64 = row.iter().sum();
            row /= total;
        }
        let rewards = &phi * &weights;
        let cast = |m: &DMatrix<f64>| m.map(|x| lit::<T>(x));
        let initial = DVector::<T>::from_element(n_states, T::one() / from_usize(n_states));
        let mdp = TabularMdp::new(
            n_states,
            n_actions,
            cast(&transitions),
            rewards.map(|x| lit::<T>(x)),
            lit(discount),
            T::one(),
            initial,
        )?;
        let features = FeatureMap::new(n_states, n_actions, cast(&phi))?;
        return Ok(LinearMdp {
            mdp,
            features,
            mixture: cast(&mixture),
            reward_weights: weights.map(|x| lit::<T>(x)),
        });
    }
    Err(Error::Degenerate(format!(
        "no full-rank feature matrix after {LINEAR_MDP_RETRIES} draws"
    )))
}

/// Value iteration to `‖Q − Q*‖_∞ ≤ tol`, plus the greedy policy.
pub fn solve_optimal<T: Real>(mdp: &TabularMdp<T>, tol: T) -> Result<(QTable<T>, PolicyTable<T>)> {
    if !(tol > T::zero()) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let gamma = mdp.discount();
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    if gamma == T::zero() {
        let q = apply_optimal(mdp, &q)?;
        let pi = q.greedy_policy();
        return Ok((q, pi));
    }
    let threshold = tol * (T::one() - gamma) / gamma;
    loop {
        let next = apply_optimal(mdp, &q)?;
        let residual = sup_norm(next.values().iter().zip(q.values().iter()).map(|(a, b)| *a - *b));
        q = next;
        if residual <= threshold {
            break;
        }
    }
    let pi = q.greedy_policy();
    Ok((q, pi))
}

/// `P_π[s][s'] = Σ_a π(a|s) P[s][a][s']`.
pub fn state_transition_matrix<T: Real>(mdp: &TabularMdp<T>, policy: &PolicyTable<T>) -> DMatrix<T> {
    let n = mdp.n_states();
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = policy.prob(s, a);
            if w != T::zero() {
                let row = mdp.transitions().row(mdp.index().flat(s, a));
                for sp in 0..n {
                    p[(s, sp)] += w * row[sp];
                }
            }
        }
    }
    p
}

/// `(1−γ)`-normalized discounted state-action occupancy from `initial_dist`.
pub fn occupancy<T: Real>(mdp: &TabularMdp<T>, policy: &PolicyTable<T>) -> Result<DVector<T>> {
    policy.check_shape(mdp.n_states(), mdp.n_actions())?;
    let n = mdp.n_states();
    let gamma = mdp.discount();
    let p_pi = state_transition_matrix(mdp, policy);
    let system = DMatrix::<T>::identity(n, n) - p_pi.transpose() * gamma;
    let rhs = mdp.initial_dist() * (T::one() - gamma);
    let d_states = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("occupancy flow system is singular".into()))?;
    let index = mdp.index();
    let mut out = DVector::zeros(index.len());
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            out[index.flat(s, a)] = d_states[s] * policy.prob(s, a);
        }
    }
    Ok(out)
}

/// Exact `Q^π` by solving `(I − γ P Π) Q = r`.
pub fn evaluate_policy<T: Real>(mdp: &TabularMdp<T>, policy: &PolicyTable<T>) -> Result<QTable<T>> {
    policy.check_shape(mdp.n_states(), mdp.n_actions())?;
    let index = mdp.index();
    let n = index.len();
    let gamma = mdp.discount();
    let mut system = DMatrix::<T>::identity(n, n);
    for i in 0..n {
        for sp in 0..mdp.n_states() {
            let p = mdp.transitions()[(i, sp)];
            if p == T::zero() {
                continue;
            }
            for ap in 0..mdp.n_actions() {
                system[(i, index.flat(sp, ap))] -= gamma * p * policy.prob(sp, ap);
            }
        }
    }
    let q = system
        .lu()
        .solve(mdp.rewards())
        .ok_or_else(|| Error::Degenerate("policy evaluation system is singular".into()))?;
    QTable::from_vector(mdp.n_states(), mdp.n_actions(), q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::apply_optimal;

    fn single_state(reward: f64, gamma: f64) -> TabularMdp<f64> {
        TabularMdp::new(
            1,
            1,
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, reward),
            gamma,
            reward.abs().max(1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn bijection_roundtrips() {
        let k = IndexBijection::new(4, 3);
        for i in 0..k.len() {
            let (s, a) = k.pair(i);
            assert_eq!(k.flat(s, a), i);
        }
    }

    #[test]
    fn constructor_rejects_bad_rows() {
        let bad = DMatrix::from_row_slice(1, 2, &[0.7, 0.2]);
        let err = TabularMdp::new(2, 1, bad, DVector::zeros(1), 0.5, 1.0, DVector::from_vec(vec![1.0, 0.0]));
        assert!(err.is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.2, -0.2, 0.0, 1.0]);
        let err = TabularMdp::new(2, 1, neg, DVector::zeros(2), 0.5, 1.0, DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(err, Err(Error::NotStochastic { .. })));
        let err = TabularMdp::new(1, 1, DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 1.0, 1.0, DVector::from_element(1, 1.0));
        assert!(err.is_err());
        let err = TabularMdp::new(1, 1, DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 2.0), 0.5, 1.0, DVector::from_element(1, 1.0));
        assert!(err.is_err());
    }

    #[test]
    fn chain_of_length_one() {
        let mdp = make_chain::<f64>(1, 0.0, 1.0, 0.9).unwrap();
        assert!(mdp.is_absorbing(1));
        let (q, pi) = solve_optimal(&mdp, 1e-12).unwrap();
        assert!((q.max_value(0) - 1.0).abs() < 1e-12);
        assert_eq!(pi.as_deterministic().unwrap()[0], 0);
    }

    #[test]
    fn chain_of_length_three_half_discount() {
        let mdp = make_chain::<f64>(3, 0.0, 1.0, 0.5).unwrap();
        let (q, _) = solve_optimal(&mdp, 1e-12).unwrap();
        assert!((q.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((q.max_value(0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn chain_slip_row() {
        let mdp = make_chain::<f64>(2, 0.5, 1.0, 0.9).unwrap();
        assert_eq!(mdp.prob(0, 0, 0), 0.5);
        assert_eq!(mdp.prob(0, 0, 1), 0.5);
        for i in 0..mdp.n_pairs() {
            assert!((mdp.transitions().row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_rejects_bad_args() {
        assert!(make_chain::<f64>(0, 0.0, 1.0, 0.9).is_err());
        assert!(make_chain::<f64>(2, 1.0, 1.0, 0.9).is_err());
        assert!(make_chain::<f64>(2, -0.1, 1.0, 0.9).is_err());
    }

    #[test]
    fn deep_sea_depth_two() {
        let layout = DeepSeaLayout { depth: 2 };
        let mdp = make_deep_sea::<f64>(2, 0.99).unwrap();
        assert_eq!(mdp.n_states(), 4);
        assert!(mdp.is_absorbing(layout.terminal()));
        // Enumerate all four action sequences from the start.
        let mut rewarding = 0;
        for first in 0..2 {
            for second in 0..2 {
                let s1 = (0..mdp.n_states()).find(|&s| mdp.prob(0, first, s) == 1.0).unwrap();
                let total = mdp.reward(0, first) + mdp.reward(s1, second);
                if total > 0.5 {
                    rewarding += 1;
                    assert_eq!((first, second), (1, 1));
                }
            }
        }
        assert_eq!(rewarding, 1);
        assert!(make_deep_sea::<f64>(1, 0.99).is_err());
    }

    #[test]
    fn deep_sea_optimal_return() {
        let depth = 5;
        let layout = DeepSeaLayout { depth };
        let mdp = make_deep_sea::<f64>(depth, 0.99).unwrap();
        let (_, pi) = solve_optimal(&mdp, 1e-12).unwrap();
        let actions = pi.as_deterministic().unwrap();
        let mut s = layout.state(0, 0);
        let mut total = 0.0;
        while s != layout.terminal() {
            let a = actions[s];
            total += mdp.reward(s, a);
            s = (0..mdp.n_states()).find(|&n| mdp.prob(s, a, n) == 1.0).unwrap();
        }
        assert!((total - 0.992).abs() < 1e-12);
        assert!((layout.optimal_return() - 0.992).abs() < 1e-12);
    }

    #[test]
    fn deep_sea_uniform_policy_success_probability() {
        let depth = 5;
        let layout = DeepSeaLayout { depth };
        let mdp = make_deep_sea::<f64>(depth, 0.99).unwrap();
        // Forward-propagate the state distribution under the uniform policy.
        let mut dist = DVector::<f64>::zeros(mdp.n_states());
        dist[0] = 1.0;
        let mut success = 0.0;
        for _ in 0..depth {
            let mut next = DVector::zeros(mdp.n_states());
            for s in 0..mdp.n_states() {
                if dist[s] == 0.0 || s == layout.terminal() {
                    continue;
                }
                for a in 0..2 {
                    if mdp.reward(s, a) > 0.5 {
                        success += dist[s] * 0.5;
                    }
                    for sp in 0..mdp.n_states() {
                        next[sp] += dist[s] * 0.5 * mdp.prob(s, a, sp);
                    }
                }
            }
            dist = next;
        }
        assert!((success - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn linear_mdp_is_stochastic_and_bounded() {
        let lin = make_linear_mdp::<f64>(5, 2, 2, 0.9, 7).unwrap();
        let p = lin.mdp.transitions();
        for i in 0..p.nrows() {
            assert!((p.row(i).sum() - 1.0).abs() <= 1e-12);
        }
        for i in 0..lin.features.n_pairs() {
            assert!(lin.features.row(i).norm() <= 1.0 + 1e-12);
        }
        assert!(make_linear_mdp::<f64>(5, 2, 0, 0.9, 7).is_err());
        assert!(make_linear_mdp::<f64>(2, 2, 5, 0.9, 7).is_err());
    }

    #[test]
    fn linear_mdp_backup_stays_in_span() {
        let lin = make_linear_mdp::<f64>(6, 3, 3, 0.9, 11).unwrap();
        let theta = DVector::from_vec(vec![0.4, -1.3, 2.0]);
        let tq = apply_optimal(&lin.mdp, &lin.features.q_values(&theta)).unwrap();
        let via_params = lin.features.q_values(&lin.exact_next_params(&theta));
        let gap = (tq.values() - via_params.values()).amax();
        assert!(gap < 1e-12, "gap {gap}");
    }

    #[test]
    fn single_state_fixed_point() {
        let mdp = single_state(1.0, 0.5);
        let (q, _) = solve_optimal(&mdp, 1e-12).unwrap();
        assert!((q.get(0, 0) - 2.0).abs() < 1e-12);
        assert!(solve_optimal(&mdp, 0.0).is_err());
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let lin = make_linear_mdp::<f64>(4, 2, 2, 0.9, 3).unwrap();
        let m = &lin.mdp;
        let zero = TabularMdp::new(
            m.n_states(),
            m.n_actions(),
            m.transitions().clone(),
            DVector::zeros(m.n_pairs()),
            0.9,
            1.0,
            m.initial_dist().clone(),
        )
        .unwrap();
        let (q, _) = solve_optimal(&zero, 1e-10).unwrap();
        assert_eq!(q.values().amax(), 0.0);
    }

    #[test]
    fn occupancy_single_pair() {
        let mdp = single_state(1.0, 0.7);
        let d = occupancy(&mdp, &PolicyTable::uniform(1, 1)).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn occupancy_two_state_cycle() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mdp = TabularMdp::<f64>::new(2, 1, p, DVector::zeros(2), 0.5, 1.0, DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let d = occupancy(&mdp, &PolicyTable::uniform(2, 1)).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((d.sum() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn occupancy_satisfies_flow_equations() {
        let lin = make_linear_mdp::<f64>(7, 3, 3, 0.8, 5).unwrap();
        let mdp = &lin.mdp;
        let pi = PolicyTable::uniform(7, 3);
        let d = occupancy(mdp, &pi).unwrap();
        assert!((d.sum() - 1.0).abs() < 1e-10);
        let index = mdp.index();
        let mut residual = 0.0;
        for sp in 0..7 {
            for ap in 0..3 {
                let mut inflow = 0.0;
                for i in 0..index.len() {
                    inflow += d[i] * mdp.transitions()[(i, sp)];
                }
                let expected = (1.0 - 0.8) * mdp.initial_dist()[sp] * pi.prob(sp, ap)
                    + 0.8 * inflow * pi.prob(sp, ap);
                residual += (d[index.flat(sp, ap)] - expected).abs();
            }
        }
        assert!(residual <= 1e-10, "residual {residual}");
    }

    #[test]
    fn policy_evaluation_is_a_fixed_point() {
        let lin = make_linear_mdp::<f64>(5, 2, 3, 0.9, 1).unwrap();
        let pi = PolicyTable::uniform(5, 2);
        let q = evaluate_policy(&lin.mdp, &pi).unwrap();
        let back = crate::bellman::apply_policy(&lin.mdp, &q, &pi).unwrap();
        assert!((back.values() - q.values()).amax() < 1e-12);
    }
}
