//! Bellman operators on tabular Q-functions: `T`, `T^π`, `T^h`, Retrace and
//! the value-rescaling transform.

use nalgebra::DVector;

use crate::error::{shape_err, Error, Result};
use crate::mdp::{PolicyTable, TabularMdp};
use crate::scalar::{from_usize, lit, Real};

/// Q-values stored flat in the row-major `(state, action)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable<T: Real> {
    n_states: usize,
    n_actions: usize,
    values: DVector<T>,
}

impl<T: Real> QTable<T> {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: DVector::zeros(n_states * n_actions),
        }
    }

    pub fn from_vector(n_states: usize, n_actions: usize, values: DVector<T>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(shape_err(
                format!("[{}]", n_states * n_actions),
                format!("[{}]", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("Q-table has non-finite entries".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, state: usize, action: usize) -> T {
        self.values[state * self.n_actions + action]
    }

    #[inline]
    pub fn set(&mut self, state: usize, action: usize, value: T) {
        self.values[state * self.n_actions + action] = value;
    }

    pub fn values(&self) -> &DVector<T> {
        &self.values
    }

    pub fn into_values(self) -> DVector<T> {
        self.values
    }

    /// Greedy action with lowest-index tie-breaking.
    pub fn greedy_action(&self, state: usize) -> usize {
        let mut best = 0;
        for a in 1..self.n_actions {
            if self.get(state, a) > self.get(state, best) {
                best = a;
            }
        }
        best
    }

    pub fn max_value(&self, state: usize) -> T {
        self.get(state, self.greedy_action(state))
    }

    pub fn greedy_policy(&self) -> PolicyTable<T> {
        self.epsilon_greedy_policy(T::zero())
    }

    /// Mixes the greedy policy with the uniform policy at rate `epsilon`.
    pub fn epsilon_greedy_policy(&self, epsilon: T) -> PolicyTable<T> {
        let spread = epsilon / from_usize(self.n_actions);
        let mut probs = nalgebra::DMatrix::from_element(self.n_states, self.n_actions, spread);
        for s in 0..self.n_states {
            probs[(s, self.greedy_action(s))] += T::one() - epsilon;
        }
        PolicyTable::new(probs).expect("epsilon-greedy rows are distributions")
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values.map(f),
        }
    }

    fn check_shape(&self, mdp: &TabularMdp<T>) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(shape_err(
                format!("Q {}x{}", mdp.n_states(), mdp.n_actions()),
                format!("{}x{}", self.n_states, self.n_actions),
            ));
        }
        Ok(())
    }
}

/// `(TQ)(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) max_{a'} Q(s',a')`.
pub fn apply_optimal<T: Real>(mdp: &TabularMdp<T>, q: &QTable<T>) -> Result<QTable<T>> {
    q.check_shape(mdp)?;
    let v = DVector::from_iterator(mdp.n_states(), (0..mdp.n_states()).map(|s| q.max_value(s)));
    backup(mdp, &v)
}

/// `(T^π Q)(s,a) = r(s,a) + γ E_{s'∼P, a'∼π} Q(s',a')`.
pub fn apply_policy<T: Real>(
    mdp: &TabularMdp<T>,
    q: &QTable<T>,
    policy: &PolicyTable<T>,
) -> Result<QTable<T>> {
    q.check_shape(mdp)?;
    policy.check_shape(mdp.n_states(), mdp.n_actions())?;
    let v = DVector::from_iterator(
        mdp.n_states(),
        (0..mdp.n_states()).map(|s| policy.expectation(q, s)),
    );
    backup(mdp, &v)
}

fn backup<T: Real>(mdp: &TabularMdp<T>, next_values: &DVector<T>) -> Result<QTable<T>> {
    let values = mdp.rewards() + mdp.transitions() * next_values * mdp.discount();
    QTable::from_vector(mdp.n_states(), mdp.n_actions(), values)
}

/// `T^h Q` by `h`-fold composition of [`apply_optimal`].
pub fn apply_h_step<T: Real>(mdp: &TabularMdp<T>, q: &QTable<T>, h: usize) -> Result<QTable<T>> {
    if h == 0 {
        return Err(Error::InvalidArgument("horizon h must be at least 1".into()));
    }
    let mut out = apply_optimal(mdp, q)?;
    for _ in 1..h {
        out = apply_optimal(mdp, &out)?;
    }
    Ok(out)
}

/// `f(x) = sign(x)(√(|x|+1) − 1) + εx`, the value-rescaling transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueTransform<T: Real> {
    pub epsilon: T,
}

impl<T: Real> Default for ValueTransform<T> {
    fn default() -> Self {
        Self { epsilon: lit(1e-3) }
    }
}

impl<T: Real> ValueTransform<T> {
    pub fn new(epsilon: T) -> Result<Self> {
        if !(epsilon >= T::zero()) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "transform epsilon must be non-negative, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn forward(&self, x: T) -> T {
        let mag = (x.abs() + T::one()).sqrt() - T::one();
        let signed = if x < T::zero() { -mag } else { mag };
        signed + self.epsilon * x
    }

    /// Closed-form inverse. With `u = √(|x|+1)` the positive branch reads
    /// `εu² + u − (1 + ε + |y|) = 0`; the root is taken in rationalized form
    /// so that it stays accurate as `ε → 0`.
    pub fn inverse(&self, y: T) -> T {
        let c = T::one() + self.epsilon + y.abs();
        let four = lit::<T>(4.0);
        let two = lit::<T>(2.0);
        let u = two * c / (T::one() + (T::one() + four * self.epsilon * c).sqrt());
        let mag = u * u - T::one();
        if y < T::zero() {
            -mag
        } else {
            mag
        }
    }
}

/// `f⁻¹(f(x))`.
pub fn transform_roundtrip<T: Real>(transform: &ValueTransform<T>, x: T) -> T {
    transform.inverse(transform.forward(x))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition<T: Real> {
    pub state: usize,
    pub action: usize,
    pub reward: T,
    pub next_state: usize,
    pub behavior_prob: T,
}

/// A contiguous piece of one episode, in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySegment<T: Real> {
    pub steps: Vec<Transition<T>>,
    /// The last transition enters a terminal state.
    pub terminal: bool,
}

impl<T: Real> TrajectorySegment<T> {
    fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory segment".into()));
        }
        for (k, step) in self.steps.iter().enumerate() {
            if step.state >= n_states || step.next_state >= n_states || step.action >= n_actions {
                return Err(Error::InvalidArgument(format!("step {k} indexes outside the MDP")));
            }
            if !(step.behavior_prob > T::zero() && step.behavior_prob <= T::one()) {
                return Err(Error::InvalidArgument(format!(
                    "step {k} has behavior probability {} outside (0, 1]",
                    step.behavior_prob
                )));
            }
        }
        Ok(())
    }
}

fn check_beta<T: Real>(beta: T) -> Result<()> {
    if !(beta >= T::zero() && beta <= T::one()) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// Backward Retrace recursion `G_t = δ_t + γ c_{t+1} G_{t+1}`; returns
/// `Q(s_t,a_t) + G_t` for every start index.
fn retrace_sum<T: Real>(
    segment: &TrajectorySegment<T>,
    q: &QTable<T>,
    policy: &PolicyTable<T>,
    beta: T,
    gamma: T,
    deltas: &[T],
) -> Vec<T> {
    let n = segment.steps.len();
    let mut out = vec![T::zero(); n];
    let mut tail = T::zero();
    for t in (0..n).rev() {
        if t + 1 < n {
            let next = &segment.steps[t + 1];
            let ratio = policy.prob(next.state, next.action) / next.behavior_prob;
            let c = beta * if ratio < T::one() { ratio } else { T::one() };
            tail = deltas[t] + gamma * c * tail;
        } else {
            tail = deltas[t];
        }
        let step = &segment.steps[t];
        out[t] = q.get(step.state, step.action) + tail;
    }
    out
}

fn with_transform<T: Real>(
    q: &QTable<T>,
    transform: Option<&ValueTransform<T>>,
    run: impl FnOnce(&QTable<T>) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    match transform {
        None => run(q),
        Some(f) => {
            let raw = q.map(|y| f.inverse(y));
            Ok(run(&raw)?.into_iter().map(|x| f.forward(x)).collect())
        }
    }
}

/// Retrace targets with model-exact TD errors `δ_k = (T^π Q)(s_k,a_k) − Q(s_k,a_k)`.
///
/// With a transform the targets are `f(R f⁻¹(Q))`.
pub fn retrace_target<T: Real>(
    mdp: &TabularMdp<T>,
    segment: &TrajectorySegment<T>,
    q: &QTable<T>,
    policy: &PolicyTable<T>,
    beta: T,
    transform: Option<&ValueTransform<T>>,
) -> Result<Vec<T>> {
    q.check_shape(mdp)?;
    policy.check_shape(mdp.n_states(), mdp.n_actions())?;
    segment.validate(mdp.n_states(), mdp.n_actions())?;
    check_beta(beta)?;
    with_transform(q, transform, |q| {
        let tq = apply_policy(mdp, q, policy)?;
        let deltas: Vec<T> = segment
            .steps
            .iter()
            .map(|s| tq.get(s.state, s.action) - q.get(s.state, s.action))
            .collect();
        Ok(retrace_sum(segment, q, policy, beta, mdp.discount(), &deltas))
    })
}

/// Retrace targets from the sampled transitions alone:
/// `δ_k = r_k + γ E_π Q(s_{k+1}, ·) − Q(s_k,a_k)`, with no bootstrap past a
/// terminal transition.
pub fn retrace_target_sampled<T: Real>(
    segment: &TrajectorySegment<T>,
    q: &QTable<T>,
    policy: &PolicyTable<T>,
    beta: T,
    gamma: T,
    transform: Option<&ValueTransform<T>>,
) -> Result<Vec<T>> {
    policy.check_shape(q.n_states(), q.n_actions())?;
    segment.validate(q.n_states(), q.n_actions())?;
    check_beta(beta)?;
    let last = segment.steps.len() - 1;
    with_transform(q, transform, |q| {
        let deltas: Vec<T> = segment
            .steps
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let bootstrap = if k == last && segment.terminal {
                    T::zero()
                } else {
                    policy.expectation(q, s.next_state)
                };
                s.reward + gamma * bootstrap - q.get(s.state, s.action)
            })
            .collect();
        Ok(retrace_sum(segment, q, policy, beta, gamma, &deltas))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{evaluate_policy, make_chain, make_linear_mdp, solve_optimal};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_state(reward: f64, gamma: f64, n_actions: usize) -> TabularMdp<f64> {
        TabularMdp::new(
            1,
            n_actions,
            DMatrix::from_element(n_actions, 1, 1.0),
            DVector::from_element(n_actions, reward),
            gamma,
            1.0,
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    fn random_q(n: usize, a: usize, scale: f64, rng: &mut impl Rng) -> QTable<f64> {
        QTable::from_vector(n, a, DVector::from_fn(n * a, |_, _| rng.random_range(-scale..scale))).unwrap()
    }

    #[test]
    fn zero_q_backs_up_to_reward() {
        let lin = make_linear_mdp::<f64>(5, 3, 2, 0.9, 1).unwrap();
        let tq = apply_optimal(&lin.mdp, &QTable::zeros(5, 3)).unwrap();
        assert_eq!(tq.values(), lin.mdp.rewards());
    }

    #[test]
    fn single_state_arithmetic() {
        let mdp = single_state(1.0, 0.5, 1);
        let q = QTable::from_vector(1, 1, DVector::from_element(1, 4.0)).unwrap();
        assert_eq!(apply_optimal(&mdp, &q).unwrap().get(0, 0), 3.0);
    }

    #[test]
    fn optimal_q_is_fixed_point() {
        let mdp = make_chain::<f64>(4, 0.2, 1.0, 0.9).unwrap();
        let (q, _) = solve_optimal(&mdp, 1e-10).unwrap();
        let tq = apply_optimal(&mdp, &q).unwrap();
        assert!((tq.values() - q.values()).amax() <= 2e-10);
        for h in [1, 2, 5] {
            let th = apply_h_step(&mdp, &q, h).unwrap();
            assert!((th.values() - q.values()).amax() <= 2e-10);
        }
    }

    #[test]
    fn uniform_policy_averages() {
        // Two states: state 0 moves to state 1 under both actions; state 1 loops.
        let p = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let mdp = TabularMdp::<f64>::new(2, 2, p, DVector::zeros(4), 0.999_999, 1.0, DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let q = QTable::from_vector(2, 2, DVector::from_vec(vec![0.0, 0.0, 0.0, 2.0])).unwrap();
        let out = apply_policy(&mdp, &q, &PolicyTable::uniform(2, 2)).unwrap();
        assert!((out.get(0, 0) - 0.999_999).abs() < 1e-12);
    }

    #[test]
    fn constant_q_scales_by_discount() {
        let lin = make_linear_mdp::<f64>(4, 2, 2, 0.7, 9).unwrap();
        let zero_r = TabularMdp::new(4, 2, lin.mdp.transitions().clone(), DVector::zeros(8), 0.7, 1.0, lin.mdp.initial_dist().clone()).unwrap();
        let q = QTable::from_vector(4, 2, DVector::from_element(8, 5.0)).unwrap();
        let out = apply_policy(&zero_r, &q, &PolicyTable::uniform(4, 2)).unwrap();
        assert!(out.values().iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn h_step_rejects_zero_and_base_case_matches() {
        let mdp = make_chain::<f64>(3, 0.1, 1.0, 0.9).unwrap();
        let q = QTable::zeros(4, 2);
        assert!(apply_h_step(&mdp, &q, 0).is_err());
        assert_eq!(apply_h_step(&mdp, &q, 1).unwrap(), apply_optimal(&mdp, &q).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mdp = make_chain::<f64>(3, 0.1, 1.0, 0.9).unwrap();
        assert!(apply_optimal(&mdp, &QTable::zeros(3, 2)).is_err());
    }

    #[test]
    fn transform_examples() {
        let f = ValueTransform::<f64>::default();
        assert_eq!(f.forward(0.0), 0.0);
        assert_eq!(transform_roundtrip(&f, 0.0), 0.0);
        assert!((f.forward(3.0) - 1.003).abs() < 1e-15);
        assert!((transform_roundtrip(&f, 3.0) - 3.0).abs() < 1e-12);
        assert!(ValueTransform::new(-1.0).is_err());
    }

    #[test]
    fn transform_inverse_agrees_with_bisection() {
        let f = ValueTransform::new(1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let y: f64 = rng.random_range(-20.0..20.0);
            let (mut lo, mut hi) = (-1e4, 1e4);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f.forward(mid) < y {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert!((f.inverse(y) - 0.5 * (lo + hi)).abs() < 1e-9);
        }
    }

    fn on_policy_two_step() -> (TabularMdp<f64>, TrajectorySegment<f64>) {
        // States 0 -> 1 -> 2 (absorbing), reward 1 on each transient step.
        let p = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let r = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let mdp = TabularMdp::new(3, 1, p, r, 0.5, 1.0, DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        let seg = TrajectorySegment {
            steps: vec![
                Transition { state: 0, action: 0, reward: 1.0, next_state: 1, behavior_prob: 1.0 },
                Transition { state: 1, action: 0, reward: 1.0, next_state: 2, behavior_prob: 1.0 },
            ],
            terminal: true,
        };
        (mdp, seg)
    }

    #[test]
    fn retrace_two_step_hand_value() {
        let (mdp, seg) = on_policy_two_step();
        let pi = PolicyTable::uniform(3, 1);
        let q = QTable::zeros(3, 1);
        let model = retrace_target(&mdp, &seg, &q, &pi, 1.0, None).unwrap();
        assert!((model[0] - 1.5).abs() < 1e-15);
        assert!((model[1] - 1.0).abs() < 1e-15);
        let sampled = retrace_target_sampled(&seg, &q, &pi, 1.0, 0.5, None).unwrap();
        assert_eq!(model, sampled);
    }

    #[test]
    fn retrace_beta_zero_is_one_step() {
        let mdp = make_chain::<f64>(3, 0.3, 1.0, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_q(4, 2, 1.0, &mut rng);
        let pi = q.epsilon_greedy_policy(0.1);
        let seg = TrajectorySegment {
            steps: vec![
                Transition { state: 0, action: 0, reward: 0.0, next_state: 1, behavior_prob: 0.5 },
                Transition { state: 1, action: 1, reward: 0.0, next_state: 0, behavior_prob: 0.5 },
            ],
            terminal: false,
        };
        let out = retrace_target(&mdp, &seg, &q, &pi, 0.0, None).unwrap();
        let tq = apply_policy(&mdp, &q, &pi).unwrap();
        assert!((out[0] - tq.get(0, 0)).abs() < 1e-15);
        assert!((out[1] - tq.get(1, 1)).abs() < 1e-15);
    }

    #[test]
    fn retrace_rejects_bad_segments() {
        let (mdp, mut seg) = on_policy_two_step();
        let pi = PolicyTable::uniform(3, 1);
        let q = QTable::zeros(3, 1);
        assert!(retrace_target(&mdp, &seg, &q, &pi, 1.5, None).is_err());
        seg.steps[0].behavior_prob = 0.0;
        assert!(retrace_target(&mdp, &seg, &q, &pi, 1.0, None).is_err());
        seg.steps.clear();
        assert!(retrace_target(&mdp, &seg, &q, &pi, 1.0, None).is_err());
    }

    #[test]
    fn retrace_transform_fixed_point() {
        let lin = make_linear_mdp::<f64>(5, 2, 3, 0.8, 3).unwrap();
        let pi = PolicyTable::uniform(5, 2);
        let q_pi = evaluate_policy(&lin.mdp, &pi).unwrap();
        let f = ValueTransform::default();
        let q_f = q_pi.map(|x| f.forward(x));
        let seg = TrajectorySegment {
            steps: vec![
                Transition { state: 0, action: 1, reward: 0.0, next_state: 2, behavior_prob: 0.3 },
                Transition { state: 2, action: 0, reward: 0.0, next_state: 4, behavior_prob: 0.9 },
                Transition { state: 4, action: 1, reward: 0.0, next_state: 1, behavior_prob: 0.5 },
            ],
            terminal: false,
        };
        let out = retrace_target(&lin.mdp, &seg, &q_f, &pi, 0.95, Some(&f)).unwrap();
        for (t, step) in seg.steps.iter().enumerate() {
            assert!((out[t] - q_f.get(step.state, step.action)).abs() < 1e-8);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let mdp = make_chain::<f32>(3, 0.0, 1.0, 0.5).unwrap();
        let (q, _) = solve_optimal(&mdp, 1e-5f32).unwrap();
        assert!((q.get(0, 0) - 0.25).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn transform_is_monotone(x in -1e3f64..1e3, dx in 1e-6f64..10.0) {
            let f = ValueTransform::<f64>::default();
            prop_assert!(f.forward(x) < f.forward(x + dx));
        }

        #[test]
        fn transform_roundtrips(x in -100.0f64..100.0) {
            let f = ValueTransform::<f64>::default();
            prop_assert!((transform_roundtrip(&f, x) - x).abs() <= 1e-10);
        }

        #[test]
        fn h_step_contracts(seed in 0u64..1000, h in prop::sample::select(vec![1usize, 2, 4])) {
            let lin = make_linear_mdp::<f64>(6, 3, 3, 0.9, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q1 = random_q(6, 3, 10.0, &mut rng);
            let q2 = random_q(6, 3, 10.0, &mut rng);
            let gap = (apply_h_step(&lin.mdp, &q1, h).unwrap().values()
                - apply_h_step(&lin.mdp, &q2, h).unwrap().values()).amax();
            let base = (q1.values() - q2.values()).amax();
            prop_assert!(gap <= 0.9f64.powi(h as i32) * base + 1e-12);
        }

        #[test]
        fn greedy_policy_matches_optimal_operator(seed in 0u64..1000) {
            let lin = make_linear_mdp::<f64>(5, 3, 2, 0.9, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let q = random_q(5, 3, 5.0, &mut rng);
            let a = apply_optimal(&lin.mdp, &q).unwrap();
            let b = apply_policy(&lin.mdp, &q, &q.greedy_policy()).unwrap();
            prop_assert!((a.values() - b.values()).amax() <= 1e-12);
        }

        #[test]
        fn retrace_fixed_point_on_random_segments(seed in 0u64..500, beta in 0.0f64..=1.0) {
            let lin = make_linear_mdp::<f64>(6, 2, 3, 0.9, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut probs = DMatrix::from_fn(6, 2, |_, _| rng.random_range(0.05..1.0));
            for mut row in probs.row_iter_mut() {
                let s = row.sum();
                row /= s;
            }
            let pi = PolicyTable::new(probs).unwrap();
            let q = evaluate_policy(&lin.mdp, &pi).unwrap();
            let len = rng.random_range(1..8);
            let mut state = rng.random_range(0..6);
            let mut steps = Vec::new();
            for _ in 0..len {
                let action = rng.random_range(0..2);
                let next_state = lin.mdp.sample_next(state, action, &mut rng);
                steps.push(Transition { state, action, reward: lin.mdp.reward(state, action), next_state, behavior_prob: 0.5 });
                state = next_state;
            }
            let seg = TrajectorySegment { steps, terminal: false };
            let out = retrace_target(&lin.mdp, &seg, &q, &pi, beta, None).unwrap();
            for (t, step) in seg.steps.iter().enumerate() {
                prop_assert!((out[t] - q.get(step.state, step.action)).abs() <= 1e-8);
            }
        }
    }
}
