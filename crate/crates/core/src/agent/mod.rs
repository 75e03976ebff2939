//! Q-learning with spectral representation learning: Thompson-sampling data
//! collection, least-squares or minibatch policy optimization, and periodic
//! representation phases, plus an ε-greedy baseline.

mod buffer;
mod learner;
mod posterior;
mod representation;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{ReplayBuffer, StoredTransition, TransitionGroup};
pub use learner::{
    least_squares, least_squares_on_targets, policy_optimization, q_learning_targets, retrace_targets,
    OptimizationSettings, Optimizer, RetraceSettings,
};
pub use posterior::{ts_sample, SigmaRule, TsPosterior};
pub use representation::{
    empirical_targets, representation_phase, ParamInit, ParamMapKind, RepresentationMethod, RepresentationOutcome,
    RepresentationSettings,
};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, ParamBall};
use crate::ibe::{compute_ibe, InnerMethod};
use crate::io::{vector_to_vec, MatrixData};
use crate::mdp::TabularMdp;
use crate::scalar::{lit, to_f64, Real};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exploration {
    /// One posterior draw per episode, greedy rollout.
    Ts,
    /// ε-greedy on the least-squares parameters.
    EpsilonGreedy,
}

/// `ε_t = max(floor, initial / (1 + decay·t))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            decay: 0.0,
            floor: 0.0,
        }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, round: usize) -> f64 {
        (self.initial / (1.0 + self.decay * round as f64)).max(self.floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureInit {
    OneHot,
    /// Rows drawn uniformly from the unit sphere scaled by a uniform radius.
    Random { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Discount used for learning; the MDP's own when absent.
    pub discount: Option<f64>,
    pub features: FeatureInit,
    pub rounds: usize,
    pub episodes_per_round: usize,
    pub max_episode_len: usize,
    pub buffer_capacity: usize,
    pub exploration: Exploration,
    pub epsilon: EpsilonSchedule,
    pub sigma_rule: SigmaRule,
    /// `λ` of the posterior precision `λI + Σφφᵀ`.
    pub ridge: f64,
    /// Ridge of the least-squares policy evaluation.
    pub ls_ridge: f64,
    pub optimizer: Optimizer,
    pub opt_steps: usize,
    pub target_period: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub retrace: bool,
    pub retrace_beta: f64,
    pub retrace_len: usize,
    /// `ε₀` of the Retrace target policy, `ε_t = ε₀ / (1 + t)`.
    pub retrace_epsilon: f64,
    /// Representation phase every this many rounds; 0 disables learning.
    pub rep_every: usize,
    pub rep_method: RepresentationMethod,
    pub rep_steps: usize,
    pub rep_step_size: f64,
    pub sigma_rep: f64,
    pub grid_size: usize,
    pub lambda_orth: f64,
    pub ema_alpha: f64,
    pub param_init: ParamInit,
    pub param_map: ParamMapKind,
    /// Keep `Σ` built from the previous features after a representation phase.
    pub keep_stale_precision: bool,
    /// Seed the buffer with one model sample per `(s,a)` before round 0.
    pub coverage_warmup: bool,
    pub reward_clip: Option<f64>,
    pub eval_episodes: usize,
    /// Stop once the greedy evaluation return reaches this value.
    pub stop_return: Option<f64>,
    /// Outer-grid size of a per-round IBE spot check.
    pub ibe_grid: Option<usize>,
    pub record_actions: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            discount: None,
            features: FeatureInit::OneHot,
            rounds: 100,
            episodes_per_round: 8,
            max_episode_len: 1000,
            buffer_capacity: 100_000,
            exploration: Exploration::Ts,
            epsilon: EpsilonSchedule::default(),
            sigma_rule: SigmaRule::MinEigen,
            ridge: 0.1,
            ls_ridge: 1e-6,
            optimizer: Optimizer::LeastSquares,
            opt_steps: 64,
            target_period: 1,
            batch_size: 256,
            learning_rate: 3e-4,
            retrace: false,
            retrace_beta: 0.95,
            retrace_len: 8,
            retrace_epsilon: 0.1,
            rep_every: 1,
            rep_method: RepresentationMethod::Sbm,
            rep_steps: 512,
            rep_step_size: 0.5,
            sigma_rep: 1e-2,
            grid_size: 64,
            lambda_orth: 1.0,
            ema_alpha: 0.1,
            param_init: ParamInit::LeastSquares,
            param_map: ParamMapKind::Tabular,
            keep_stale_precision: false,
            coverage_warmup: false,
            reward_clip: None,
            eval_episodes: 1,
            stop_return: None,
            ibe_grid: None,
            record_actions: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("agent config: {what}")));
        if let Some(g) = self.discount {
            if !(0.0..1.0).contains(&g) {
                return bad("discount must lie in [0, 1)");
            }
        }
        if self.episodes_per_round == 0 || self.max_episode_len == 0 || self.buffer_capacity == 0 {
            return bad("episodes_per_round, max_episode_len and buffer_capacity must be positive");
        }
        if !(self.ridge > 0.0) || !(self.ls_ridge >= 0.0) {
            return bad("ridge must be positive and ls_ridge non-negative");
        }
        if self.target_period == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("target_period, batch_size and learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.retrace_beta) || self.retrace_len == 0 || !(0.0..=1.0).contains(&self.retrace_epsilon) {
            return bad("retrace_beta and retrace_epsilon must lie in [0, 1], retrace_len positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon.initial) || !(0.0..=1.0).contains(&self.epsilon.floor) || self.epsilon.decay < 0.0 {
            return bad("epsilon schedule out of range");
        }
        if let SigmaRule::Fixed(v) = self.sigma_rule {
            if !(v >= 0.0) {
                return bad("fixed sigma_exp must be non-negative");
            }
        }
        if self.rep_every > 0
            && (self.grid_size == 0 || !(self.sigma_rep >= 0.0) || !(self.rep_step_size > 0.0) || !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) || !(self.lambda_orth >= 0.0))
        {
            return bad("representation settings out of range");
        }
        if let FeatureInit::Random { dim: 0 } = self.features {
            return bad("feature dimension must be positive");
        }
        Ok(())
    }
}

/// Per-round diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub env_steps: usize,
    /// Mean undiscounted return of the round's behavior episodes.
    pub mean_return: f64,
    pub max_return: f64,
    /// Mean undiscounted return of greedy rollouts on `θ̂`.
    pub eval_return: f64,
    pub sigma_exp: f64,
    pub precision_min_eig: f64,
    pub precision_max_eig: f64,
    pub theta_norm: f64,
    pub buffer_len: usize,
    /// `‖Σ − Σ_scratch‖_∞` between the maintained precision and one rebuilt
    /// from the buffer.
    pub precision_drift: f64,
    pub pm_residual: Option<f64>,
    pub sbm_loss: Option<f64>,
    pub ibe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub theta: Vec<f64>,
    pub features: MatrixData,
    pub precision: MatrixData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub rounds: Vec<RoundLog>,
    pub final_state: AgentSnapshot,
    /// Action sequences of every behavior episode, when recorded.
    pub actions: Option<Vec<Vec<usize>>>,
    /// Set when a phase failed; the log holds the rounds before it.
    pub error: Option<String>,
}

impl RunLog {
    /// First round in which some behavior episode reached `threshold`.
    pub fn first_round_reaching(&self, threshold: f64) -> Option<usize> {
        self.rounds.iter().find(|r| r.max_return >= threshold).map(|r| r.round)
    }

    /// First round whose greedy evaluation reached `threshold`.
    pub fn first_round_solved(&self, threshold: f64) -> Option<usize> {
        self.rounds.iter().find(|r| r.eval_return >= threshold).map(|r| r.round)
    }
}

fn initial_features<T: Real>(mdp: &TabularMdp<T>, init: FeatureInit, seed: u64) -> Result<FeatureMap<T>> {
    match init {
        FeatureInit::OneHot => Ok(FeatureMap::one_hot(mdp.n_states(), mdp.n_actions())),
        FeatureInit::Random { dim } => {
            let mut rng = seeds::stream(seed, seeds::INIT);
            let n = mdp.n_pairs();
            let mut m = DMatrix::<T>::zeros(n, dim);
            for i in 0..n {
                let v = DVector::<f64>::from_fn(dim, |_, _| rng.sample(rand_distr::StandardNormal));
                let radius: f64 = rng.random();
                let scale = radius / v.norm().max(1e-300);
                let v = v * scale;
                for k in 0..dim {
                    m[(i, k)] = lit(v[k]);
                }
            }
            FeatureMap::new(mdp.n_states(), mdp.n_actions(), m)
        }
    }
}

fn greedy<T: Real>(features: &FeatureMap<T>, theta: &DVector<T>, state: usize) -> usize {
    let n_actions = features.n_actions();
    let q = |a: usize| features.matrix().row(state * n_actions + a).transpose().dot(theta);
    let mut best = 0;
    let mut best_q = q(0);
    for a in 1..n_actions {
        let v = q(a);
        if v > best_q {
            best = a;
            best_q = v;
        }
    }
    best
}

/// Least-squares re-expression of `Φ_old θ` in the new features.
fn reproject<T: Real>(old: &FeatureMap<T>, new: &FeatureMap<T>, theta: &DVector<T>) -> Result<DVector<T>> {
    let q = old.matrix() * theta;
    let d = new.dim();
    let a = new.matrix().transpose() * new.matrix() + DMatrix::identity(d, d) * lit::<T>(1e-10);
    learner::solve_normal(a, new.matrix().transpose() * q)
}

struct Learner<T: Real> {
    features: FeatureMap<T>,
    theta: DVector<T>,
    target: DVector<T>,
    posterior: TsPosterior<T>,
    buffer: ReplayBuffer<T>,
}

impl<T: Real> Learner<T> {
    fn push(&mut self, item: StoredTransition<T>) -> Result<()> {
        self.posterior.add(&self.features.phi(item.state, item.action));
        if let Some(old) = self.buffer.push(item)? {
            self.posterior.remove(&self.features.phi(old.state, old.action));
        }
        Ok(())
    }

    fn snapshot(&self) -> AgentSnapshot {
        AgentSnapshot {
            theta: vector_to_vec(&self.theta),
            features: MatrixData::from_matrix(self.features.matrix()),
            precision: MatrixData::from_matrix(&self.posterior.precision),
        }
    }
}

/// Undiscounted return of one rollout; `choose` picks the action.
fn rollout<T: Real, R: Rng + ?Sized>(
    mdp: &TabularMdp<T>,
    max_len: usize,
    env: &mut R,
    mut choose: impl FnMut(usize) -> (usize, T),
    mut record: impl FnMut(usize, usize, T, usize, bool, T) -> Result<()>,
) -> Result<T> {
    let mut state = mdp.sample_initial(env);
    let mut total = T::zero();
    for _ in 0..max_len {
        if mdp.is_absorbing(state) {
            break;
        }
        let (action, prob) = choose(state);
        let reward = mdp.reward(state, action);
        let next = mdp.sample_next(state, action, env);
        let terminal = mdp.is_absorbing(next);
        record(state, action, reward, next, terminal, prob)?;
        total += reward;
        state = next;
        if terminal {
            break;
        }
    }
    Ok(total)
}

/// Runs the full loop with features from `config.features`.
pub fn run_agent<T: Real>(mdp: &TabularMdp<T>, config: &AgentConfig, seed: u64) -> Result<RunLog> {
    let features = initial_features(mdp, config.features, seed)?;
    run_agent_with_features(mdp, features, config, seed)
}

/// Runs the full loop from the given initial features.
pub fn run_agent_with_features<T: Real>(
    mdp: &TabularMdp<T>,
    features: FeatureMap<T>,
    config: &AgentConfig,
    seed: u64,
) -> Result<RunLog> {
    config.validate()?;
    if features.n_states() != mdp.n_states() || features.n_actions() != mdp.n_actions() {
        return Err(crate::error::shape_err(
            format!("features over {}x{}", mdp.n_states(), mdp.n_actions()),
            format!("{}x{}", features.n_states(), features.n_actions()),
        ));
    }
    let gamma: T = config.discount.map(lit).unwrap_or_else(|| mdp.discount());
    let d = features.dim();
    let mut learner = Learner {
        posterior: TsPosterior::new(d, lit(config.ridge))?,
        buffer: ReplayBuffer::new(config.buffer_capacity, mdp.n_states(), mdp.n_actions())?,
        theta: DVector::zeros(d),
        target: DVector::zeros(d),
        features,
    };
    let mut env = seeds::stream(seed, seeds::ENV);
    let mut explore = seeds::stream(seed, seeds::TS);
    let mut nu_rng = seeds::stream(seed, seeds::NU);
    let mut batch_rng = seeds::stream(seed, seeds::BATCH);
    let mut eval_rng = seeds::stream(seed, seeds::EVAL);
    let clip = config.reward_clip.map(lit::<T>);
    let clip_reward = |r: T| match clip {
        Some(c) => crate::scalar::max(-c, if r > c { c } else { r }),
        None => r,
    };

    let mut log = RunLog {
        seed,
        rounds: Vec::new(),
        final_state: learner.snapshot(),
        actions: config.record_actions.then(Vec::new),
        error: None,
    };
    let mut episode_id: u64 = 0;
    let mut env_steps = 0usize;

    if config.coverage_warmup {
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let next = mdp.sample_next(s, a, &mut env);
                learner.push(StoredTransition {
                    state: s,
                    action: a,
                    reward: clip_reward(mdp.reward(s, a)),
                    next_state: next,
                    terminal: mdp.is_absorbing(next),
                    behavior_prob: T::one(),
                    episode: episode_id,
                })?;
                episode_id += 1;
            }
        }
    }

    for round in 0..config.rounds {
        match run_round(
            mdp, config, gamma, round, &mut learner, &mut log, &mut episode_id, &mut env_steps,
            &mut env, &mut explore, &mut nu_rng, &mut batch_rng, &mut eval_rng, &clip_reward, seed,
        ) {
            Ok(stop) => {
                if stop {
                    break;
                }
            }
            Err(e) => {
                log.error = Some(e.to_string());
                break;
            }
        }
    }
    log.final_state = learner.snapshot();
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn run_round<T: Real>(
    mdp: &TabularMdp<T>,
    config: &AgentConfig,
    gamma: T,
    round: usize,
    learner: &mut Learner<T>,
    log: &mut RunLog,
    episode_id: &mut u64,
    env_steps: &mut usize,
    env: &mut ChaCha20Rng,
    explore: &mut ChaCha20Rng,
    nu_rng: &mut ChaCha20Rng,
    batch_rng: &mut ChaCha20Rng,
    eval_rng: &mut ChaCha20Rng,
    clip_reward: &dyn Fn(T) -> T,
    seed: u64,
) -> Result<bool> {
    let n_actions = mdp.n_actions();
    let mut returns = Vec::with_capacity(config.episodes_per_round);
    let mut sigma_used = T::zero();
    for _ in 0..config.episodes_per_round {
        let behavior = match config.exploration {
            Exploration::Ts => {
                learner.posterior.mean = learner.theta.clone();
                learner.posterior.update_sigma(config.sigma_rule, gamma);
                sigma_used = learner.posterior.sigma_exp;
                learner.posterior.sample(explore)?
            }
            Exploration::EpsilonGreedy => learner.theta.clone(),
        };
        let eps = config.epsilon.at(round);
        let mut actions = Vec::new();
        let features = learner.features.clone();
        let mut pending = Vec::new();
        let ret = rollout(
            mdp,
            config.max_episode_len,
            env,
            |s| {
                let g = greedy(&features, &behavior, s);
                match config.exploration {
                    Exploration::Ts => (g, T::one()),
                    Exploration::EpsilonGreedy => {
                        let a = if explore.random::<f64>() < eps { explore.random_range(0..n_actions) } else { g };
                        let p = eps / n_actions as f64 + if a == g { 1.0 - eps } else { 0.0 };
                        (a, lit(p))
                    }
                }
            },
            |s, a, r, next, terminal, prob| {
                pending.push(StoredTransition {
                    state: s,
                    action: a,
                    reward: clip_reward(r),
                    next_state: next,
                    terminal,
                    behavior_prob: prob,
                    episode: *episode_id,
                });
                actions.push(a);
                Ok(())
            },
        )?;
        for item in pending {
            learner.push(item)?;
        }
        *env_steps += actions.len();
        *episode_id += 1;
        returns.push(to_f64(ret));
        if let Some(all) = log.actions.as_mut() {
            all.push(actions);
        }
    }

    let retrace = config.retrace.then(|| RetraceSettings {
        beta: lit(config.retrace_beta),
        max_len: config.retrace_len,
        epsilon: lit(config.retrace_epsilon / (1.0 + round as f64)),
    });
    let settings = OptimizationSettings {
        optimizer: config.optimizer,
        gamma,
        ridge: lit(config.ls_ridge.max(f64::MIN_POSITIVE)),
        steps: config.opt_steps,
        target_period: config.target_period,
        batch_size: config.batch_size,
        learning_rate: lit(config.learning_rate),
        retrace,
    };
    if !learner.buffer.is_empty() {
        let (theta, target) =
            policy_optimization(&learner.buffer, &learner.features, &learner.theta, &learner.target, &settings, batch_rng)?;
        learner.theta = theta;
        learner.target = target;
    }

    let mut pm_residual = None;
    let mut sbm_loss = None;
    if config.rep_every > 0 && (round + 1).is_multiple_of(config.rep_every) && !learner.buffer.is_empty() {
        let rep = RepresentationSettings {
            method: config.rep_method,
            gamma,
            sigma_rep: lit(config.sigma_rep),
            grid_size: config.grid_size,
            steps: config.rep_steps,
            step_size: lit(config.rep_step_size),
            lambda_orth: lit(config.lambda_orth),
            ema_alpha: lit(config.ema_alpha),
            param_init: config.param_init,
            param_map: config.param_map,
        };
        let out = representation_phase(&learner.buffer, &learner.theta, &learner.features, &rep, nu_rng.random())?;
        learner.theta = reproject(&learner.features, &out.features, &learner.theta)?;
        learner.target = reproject(&learner.features, &out.features, &learner.target)?;
        learner.features = out.features;
        if !config.keep_stale_precision {
            learner.posterior.recompute(&learner.buffer, &learner.features);
        }
        pm_residual = Some(to_f64(out.pm_residual));
        sbm_loss = out.trace.last().map(|r| r.total);
    }
    learner.posterior.mean = learner.theta.clone();

    let mut eval_total = 0.0;
    for _ in 0..config.eval_episodes {
        let ret = rollout(
            mdp,
            config.max_episode_len,
            eval_rng,
            |s| (greedy(&learner.features, &learner.theta, s), T::one()),
            |_, _, _, _, _, _| Ok(()),
        )?;
        eval_total += to_f64(ret);
    }
    let eval_return = if config.eval_episodes > 0 { eval_total / config.eval_episodes as f64 } else { f64::NAN };

    let ibe = match config.ibe_grid {
        Some(size) => {
            let ball = ParamBall::new(mdp.default_param_bound(), learner.features.clone())?;
            Some(to_f64(compute_ibe(mdp, &ball, size, seeds::derive_seed(seed, "ibe"), 1, InnerMethod::LeastSquares)?.value))
        }
        None => None,
    };
    let (lo, hi) = learner.posterior.eigen_range();
    log.rounds.push(RoundLog {
        round,
        env_steps: *env_steps,
        mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
        max_return: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        eval_return,
        sigma_exp: to_f64(sigma_used),
        precision_min_eig: to_f64(lo),
        precision_max_eig: to_f64(hi),
        theta_norm: to_f64(learner.theta.norm()),
        buffer_len: learner.buffer.len(),
        precision_drift: to_f64(
            (&learner.posterior.precision
                - TsPosterior::precision_from_buffer(&learner.buffer, &learner.features, learner.posterior.ridge))
            .amax(),
        ),
        pm_residual,
        sbm_loss,
        ibe,
    });
    Ok(matches!(config.stop_return, Some(t) if eval_return >= t))
}
