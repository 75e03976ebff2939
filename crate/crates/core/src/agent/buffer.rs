use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bellman::{TrajectorySegment, Transition};
use crate::error::{Error, Result};
use crate::features::StateActionDist;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StoredTransition<T: Real> {
    pub state: usize,
    pub action: usize,
    pub reward: T,
    pub next_state: usize,
    /// `next_state` ends the episode; targets do not bootstrap past it.
    pub terminal: bool,
    pub behavior_prob: T,
    pub episode: u64,
}

impl<T: Real> StoredTransition<T> {
    pub fn transition(&self) -> Transition<T> {
        Transition {
            state: self.state,
            action: self.action,
            reward: self.reward,
            next_state: self.next_state,
            behavior_prob: self.behavior_prob,
        }
    }
}

/// Transitions sharing `(s, a, s', terminal)`, aggregated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionGroup<T: Real> {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub terminal: bool,
    pub count: usize,
    pub reward_sum: T,
}

type GroupKey = (usize, usize, usize, bool);

/// Bounded FIFO replay buffer with running visit counts and grouped sums.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T: Real> {
    capacity: usize,
    n_actions: usize,
    items: VecDeque<StoredTransition<T>>,
    counts: Vec<usize>,
    groups: BTreeMap<GroupKey, (usize, T)>,
}

impl<T: Real> ReplayBuffer<T> {
    pub fn new(capacity: usize, n_states: usize, n_actions: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            n_actions,
            items: VecDeque::new(),
            counts: vec![0; n_states * n_actions],
            groups: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&StoredTransition<T>> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredTransition<T>> {
        self.items.iter()
    }

    /// Appends a transition; returns the evicted one when full.
    pub fn push(&mut self, item: StoredTransition<T>) -> Result<Option<StoredTransition<T>>> {
        let flat = item.state * self.n_actions + item.action;
        if flat >= self.counts.len() || item.action >= self.n_actions || item.next_state * self.n_actions >= self.counts.len() {
            return Err(Error::InvalidArgument("transition indexes outside the MDP".into()));
        }
        let evicted = if self.items.len() == self.capacity {
            let old = self.items.pop_front().expect("full buffer is non-empty");
            self.counts[old.state * self.n_actions + old.action] -= 1;
            let key = (old.state, old.action, old.next_state, old.terminal);
            let entry = self.groups.get_mut(&key).expect("stored transition has a group");
            entry.0 -= 1;
            entry.1 -= old.reward;
            if entry.0 == 0 {
                self.groups.remove(&key);
            }
            Some(old)
        } else {
            None
        };
        self.counts[flat] += 1;
        let entry = self
            .groups
            .entry((item.state, item.action, item.next_state, item.terminal))
            .or_insert((0, T::zero()));
        entry.0 += 1;
        entry.1 += item.reward;
        self.items.push_back(item);
        Ok(evicted)
    }

    /// Visits per flat `(s,a)` index.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `ρ_t`: the empirical `(s,a)` distribution of the stored transitions.
    pub fn empirical_dist(&self) -> Result<StateActionDist<T>> {
        StateActionDist::from_counts(&self.counts)
    }

    /// Grouped transitions in a fixed (sorted) order.
    pub fn groups(&self) -> impl Iterator<Item = TransitionGroup<T>> + '_ {
        self.groups.iter().map(|(&(state, action, next_state, terminal), &(count, reward_sum))| TransitionGroup {
            state,
            action,
            next_state,
            terminal,
            count,
            reward_sum,
        })
    }

    /// Uniform draws with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..batch).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    /// The segment starting at `start`, continuing within the same episode
    /// for at most `max_len` steps.
    pub fn segment(&self, start: usize, max_len: usize) -> Option<TrajectorySegment<T>> {
        let first = self.items.get(start)?;
        let mut steps = vec![first.transition()];
        let mut terminal = first.terminal;
        let mut i = start + 1;
        while !terminal && steps.len() < max_len {
            match self.items.get(i) {
                Some(next) if next.episode == first.episode && next.state == steps.last().unwrap().next_state => {
                    steps.push(next.transition());
                    terminal = next.terminal;
                    i += 1;
                }
                _ => break,
            }
        }
        Some(TrajectorySegment { steps, terminal })
    }
}
