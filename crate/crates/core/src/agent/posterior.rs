use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::scalar::{from_usize, lit, Real};

/// How `σ_exp` is chosen before each rollout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// `λ_min(Σ) / (d (1 − γ))`.
    MinEigen,
    Fixed(f64),
}

/// Gaussian posterior `N(θ̂, σ_exp Σ⁻¹)` over Q-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TsPosterior<T: Real> {
    pub mean: DVector<T>,
    /// `Σ = λI + Σ_D φφᵀ`.
    pub precision: DMatrix<T>,
    pub ridge: T,
    pub sigma_exp: T,
}

impl<T: Real> TsPosterior<T> {
    pub fn new(d: usize, ridge: T) -> Result<Self> {
        if !(ridge > T::zero()) {
            return Err(Error::InvalidArgument(format!("ridge must be positive, got {ridge}")));
        }
        Ok(Self {
            mean: DVector::zeros(d),
            precision: DMatrix::identity(d, d) * ridge,
            ridge,
            sigma_exp: T::zero(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn add(&mut self, phi: &DVector<T>) {
        self.precision += phi * phi.transpose();
    }

    pub fn remove(&mut self, phi: &DVector<T>) {
        self.precision -= phi * phi.transpose();
    }

    /// `λI + Σ_D φφᵀ` from scratch.
    pub fn precision_from_buffer(buffer: &ReplayBuffer<T>, features: &FeatureMap<T>, ridge: T) -> DMatrix<T> {
        let d = features.dim();
        let mut out = DMatrix::identity(d, d) * ridge;
        for (flat, &count) in buffer.counts().iter().enumerate() {
            if count > 0 {
                let phi = features.row(flat);
                out += &phi * phi.transpose() * from_usize::<T>(count);
            }
        }
        out
    }

    pub fn recompute(&mut self, buffer: &ReplayBuffer<T>, features: &FeatureMap<T>) {
        self.precision = Self::precision_from_buffer(buffer, features, self.ridge);
    }

    /// Extreme eigenvalues `(λ_min, λ_max)` of `Σ`.
    pub fn eigen_range(&self) -> (T, T) {
        let eig = self.precision.clone().symmetric_eigen().eigenvalues;
        let lo = eig.iter().copied().fold(eig[0], |a, b| if b < a { b } else { a });
        let hi = eig.iter().copied().fold(eig[0], |a, b| if b > a { b } else { a });
        (lo, hi)
    }

    pub fn sigma_from_rule(&self, rule: SigmaRule, gamma: T) -> T {
        match rule {
            SigmaRule::MinEigen => self.eigen_range().0 / (from_usize::<T>(self.dim()) * (T::one() - gamma)),
            SigmaRule::Fixed(v) => lit(v),
        }
    }

    pub fn update_sigma(&mut self, rule: SigmaRule, gamma: T) {
        self.sigma_exp = self.sigma_from_rule(rule, gamma);
    }

    /// `θ_TS = θ̂ + √σ_exp L⁻ᵀ z` with `Σ = LLᵀ`, so `Cov θ_TS = σ_exp Σ⁻¹`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<T>> {
        let chol = self
            .precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
        let z = DVector::from_fn(self.dim(), |_, _| lit::<T>(rng.sample::<f64, _>(StandardNormal)));
        if self.sigma_exp == T::zero() {
            return Ok(self.mean.clone());
        }
        let lt = chol.l().transpose();
        let noise = lt
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
        Ok(&self.mean + noise * self.sigma_exp.sqrt())
    }
}

/// One posterior draw from a seeded stream.
pub fn ts_sample<T: Real>(posterior: &TsPosterior<T>, seed: u64) -> Result<DVector<T>> {
    posterior.sample(&mut ChaCha20Rng::seed_from_u64(seed))
}
