//! Feature maps, sampling distributions over `(s,a)` and over parameters,
//! and the covariance matrices built from them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bellman::QTable;
use crate::error::{shape_err, Error, Result};
use crate::scalar::{abs, from_usize, lit, sup_norm, Real};

const NORM_SLACK: f64 = 1e-12;

/// `Φ` with one row `φ(s,a)ᵀ` per flat state-action index.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Real> {
    n_states: usize,
    n_actions: usize,
    matrix: DMatrix<T>,
}

impl<T: Real> FeatureMap<T> {
    /// Validates shape, finiteness and `‖φ(s,a)‖₂ ≤ 1`.
    pub fn new(n_states: usize, n_actions: usize, matrix: DMatrix<T>) -> Result<Self> {
        if matrix.nrows() != n_states * n_actions {
            return Err(shape_err(
                format!("{} feature rows", n_states * n_actions),
                format!("{}", matrix.nrows()),
            ));
        }
        if matrix.ncols() == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("features contain non-finite entries".into()));
        }
        let limit = T::one() + lit(NORM_SLACK);
        for (i, row) in matrix.row_iter().enumerate() {
            if row.norm() > limit {
                return Err(Error::InvalidArgument(format!(
                    "feature row {i} has norm {} > 1",
                    row.norm()
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            matrix,
        })
    }

    /// The complete one-hot basis, `Φ = I`.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let n = n_states * n_actions;
        Self {
            n_states,
            n_actions,
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.matrix
    }

    pub fn row(&self, index: usize) -> DVector<T> {
        self.matrix.row(index).transpose()
    }

    pub fn phi(&self, state: usize, action: usize) -> DVector<T> {
        self.row(state * self.n_actions + action)
    }

    /// `Q_θ = Φθ`.
    pub fn q_values(&self, theta: &DVector<T>) -> QTable<T> {
        QTable::from_vector(self.n_states, self.n_actions, &self.matrix * theta)
            .expect("feature product has the Q-table shape")
    }
}

/// Rescales rows with norm above one onto the unit sphere.
pub fn clip_feature_norms<T: Real>(matrix: &DMatrix<T>) -> DMatrix<T> {
    let mut out = matrix.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        if norm > T::one() {
            row /= norm;
        }
    }
    out
}

/// [`clip_feature_norms`] packaged as a validated [`FeatureMap`].
pub fn clip_to_feature_map<T: Real>(
    n_states: usize,
    n_actions: usize,
    matrix: &DMatrix<T>,
) -> Result<FeatureMap<T>> {
    FeatureMap::new(n_states, n_actions, clip_feature_norms(matrix))
}

/// `{θ : sup_{s,a} |φ(s,a)ᵀθ| ≤ D}`.
#[derive(Clone, Debug)]
pub struct ParamBall<T: Real> {
    pub bound: T,
    pub features: FeatureMap<T>,
}

impl<T: Real> ParamBall<T> {
    pub fn new(bound: T, features: FeatureMap<T>) -> Result<Self> {
        if !(bound > T::zero()) || !bound.is_finite() {
            return Err(Error::InvalidArgument(format!("ball bound must be positive, got {bound}")));
        }
        Ok(Self { bound, features })
    }

    /// `sup |Φθ|`.
    pub fn gauge(&self, theta: &DVector<T>) -> T {
        sup_norm((self.features.matrix() * theta).iter().copied())
    }

    pub fn contains(&self, theta: &DVector<T>) -> bool {
        self.gauge(theta) <= self.bound
    }

    /// Radial scaling onto the ball; points already inside are returned as is.
    pub fn project(&self, theta: &DVector<T>) -> DVector<T> {
        let g = self.gauge(theta);
        if g <= self.bound {
            return theta.clone();
        }
        let mut scaled = theta * (self.bound / g);
        let shrink = T::one() - lit::<T>(4.0) * T::default_epsilon();
        while !self.contains(&scaled) {
            scaled *= shrink;
        }
        scaled
    }
}

/// Isotropic Gaussian `N(θ̂, σ²I)` over parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDistribution<T: Real> {
    pub mean: DVector<T>,
    pub stddev: T,
}

impl<T: Real> ParamDistribution<T> {
    pub fn new(mean: DVector<T>, stddev: T) -> Result<Self> {
        if !(stddev >= T::zero()) || !stddev.is_finite() {
            return Err(Error::InvalidArgument(format!("stddev must be non-negative, got {stddev}")));
        }
        Ok(Self { mean, stddev })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `m` draws as the columns of a `d x m` matrix.
    pub fn sample<R: rand::Rng + ?Sized>(&self, m: usize, rng: &mut R) -> DMatrix<T> {
        let d = self.dim();
        let mut grid = DMatrix::zeros(d, m);
        for j in 0..m {
            for k in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                grid[(k, j)] = self.mean[k] + self.stddev * lit::<T>(z);
            }
        }
        grid
    }
}

/// Draws an `m`-point grid from `ν`, optionally projected into a ball.
pub fn sample_params<T: Real>(
    dist: &ParamDistribution<T>,
    m: usize,
    seed: u64,
    projection: Option<&ParamBall<T>>,
) -> Result<DMatrix<T>> {
    if m == 0 {
        return Err(Error::InvalidArgument("grid size must be at least 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut grid = dist.sample(m, &mut rng);
    if let Some(ball) = projection {
        if ball.features.dim() != dist.dim() {
            return Err(shape_err(format!("dimension {}", ball.features.dim()), format!("{}", dist.dim())));
        }
        for j in 0..m {
            let p = ball.project(&grid.column(j).into_owned());
            grid.set_column(j, &p);
        }
    }
    Ok(grid)
}

/// Probability vector `ρ` over flat `(s,a)` indices.
#[derive(Clone, Debug, PartialEq)]
pub struct StateActionDist<T: Real> {
    probs: DVector<T>,
}

impl<T: Real> StateActionDist<T> {
    pub fn new(probs: DVector<T>) -> Result<Self> {
        let sum = probs.sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p >= T::zero())) || abs(sum - T::one()) > lit(1e-12) {
            return Err(Error::InvalidArgument(format!(
                "state-action weights must be a probability vector (sum {sum})"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: DVector::from_element(n, T::one() / from_usize(n)),
        }
    }

    /// Normalized visit counts.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("no visits to normalize".into()));
        }
        let t = from_usize::<T>(total);
        Ok(Self {
            probs: DVector::from_iterator(counts.len(), counts.iter().map(|&c| from_usize::<T>(c) / t)),
        })
    }

    pub fn probs(&self) -> &DVector<T> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_weight<T: Real>(w: T) -> Result<()> {
    if !(w >= T::zero()) {
        return Err(Error::InvalidArgument(format!("weight must be non-negative, got {w}")));
    }
    Ok(())
}

/// `√ρ · φ`.
pub fn augment<T: Real>(phi_row: &DVector<T>, rho_weight: T) -> Result<DVector<T>> {
    check_weight(rho_weight)?;
    Ok(phi_row * rho_weight.sqrt())
}

/// `θ̃ · √ν`.
pub fn augment_param<T: Real>(theta_tilde: &DVector<T>, nu_weight: T) -> Result<DVector<T>> {
    check_weight(nu_weight)?;
    Ok(theta_tilde * nu_weight.sqrt())
}

fn symmetrize<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    (&m + m.transpose()) * lit::<T>(0.5)
}

/// Weighted Gram `Σ_i w_i x_i x_iᵀ` over the rows of `rows`.
pub fn weighted_row_gram<T: Real>(rows: &DMatrix<T>, weights: &DVector<T>) -> DMatrix<T> {
    let mut scaled = rows.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    symmetrize(rows.transpose() * scaled)
}

/// `Λ₁ = Σ_i ρ_i φ_i φ_iᵀ`.
pub fn covariance<T: Real>(phi: &DMatrix<T>, rho: &StateActionDist<T>) -> Result<DMatrix<T>> {
    if phi.nrows() != rho.len() {
        return Err(shape_err(format!("{} rows", rho.len()), format!("{}", phi.nrows())));
    }
    Ok(weighted_row_gram(phi, rho.probs()))
}

/// `Λ₂ = Σ_j ν_j θ̃_j θ̃_jᵀ` for grid outputs stored as columns.
pub fn param_covariance<T: Real>(outputs: &DMatrix<T>, nu: &DVector<T>) -> Result<DMatrix<T>> {
    if outputs.ncols() == 0 {
        return Err(Error::InvalidArgument("empty parameter grid".into()));
    }
    if outputs.ncols() != nu.len() {
        return Err(shape_err(format!("{} weights", outputs.ncols()), format!("{}", nu.len())));
    }
    Ok(weighted_row_gram(&outputs.transpose(), nu))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceSlot {
    /// `Λ₁`, the feature covariance.
    Feature,
    /// `Λ₂`, the post-Bellman parameter covariance.
    Param,
}

/// EMA-smoothed `Λ₁` and `Λ₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceTracker<T: Real> {
    pub lambda1: DMatrix<T>,
    pub lambda2: DMatrix<T>,
    pub alpha: T,
}

impl<T: Real> CovarianceTracker<T> {
    pub fn new(lambda1: DMatrix<T>, lambda2: DMatrix<T>, alpha: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha <= T::one()) {
            return Err(Error::InvalidArgument(format!("EMA rate must lie in (0, 1], got {alpha}")));
        }
        check_symmetric(&lambda1)?;
        check_symmetric(&lambda2)?;
        if lambda1.shape() != lambda2.shape() {
            return Err(shape_err(format!("{:?}", lambda1.shape()), format!("{:?}", lambda2.shape())));
        }
        Ok(Self {
            lambda1,
            lambda2,
            alpha,
        })
    }

    pub fn zeros(d: usize, alpha: T) -> Result<Self> {
        Self::new(DMatrix::zeros(d, d), DMatrix::zeros(d, d), alpha)
    }

    /// `Λ ← α·sample + (1−α)·Λ` on one slot.
    pub fn ema_update(&self, sample: &DMatrix<T>, which: CovarianceSlot) -> Result<Self> {
        check_symmetric(sample)?;
        let mut next = self.clone();
        let target = match which {
            CovarianceSlot::Feature => &mut next.lambda1,
            CovarianceSlot::Param => &mut next.lambda2,
        };
        if target.shape() != sample.shape() {
            return Err(shape_err(format!("{:?}", target.shape()), format!("{:?}", sample.shape())));
        }
        *target = if self.alpha == T::one() {
            sample.clone()
        } else {
            sample * self.alpha + &*target * (T::one() - self.alpha)
        };
        Ok(next)
    }
}

fn check_symmetric<T: Real>(m: &DMatrix<T>) -> Result<()> {
    if !m.is_square() {
        return Err(shape_err("square matrix", format!("{:?}", m.shape())));
    }
    let scale = T::one() + sup_norm(m.iter().copied());
    let gap = sup_norm((m - m.transpose()).iter().copied());
    if gap > lit::<T>(1e-12) * scale {
        return Err(Error::InvalidArgument(format!("matrix is not symmetric (gap {gap})")));
    }
    Ok(())
}

/// `θ ↦ θ̃(θ)`.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamMap<T: Real> {
    /// Free outputs, one column per grid point.
    Tabular { outputs: DMatrix<T> },
    /// `θ̃(θ) = θ + Aθ + b`.
    Affine { a: DMatrix<T>, b: DVector<T> },
}

impl<T: Real> ParamMap<T> {
    pub fn dim(&self) -> usize {
        match self {
            ParamMap::Tabular { outputs } => outputs.nrows(),
            ParamMap::Affine { b, .. } => b.len(),
        }
    }

    /// The identity residual map, `A = 0`, `b = 0`.
    pub fn identity_affine(d: usize) -> Self {
        ParamMap::Affine {
            a: DMatrix::zeros(d, d),
            b: DVector::zeros(d),
        }
    }

    /// `Θ̃`, the outputs on a `d x m` grid.
    pub fn outputs(&self, grid: &DMatrix<T>) -> Result<DMatrix<T>> {
        match self {
            ParamMap::Tabular { outputs } => {
                if outputs.shape() != grid.shape() {
                    return Err(shape_err(format!("{:?}", outputs.shape()), format!("{:?}", grid.shape())));
                }
                Ok(outputs.clone())
            }
            ParamMap::Affine { a, b } => {
                if grid.nrows() != b.len() {
                    return Err(shape_err(format!("{} rows", b.len()), format!("{}", grid.nrows())));
                }
                let mut out = grid + a * grid;
                for mut col in out.column_iter_mut() {
                    col += b;
                }
                Ok(out)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ParamMap::Tabular { outputs } => outputs.iter().all(|v| v.is_finite()),
            ParamMap::Affine { a, b } => a.iter().chain(b.iter()).all(|v| v.is_finite()),
        }
    }
}
