use serde::{Deserialize, Serialize};

/// Every pass/fail threshold used by the verification suites.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// LS-projection residual and IBE on Linear MDPs.
    pub zero_ibe: f64,
    /// Singular values, tail, factors and covariance gap of the SVD check.
    pub svd: f64,
    /// Identities between covariances, features and parameter outputs.
    pub identities: f64,
    /// SBM gradient ∞-norm at a power-method fixed point.
    pub fixed_point_gradient: f64,
    /// Fixed-point residual at a converged SBM minimizer.
    pub sbm_fixed_point: f64,
    /// Closed-form comparison on the scalar instance.
    pub scalar_closed_form: f64,
    /// Slack of the h-step IBE bound.
    pub h_step_slack: f64,
    pub contraction: f64,
    pub retrace_fixed_point: f64,
    pub transform_roundtrip: f64,
    /// Relative analytic/finite-difference gradient agreement.
    pub gradient_relative: f64,
    /// Fitted-Q iteration against value iteration.
    pub fitted_q: f64,
    /// Incremental against rebuilt posterior precision.
    pub precision_drift: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            zero_ibe: 1e-8,
            svd: 1e-8,
            identities: 1e-10,
            fixed_point_gradient: 1e-6,
            sbm_fixed_point: 1e-5,
            scalar_closed_form: 1e-6,
            h_step_slack: 1e-9,
            contraction: 1e-12,
            retrace_fixed_point: 1e-8,
            transform_roundtrip: 1e-10,
            gradient_relative: 1e-4,
            fitted_q: 1e-6,
            precision_drift: 1e-10,
        }
    }
}
