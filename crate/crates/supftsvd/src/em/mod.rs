//! Penalized EM estimation of the supervised functional tensor decomposition.
//!
//! The model for subject i at time t_ij is
//! `Y_ij^b = sum_k (x_i' beta_k + U_ik) xi_bk psi_k(t_ij) + eps`, with latent
//! loadings U_ik ~ N(0, sigma_k^2) and noise eps ~ N(0, sigma^2). The E-step
//! computes the Gaussian posterior of U_i per subject; the M-step updates
//! beta_k, xi_k (closed-form least squares), psi_k (a kernel-ridge solve via
//! the representer theorem) and the r + 1 variances, with xi_k and psi_k
//! renormalized to unit norm and the discarded scales folded back into the
//! loadings so fitted trajectories are unchanged.

mod cv;
mod fit;
mod init;
mod objective;
mod steps;

pub use cv::{cv_select_eta, CvDirection};
pub use fit::fit;
pub use init::{initialize, singular_value_scree};
pub use objective::{fit_objective, penalized_objective};
pub use steps::{
    build_h, e_step, rebalance_scales, residual_r, residual_rtilde, update_beta,
    update_psi, update_variances, update_xi,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::KernelFunction;

/// Smallest admissible variance; smaller estimates are floored and flagged.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// One rank-1 factor of the decomposition.
#[derive(Debug, Clone)]
pub struct Component {
    /// Covariate effect on the loading scale (length q, empty when unsupervised).
    pub beta: DVector<f64>,
    /// Feature loadings, unit Euclidean norm with the largest-|entry| positive.
    pub xi: DVector<f64>,
    /// Singular function, unit L2 norm.
    pub psi: KernelFunction,
    /// Loading residual variance sigma_k^2.
    pub sigma2_k: f64,
}

/// Posterior moments of the latent loadings, one entry per training subject.
#[derive(Debug, Clone)]
pub struct Posterior {
    /// E[U_i | y_i], length r each.
    pub u_tilde: Vec<DVector<f64>>,
    /// V[U_i | y_i], r x r each.
    pub gamma: Vec<DMatrix<f64>>,
}

/// Direction of the per-iteration objective trace and convergence flags.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// Penalized evidence lower bound after each iteration's M-step.
    pub objective_trace: Vec<f64>,
    /// Relative objective change per iteration (first entry vs the pre-M-step value).
    pub delta_trace: Vec<f64>,
    /// Smoothing parameters in effect at each iteration.
    pub eta_trace: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// True when any variance hit [`VARIANCE_FLOOR`] during fitting.
    pub variance_floored: bool,
}

/// A fitted rank-r model plus training posteriors and fit diagnostics.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub rank: usize,
    pub components: Vec<Component>,
    /// Measurement-noise variance sigma^2.
    pub sigma2: f64,
    pub posterior: Posterior,
    /// Training subject ids, aligned with `posterior`.
    pub subject_ids: Vec<String>,
    /// Selected smoothing parameter per component.
    pub eta: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub p: usize,
    pub q: usize,
    pub feature_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub time_origin: f64,
    pub time_scale: f64,
}

impl ModelFit {
    /// Fitted subject loadings zeta_ik = x_i' beta_k + U_ik as an n x r matrix,
    /// with covariates taken from `x_rows` (one row per training subject).
    pub fn fitted_loadings(&self, x_rows: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let n = self.posterior.u_tilde.len();
        if x_rows.len() != n {
            return Err(Error::Mismatch(format!(
                "model stores {n} training posteriors but {} covariate rows were supplied",
                x_rows.len()
            )));
        }
        let mut out = DMatrix::zeros(n, self.rank);
        for i in 0..n {
            if x_rows[i].len() != self.q {
                return Err(Error::Mismatch(format!(
                    "covariate row {i} has length {}, model has q = {}",
                    x_rows[i].len(),
                    self.q
                )));
            }
            for (k, comp) in self.components.iter().enumerate() {
                out[(i, k)] = comp.beta.dot(&x_rows[i]) + self.posterior.u_tilde[i][k];
            }
        }
        Ok(out)
    }
}

/// Fit-time configuration. Defaults follow the crate-wide conventions:
/// `delta_stop = 1e-6`, `max_iter = 200`, five CV folds, smoothing grid
/// 1e-4..1e2 (log-spaced), CV frozen after three iterations.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub rank: usize,
    pub eta_grid: Vec<f64>,
    pub cv_folds: usize,
    /// Number of leading iterations that re-run cross-validation (s0).
    pub cv_freeze_iter: usize,
    pub cv_direction: CvDirection,
    pub delta_stop: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            rank: 1,
            eta_grid: default_eta_grid(),
            cv_folds: 5,
            cv_freeze_iter: 3,
            cv_direction: CvDirection::MaximizeCorrelation,
            delta_stop: 1e-6,
            max_iter: 200,
            seed: 0,
        }
    }
}

/// Log-spaced candidates 1e-4, 1e-3, ..., 1e2.
pub fn default_eta_grid() -> Vec<f64> {
    (-4..=2).map(|e| 10f64.powi(e)).collect()
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.eta_grid.is_empty() {
            return Err(Error::Config("eta grid must be non-empty".into()));
        }
        if self.eta_grid.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Config("eta values must be positive".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cross-validation needs at least 2 folds".into()));
        }
        if !(self.delta_stop > 0.0) {
            return Err(Error::Config("delta_stop must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Default smoothing value: the median of the (sorted) grid.
    pub fn default_eta(&self) -> f64 {
        let mut grid = self.eta_grid.clone();
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid[(grid.len() - 1) / 2]
    }
}
