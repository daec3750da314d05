//! The outer EM loop: E-step, per-component beta/xi/psi updates with
//! renormalization, variance updates, smoothing-parameter cross-validation
//! while active, and the relative-change stopping rule.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{self, KernelFunction, QUAD_NODES};

use super::cv::cv_select_eta_core;
use super::objective::fit_objective_core;
use super::steps::{
    apply_gauge, e_step_all, posterior_weights, psi_solve_alpha, rtilde_all, sign_fix,
    update_beta_core, update_variances_core, update_xi_core, PsiTable,
};
use super::{Component, Diagnostics, FitConfig, ModelFit};

/// Per-fit precomputed quantities tied to the pooled observation times.
struct Workspace {
    pooled_times: Vec<f64>,
    /// Kernel Gram matrix over the pooled times (the psi knots).
    gram: DMatrix<f64>,
    /// Kernel values at the Simpson quadrature nodes times the knots,
    /// so L2 norms of expansions reduce to one matrix-vector product.
    quad: DMatrix<f64>,
    simpson_w: Vec<f64>,
}

impl Workspace {
    fn new(dataset: &Dataset) -> Self {
        let pooled_times: Vec<f64> = dataset
            .subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .collect();
        let gram = kernel::gram_unchecked(&pooled_times);
        let h = 1.0 / (QUAD_NODES - 1) as f64;
        let quad = DMatrix::from_fn(QUAD_NODES, pooled_times.len(), |u, l| {
            kernel::eval_unchecked(u as f64 * h, pooled_times[l])
        });
        let simpson_w = kernel::simpson_weights_01(QUAD_NODES);
        Workspace {
            pooled_times,
            gram,
            quad,
            simpson_w,
        }
    }

    /// L2-normalizes an expansion over the pooled knots; returns the function
    /// and its discarded raw norm.
    fn normalize(&self, alpha: DVector<f64>) -> Result<(KernelFunction, f64)> {
        let vals = &self.quad * &alpha;
        let mut sq = 0.0;
        for (v, w) in vals.iter().zip(&self.simpson_w) {
            sq += w * v * v;
        }
        let norm = sq.sqrt();
        if !(norm > 1e-12) {
            return Err(Error::DegenerateFunction(format!(
                "singular-function update has L2 norm {norm:.3e}, below 1e-12"
            )));
        }
        Ok((
            KernelFunction {
                knots: self.pooled_times.clone(),
                alpha: alpha.iter().copied().collect(),
                scale: 1.0 / norm,
            },
            norm,
        ))
    }

    fn rkhs_norms_sq(&self, components: &[Component]) -> Vec<f64> {
        components
            .iter()
            .map(|c| c.psi.rkhs_norm_sq_with(&self.gram))
            .collect()
    }
}

/// Mixes the base seed with the iteration and component indices so
/// cross-validation folds are redrawn deterministically each iteration.
fn fold_seed(base: u64, iteration: usize, k: usize) -> u64 {
    base ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((k as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Fits a rank-r model by penalized EM.
///
/// Each iteration runs the E-step over all subjects, then for k = 1..r
/// updates beta_k, xi_k and psi_k in sequence with the freshest values
/// (selecting eta_k by cross-validation while `iteration < cv_freeze_iter`),
/// renormalizes with the scales folded into the loadings, and closes with the
/// exact variance updates. The recorded objective is the penalized evidence
/// lower bound; iteration stops when its relative change drops below
/// `delta_stop`. Non-convergence is reported in the diagnostics, not an error.
pub fn fit(dataset: &Dataset, config: &FitConfig) -> Result<ModelFit> {
    config.validate()?;
    dataset.validate()?;
    if dataset.n() == 0 {
        return Err(Error::InsufficientData("dataset has no subjects".into()));
    }
    let r = config.rank;
    let ws = Workspace::new(dataset);
    let default_eta = config.default_eta();

    // The initializer's crude posterior (zero covariance) is superseded by
    // the first E-step below.
    let (mut components, _init_posterior, mut sigma2) =
        super::init::initialize(dataset, r, default_eta)?;
    let mut eta = vec![default_eta; r];
    let mut psi_table = PsiTable::for_dataset(dataset, &components);
    let mut diagnostics = Diagnostics::default();
    let mut variance_floored = false;
    let mut prev_objective: Option<f64> = None;

    for iteration in 0..config.max_iter {
        let tag = |e: Error| e.at_iteration(iteration);

        let mut posterior = e_step_all(dataset, &components, &psi_table, sigma2).map_err(tag)?;
        let rkhs_sq = ws.rkhs_norms_sq(&components);
        let pre_objective =
            fit_objective_core(dataset, &components, &psi_table, &posterior, sigma2, &eta, &rkhs_sq)
                .map_err(tag)?;

        for k in 0..r {
            let beta_new =
                update_beta_core(dataset, &components, &psi_table, &posterior, k).map_err(tag)?;
            let weights = posterior_weights(dataset, &posterior, &beta_new, k);
            let mut rtilde = rtilde_all(dataset, &components, &psi_table, &posterior, k, &beta_new)
                .map_err(tag)?;
            let (mut xi_new, xi_norm) =
                update_xi_core(dataset, &psi_table, k, &rtilde, &weights).map_err(tag)?;
            let sign = sign_fix(&mut xi_new);

            // Commit beta and the unit xi, folding the discarded xi scale
            // (and sign) into the loadings before anything consumes the new
            // xi: the psi solve must see weights and scaled residuals in the
            // same gauge. Under the loading rescale by c the scaled residual
            // transports as R~ -> sign(c) R~ and the weight as w -> |c| w.
            components[k].beta = beta_new;
            components[k].xi = xi_new;
            apply_gauge(&mut components[k], &mut posterior, k, sign * xi_norm);
            let weights: Vec<f64> = weights.iter().map(|w| w * xi_norm).collect();
            if sign < 0.0 {
                for m in &mut rtilde {
                    m.neg_mut();
                }
            }

            if iteration < config.cv_freeze_iter && config.eta_grid.len() > 1 {
                eta[k] = cv_select_eta_core(
                    dataset,
                    &ws.gram,
                    &rtilde,
                    &zeta_values(dataset, &posterior, &components[k].beta, k),
                    &weights,
                    &components[k].xi,
                    &config.eta_grid,
                    config.cv_folds,
                    fold_seed(config.seed, iteration, k),
                    config.cv_direction,
                )
                .map_err(tag)?;
            }

            let alpha =
                psi_solve_alpha(dataset, &ws.gram, &rtilde, &weights, &components[k].xi, eta[k])
                    .map_err(tag)?;

            // Accept the proposal only when it does not decrease the recorded
            // objective. The ridge solve optimizes the raw expansion; after
            // L2 normalization the discarded scale returns to the loadings
            // and the stored function carries a larger smoothness penalty, so
            // near a stationary point the net change can be negative, which
            // would otherwise leave the iteration drifting instead of
            // converging. Everything except the penalty is gauge-invariant,
            // so comparing the raw proposal against the stored function on
            // the psi_k coordinate of the objective is exact.
            let raw_vals = &ws.gram * &alpha;
            let h_raw = alpha.dot(&raw_vals);
            let h_old = components[k].psi.rkhs_norm_sq_with(&ws.gram);
            let mut contracts = Vec::with_capacity(weights.len());
            let mut wobs = Vec::with_capacity(weights.len());
            for (i, s) in dataset.subjects.iter().enumerate() {
                for j in 0..s.n_obs() {
                    contracts.push(components[k].xi.dot(&rtilde[i].column(j)));
                    wobs.push(weights[i]);
                }
            }
            let score = |vals: &[f64], h: f64| -> f64 {
                let mut acc = 0.0;
                for ((&c, &w), &v) in contracts.iter().zip(&wobs).zip(vals) {
                    let wv = w * v;
                    acc += wv * wv - 2.0 * wv * c;
                }
                -acc / (2.0 * sigma2) - eta[k] * h
            };
            let accept = score(raw_vals.as_slice(), h_raw) >= score(&psi_table.vals[k], h_old);
            if accept {
                let (psi_new, psi_norm) = ws.normalize(alpha).map_err(tag)?;
                components[k].psi = psi_new;
                apply_gauge(&mut components[k], &mut posterior, k, psi_norm);
                psi_table.refresh_from_gram(k, &components[k].psi, &ws.gram);
            }
        }

        let (sigma2_ks, sigma2_new, floored) =
            update_variances_core(dataset, &components, &psi_table, &posterior);
        for (comp, s2k) in components.iter_mut().zip(&sigma2_ks) {
            comp.sigma2_k = *s2k;
        }
        sigma2 = sigma2_new;
        variance_floored |= floored;

        let rkhs_sq = ws.rkhs_norms_sq(&components);
        let objective =
            fit_objective_core(dataset, &components, &psi_table, &posterior, sigma2, &eta, &rkhs_sq)
                .map_err(tag)?;
        let reference = prev_objective.unwrap_or(pre_objective);
        let delta = (objective - reference) / reference.abs().max(f64::MIN_POSITIVE);
        diagnostics.objective_trace.push(objective);
        diagnostics.delta_trace.push(delta);
        diagnostics.eta_trace.push(eta.clone());
        diagnostics.iterations = iteration + 1;
        prev_objective = Some(objective);

        if delta.abs() < config.delta_stop {
            diagnostics.converged = true;
            break;
        }
    }
    diagnostics.variance_floored = variance_floored;

    // Refresh the posterior at the final parameters so stored moments match
    // what projecting a training subject through the fitted model yields.
    let posterior = e_step_all(dataset, &components, &psi_table, sigma2)
        .map_err(|e| e.at_iteration(diagnostics.iterations))?;

    Ok(ModelFit {
        rank: r,
        components,
        sigma2,
        posterior,
        subject_ids: dataset.subjects.iter().map(|s| s.id.clone()).collect(),
        eta,
        diagnostics,
        p: dataset.p,
        q: dataset.q,
        feature_names: dataset.feature_names.clone(),
        covariate_names: dataset.covariate_names.clone(),
        time_origin: dataset.time_origin,
        time_scale: dataset.time_scale,
    })
}

fn zeta_values(
    dataset: &Dataset,
    posterior: &super::Posterior,
    beta_new: &DVector<f64>,
    k: usize,
) -> Vec<f64> {
    dataset
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| posterior.u_tilde[i][k] + beta_new.dot(&s.x))
        .collect()
}
