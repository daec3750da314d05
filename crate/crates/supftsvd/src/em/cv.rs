//! Cross-validation of the smoothing parameter eta_k.
//!
//! Pooled observation times are split into g folds; for each candidate eta
//! the singular function is refit on each fold's complement and scored by the
//! out-of-fold correlation between the scaled residuals and their rank-1
//! predictions. Fold solves across the (eta, fold) grid are independent and
//! run in parallel; scores are reduced in grid order.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel;
use crate::parallel::map_indexed;

use super::steps::{posterior_weights, psi_ridge_solve, rtilde_all, PsiTable};
use super::{Component, Posterior};

/// Whether the selected eta maximizes or minimizes the mean squared
/// out-of-fold correlation. Maximizing is the default: higher held-out
/// predictive correlation indicates a better-chosen amount of smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvDirection {
    MaximizeCorrelation,
    MinimizeCorrelation,
}

/// Selects eta_k by g-fold cross-validation over pooled observation times.
///
/// `components[k]` must already carry the current iteration's beta and xi.
/// The same seed always produces the same folds and the same selection.
pub fn cv_select_eta(
    dataset: &Dataset,
    components: &[Component],
    posterior: &Posterior,
    k: usize,
    eta_grid: &[f64],
    folds: usize,
    seed: u64,
    direction: CvDirection,
) -> Result<f64> {
    let table = PsiTable::for_dataset(dataset, components);
    let beta_new = components[k].beta.clone();
    let weights = posterior_weights(dataset, posterior, &beta_new, k);
    let rtilde = rtilde_all(dataset, components, &table, posterior, k, &beta_new)?;
    let zeta: Vec<f64> = dataset
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| posterior.u_tilde[i][k] + beta_new.dot(&s.x))
        .collect();
    let pooled: Vec<f64> = dataset
        .subjects
        .iter()
        .flat_map(|s| s.times.iter().copied())
        .collect();
    let gram = kernel::gram_unchecked(&pooled);
    cv_select_eta_core(
        dataset,
        &gram,
        &rtilde,
        &zeta,
        &weights,
        &components[k].xi,
        eta_grid,
        folds,
        seed,
        direction,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn cv_select_eta_core(
    dataset: &Dataset,
    gram: &DMatrix<f64>,
    rtilde: &[DMatrix<f64>],
    zeta: &[f64],
    weights: &[f64],
    xi_new: &DVector<f64>,
    eta_grid: &[f64],
    folds: usize,
    seed: u64,
    direction: CvDirection,
) -> Result<f64> {
    if eta_grid.is_empty() {
        return Err(Error::Config("eta grid must be non-empty".into()));
    }
    if eta_grid.len() == 1 {
        return Ok(eta_grid[0]);
    }
    if folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    let m_total = dataset.total_obs();
    if m_total < 2 * folds {
        return Err(Error::InsufficientData(format!(
            "{m_total} pooled time points cannot support {folds}-fold cross-validation"
        )));
    }

    // Pooled index -> (subject, column).
    let mut obs_subject = Vec::with_capacity(m_total);
    let mut obs_col = Vec::with_capacity(m_total);
    for (i, s) in dataset.subjects.iter().enumerate() {
        for j in 0..s.n_obs() {
            obs_subject.push(i);
            obs_col.push(j);
        }
    }

    let mut shuffled: Vec<usize> = (0..m_total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut fold_of = vec![0usize; m_total];
    for f in 0..folds {
        let start = f * m_total / folds;
        let end = (f + 1) * m_total / folds;
        for &t in &shuffled[start..end] {
            fold_of[t] = f;
        }
    }

    // Precompute per-(eta, fold) correlations in parallel, reduced in order.
    let jobs: Vec<(usize, usize)> = (0..eta_grid.len())
        .flat_map(|e| (0..folds).map(move |f| (e, f)))
        .collect();
    let rhos: Result<Vec<f64>> = map_indexed(&jobs, |_, &(e, f)| {
        held_out_correlation(
            gram,
            rtilde,
            zeta,
            weights,
            xi_new,
            eta_grid[e],
            &fold_of,
            f,
            &obs_subject,
            &obs_col,
        )
    })
    .into_iter()
    .collect();
    let rhos = rhos?;

    let mut best_idx = 0;
    let mut best_score = f64::NAN;
    for (e, _) in eta_grid.iter().enumerate() {
        let score: f64 =
            (0..folds).map(|f| rhos[e * folds + f].powi(2)).sum::<f64>() / folds as f64;
        let better = match direction {
            CvDirection::MaximizeCorrelation => best_score.is_nan() || score > best_score,
            CvDirection::MinimizeCorrelation => best_score.is_nan() || score < best_score,
        };
        if better {
            best_score = score;
            best_idx = e;
        }
    }
    Ok(eta_grid[best_idx])
}

/// Refits psi on the complement of fold `f` at the given eta and returns the
/// correlation between held-out scaled residuals and their predictions
/// zeta_i xi_b psi_hat(t_ij).
#[allow(clippy::too_many_arguments)]
fn held_out_correlation(
    gram: &DMatrix<f64>,
    rtilde: &[DMatrix<f64>],
    zeta: &[f64],
    weights: &[f64],
    xi_new: &DVector<f64>,
    eta: f64,
    fold_of: &[usize],
    fold: usize,
    obs_subject: &[usize],
    obs_col: &[usize],
) -> Result<f64> {
    let m_total = fold_of.len();
    let comp: Vec<usize> = (0..m_total).filter(|&t| fold_of[t] != fold).collect();
    let held: Vec<usize> = (0..m_total).filter(|&t| fold_of[t] == fold).collect();
    if comp.is_empty() || held.is_empty() {
        return Err(Error::InsufficientData(
            "a cross-validation fold is empty".into(),
        ));
    }

    let mc = comp.len();
    let mut sub_gram = DMatrix::zeros(mc, mc);
    for (a, &ta) in comp.iter().enumerate() {
        for (b, &tb) in comp.iter().enumerate() {
            sub_gram[(a, b)] = gram[(ta, tb)];
        }
    }
    let mut rhs = DVector::zeros(mc);
    let mut wobs = vec![0.0; mc];
    for (a, &t) in comp.iter().enumerate() {
        let i = obs_subject[t];
        rhs[a] = weights[i] * xi_new.dot(&rtilde[i].column(obs_col[t]));
        wobs[a] = weights[i];
    }
    let alpha = psi_ridge_solve(&sub_gram, &wobs, &rhs, eta)?;

    // psi_hat at held-out times: rows of the full Gram restricted to (held, comp).
    let p = xi_new.len();
    let mut obs = Vec::with_capacity(held.len() * p);
    let mut pred = Vec::with_capacity(held.len() * p);
    for &t in &held {
        let mut psi_val = 0.0;
        for (a, &tc) in comp.iter().enumerate() {
            psi_val += gram[(t, tc)] * alpha[a];
        }
        let i = obs_subject[t];
        let col = rtilde[i].column(obs_col[t]);
        for b in 0..p {
            obs.push(col[b]);
            pred.push(zeta[i] * xi_new[b] * psi_val);
        }
    }
    Ok(pearson(&obs, &pred))
}

/// Sample correlation; zero when either vector has no variance.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - ma;
        let db = y - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa.sqrt() * sbb.sqrt())
    }
}
