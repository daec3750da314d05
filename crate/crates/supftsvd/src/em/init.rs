//! Starting values: SVD feature loadings, covariate regression of mean
//! scores, a kernel-ridge pass for the singular functions and a residual fit
//! for the noise variance.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel;

use super::steps::{psi_ridge_solve, sign_fix, solve_spd};
use super::{Component, Posterior, VARIANCE_FLOOR};

/// Stacks the per-subject matrices into the p x M matrix [Y_1 ... Y_n].
fn stacked_data(dataset: &Dataset) -> DMatrix<f64> {
    let p = dataset.p;
    let m_total = dataset.total_obs();
    let mut y = DMatrix::zeros(p, m_total);
    let mut col = 0;
    for s in &dataset.subjects {
        for j in 0..s.n_obs() {
            y.column_mut(col).copy_from(&s.y.column(j));
            col += 1;
        }
    }
    y
}

/// Singular values of the stacked p x M data matrix, largest first, for
/// scree-style rank inspection. No automatic rank selection is performed.
pub fn singular_value_scree(dataset: &Dataset, max_rank: usize) -> Vec<f64> {
    let sv = stacked_data(dataset).singular_values();
    sv.iter().copied().take(max_rank).collect()
}

/// Computes starting values for a rank-r fit.
///
/// xi_k^0 are the first r left singular vectors of the stacked data
/// (sign-fixed); beta_k^0, U^0 and sigma_k^0 come from regressing the
/// per-subject mean scores on the covariates (centered scores when q = 0);
/// psi_k^0 is one kernel-ridge pass at `default_eta`; sigma^0 is the residual
/// variance of a final regression of the data on the initialized components.
pub fn initialize(
    dataset: &Dataset,
    r: usize,
    default_eta: f64,
) -> Result<(Vec<Component>, Posterior, f64)> {
    let n = dataset.n();
    let p = dataset.p;
    let q = dataset.q;
    let m_total = dataset.total_obs();
    if r == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    if p < r || m_total < r {
        return Err(Error::InsufficientData(format!(
            "rank {r} needs p >= {r} and M >= {r}, found p = {p}, M = {m_total}"
        )));
    }

    let stacked = stacked_data(dataset);
    let svd = stacked.clone().svd(true, false);
    let u = svd.u.as_ref().ok_or_else(|| Error::SingularMatrix {
        context: "SVD of the stacked data matrix".into(),
    })?;
    if u.ncols() < r {
        return Err(Error::InsufficientData(format!(
            "SVD produced only {} singular vectors, rank {r} requested",
            u.ncols()
        )));
    }

    let mut xis: Vec<DVector<f64>> = Vec::with_capacity(r);
    for k in 0..r {
        let mut xi = u.column(k).clone_owned();
        sign_fix(&mut xi);
        xis.push(xi);
    }

    // Per-subject mean scores: (sum_j xi_k' Y_ij) / m_i.
    let mut scores = DMatrix::zeros(n, r);
    for (i, s) in dataset.subjects.iter().enumerate() {
        for (k, xi) in xis.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..s.n_obs() {
                acc += xi.dot(&s.y.column(j));
            }
            scores[(i, k)] = acc / s.n_obs() as f64;
        }
    }

    let mut betas: Vec<DVector<f64>> = Vec::with_capacity(r);
    let mut u0 = DMatrix::zeros(n, r);
    let mut sigma2_ks = Vec::with_capacity(r);
    if q > 0 {
        let mut xtx = DMatrix::zeros(q, q);
        for s in &dataset.subjects {
            xtx += &s.x * s.x.transpose();
        }
        for k in 0..r {
            let mut xty = DVector::zeros(q);
            for (i, s) in dataset.subjects.iter().enumerate() {
                xty += &s.x * scores[(i, k)];
            }
            let beta = solve_spd(&xtx, &xty, "initial loading regression")?;
            let mut ssr = 0.0;
            for (i, s) in dataset.subjects.iter().enumerate() {
                let resid = scores[(i, k)] - beta.dot(&s.x);
                u0[(i, k)] = resid;
                ssr += resid * resid;
            }
            betas.push(beta);
            sigma2_ks.push((ssr / n as f64).max(VARIANCE_FLOOR));
        }
    } else {
        for k in 0..r {
            let mean = scores.column(k).sum() / n as f64;
            let mut ssr = 0.0;
            for i in 0..n {
                let resid = scores[(i, k)] - mean;
                u0[(i, k)] = resid;
                ssr += resid * resid;
            }
            betas.push(DVector::zeros(0));
            sigma2_ks.push((ssr / n as f64).max(VARIANCE_FLOOR));
        }
    }

    // Kernel-ridge pass for each singular function. With no other components
    // initialized yet, the working residual is the data itself and the
    // posterior variance is zero, so the weights reduce to the initial
    // loadings zeta_ik^0 = x_i' beta_k^0 + U_ik^0.
    let pooled: Vec<f64> = dataset
        .subjects
        .iter()
        .flat_map(|s| s.times.iter().copied())
        .collect();
    let gram = kernel::gram_unchecked(&pooled);
    let mut components = Vec::with_capacity(r);
    for k in 0..r {
        let mut rhs = DVector::zeros(m_total);
        let mut wobs = vec![0.0; m_total];
        let mut t = 0;
        for (i, s) in dataset.subjects.iter().enumerate() {
            let zeta = betas[k].dot(&s.x) + u0[(i, k)];
            for j in 0..s.n_obs() {
                rhs[t] = zeta * xis[k].dot(&s.y.column(j));
                wobs[t] = zeta.abs();
                t += 1;
            }
        }
        let alpha = psi_ridge_solve(&gram, &wobs, &rhs, default_eta)?;
        let psi = kernel::l2_normalize(pooled.clone(), alpha.iter().copied().collect()).map_err(
            |_| Error::DegenerateFunction(format!(
                "initial singular function {k} is degenerate (constant subject scores?)"
            )),
        )?;
        let psi_norm = 1.0 / psi.scale;
        // Fold the discarded raw norm into the loading scale.
        betas[k] *= psi_norm;
        for i in 0..n {
            u0[(i, k)] *= psi_norm;
        }
        sigma2_ks[k] = (sigma2_ks[k] * psi_norm * psi_norm).max(VARIANCE_FLOOR);
        components.push(Component {
            beta: betas[k].clone(),
            xi: xis[k].clone(),
            psi,
            sigma2_k: sigma2_ks[k],
        });
    }

    // Residual fit for sigma^2: regress all data entries on the r initialized
    // rank-1 components and take the mean squared residual.
    let mut gtg = DMatrix::zeros(r, r);
    let mut gty = DVector::zeros(r);
    let mut yty = 0.0;
    for (i, s) in dataset.subjects.iter().enumerate() {
        for j in 0..s.n_obs() {
            let y_col = s.y.column(j);
            let mut g_col = DVector::zeros(r);
            for (k, comp) in components.iter().enumerate() {
                let zeta = comp.beta.dot(&s.x) + u0[(i, k)];
                g_col[k] = zeta * comp.psi.eval(s.times[j]);
            }
            for k in 0..r {
                for l in 0..r {
                    gtg[(k, l)] += g_col[k] * g_col[l] * components[k].xi.dot(&components[l].xi);
                }
                gty[k] += g_col[k] * components[k].xi.dot(&y_col);
            }
            yty += y_col.norm_squared();
        }
    }
    let coef = solve_spd(&gtg, &gty, "initial noise-variance regression")?;
    let ssr = (yty - coef.dot(&gty)).max(0.0);
    let sigma2 = (ssr / (p * m_total) as f64).max(VARIANCE_FLOOR);

    let posterior = Posterior {
        u_tilde: (0..n).map(|i| u0.row(i).transpose()).collect(),
        gamma: (0..n).map(|_| DMatrix::zeros(r, r)).collect(),
    };
    Ok((components, posterior, sigma2))
}
