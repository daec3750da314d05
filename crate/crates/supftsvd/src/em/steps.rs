//! E-step posterior moments and the closed-form M-step updates.
//!
//! All formulas exploit the Kronecker structure of the per-subject design
//! H_i (column k is vec(xi_k o Psi_ik), feature index fastest): H_i' H_i
//! reduces to elementwise products of xi inner products and psi inner
//! products, so neither V_i = sigma^2 I nor the (p m_i) x M regression
//! matrix of the psi update is ever materialized.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, Subject};
use crate::error::{Error, Result};
use crate::kernel::{self, KernelFunction};
use crate::parallel::map_indexed;

use super::{Component, Posterior};

/// Per-component singular-function values at every pooled observation time.
pub(crate) struct PsiTable {
    /// vals[k][t] for pooled observation index t.
    pub vals: Vec<Vec<f64>>,
    /// offsets[i] = first pooled index of subject i.
    pub offsets: Vec<usize>,
}

impl PsiTable {
    pub fn for_dataset(dataset: &Dataset, components: &[Component]) -> Self {
        let mut offsets = Vec::with_capacity(dataset.n());
        let mut acc = 0;
        for s in &dataset.subjects {
            offsets.push(acc);
            acc += s.n_obs();
        }
        let mut pooled = Vec::with_capacity(acc);
        for s in &dataset.subjects {
            pooled.extend_from_slice(&s.times);
        }
        let vals = components.iter().map(|c| c.psi.eval_grid(&pooled)).collect();
        PsiTable { vals, offsets }
    }

    pub fn for_subject(subject: &Subject, components: &[Component]) -> Self {
        let vals = components.iter().map(|c| c.psi.eval_grid(&subject.times)).collect();
        PsiTable {
            vals,
            offsets: vec![0],
        }
    }

    #[inline]
    pub fn slice(&self, k: usize, subject_index: usize, m: usize) -> &[f64] {
        let off = self.offsets[subject_index];
        &self.vals[k][off..off + m]
    }

    /// Recompute component k's values after its singular function changed.
    /// The function's knots are exactly the pooled times throughout fitting,
    /// so this is the matrix-vector product scale * (K alpha).
    pub fn refresh_from_gram(&mut self, k: usize, psi: &KernelFunction, gram: &DMatrix<f64>) {
        debug_assert_eq!(psi.knots.len(), gram.nrows());
        let alpha = DVector::from_column_slice(&psi.alpha);
        let v = gram * alpha * psi.scale;
        self.vals[k] = v.iter().copied().collect();
    }
}

/// zeta_tilde_ik = U_ik + x_i' beta_k.
#[inline]
pub(crate) fn zeta_tilde(subject: &Subject, u_i: &DVector<f64>, beta: &DVector<f64>, k: usize) -> f64 {
    u_i[k] + beta.dot(&subject.x)
}

/// Per-subject design matrix H_i with entry (b + j p, k) = xi_bk psi_k(t_ij).
pub fn build_h(subject: &Subject, components: &[Component]) -> DMatrix<f64> {
    let table = PsiTable::for_subject(subject, components);
    build_h_core(subject, 0, components, &table)
}

pub(crate) fn build_h_core(
    subject: &Subject,
    i: usize,
    components: &[Component],
    psi: &PsiTable,
) -> DMatrix<f64> {
    let p = subject.y.nrows();
    let m = subject.n_obs();
    let r = components.len();
    let mut h = DMatrix::zeros(p * m, r);
    for (k, comp) in components.iter().enumerate() {
        let pv = psi.slice(k, i, m);
        for j in 0..m {
            for b in 0..p {
                h[(j * p + b, k)] = comp.xi[b] * pv[j];
            }
        }
    }
    h
}

/// Posterior mean and variance of U_i given y_i:
/// Gamma_i = (H_i'H_i / sigma^2 + D^{-1})^{-1} and
/// U~_i = Gamma_i H_i'(y_i - H_i beta_x) / sigma^2.
pub fn e_step(
    subject: &Subject,
    components: &[Component],
    sigma2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let table = PsiTable::for_subject(subject, components);
    e_step_core(subject, 0, components, &table, sigma2)
}

pub(crate) fn e_step_core(
    subject: &Subject,
    i: usize,
    components: &[Component],
    psi: &PsiTable,
    sigma2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = subject.n_obs();
    let r = components.len();

    // H'H via the Kronecker structure.
    let mut hth = DMatrix::zeros(r, r);
    for k in 0..r {
        let pk = psi.slice(k, i, m);
        for l in k..r {
            let pl = psi.slice(l, i, m);
            let psi_dot: f64 = pk.iter().zip(pl).map(|(a, b)| a * b).sum();
            let v = components[k].xi.dot(&components[l].xi) * psi_dot;
            hth[(k, l)] = v;
            hth[(l, k)] = v;
        }
    }

    // H'(y - H beta_x), column by column.
    let mut htres = DVector::zeros(r);
    let mut col = DVector::zeros(subject.y.nrows());
    for j in 0..m {
        col.copy_from(&subject.y.column(j));
        for (k, comp) in components.iter().enumerate() {
            let coef = comp.beta.dot(&subject.x) * psi.slice(k, i, m)[j];
            if coef != 0.0 {
                col.axpy(-coef, &comp.xi, 1.0);
            }
        }
        for (k, comp) in components.iter().enumerate() {
            htres[k] += psi.slice(k, i, m)[j] * comp.xi.dot(&col);
        }
    }

    let mut gamma_inv = hth / sigma2;
    for (k, comp) in components.iter().enumerate() {
        gamma_inv[(k, k)] += 1.0 / comp.sigma2_k;
    }
    let chol = gamma_inv.clone().cholesky().ok_or_else(|| Error::SingularMatrix {
        context: format!("posterior precision of subject {}", subject.id),
    })?;
    let mut gamma = chol.inverse();
    // Enforce exact symmetry after the solve.
    for k in 0..r {
        for l in (k + 1)..r {
            let v = 0.5 * (gamma[(k, l)] + gamma[(l, k)]);
            gamma[(k, l)] = v;
            gamma[(l, k)] = v;
        }
    }
    let u = &gamma * htres / sigma2;
    Ok((u, gamma))
}

/// E-step over all subjects, in parallel, collected in subject order.
pub(crate) fn e_step_all(
    dataset: &Dataset,
    components: &[Component],
    psi: &PsiTable,
    sigma2: f64,
) -> Result<Posterior> {
    let moments: Result<Vec<_>> = map_indexed(&dataset.subjects, |i, s| {
        e_step_core(s, i, components, psi, sigma2)
    })
    .into_iter()
    .collect();
    let moments = moments?;
    let (u_tilde, gamma) = moments.into_iter().unzip();
    Ok(Posterior { u_tilde, gamma })
}

/// Partial residual R_{i,k}: the data minus every component's fit except k.
pub fn residual_r(
    subject: &Subject,
    components: &[Component],
    u_i: &DVector<f64>,
    k: usize,
) -> DMatrix<f64> {
    let table = PsiTable::for_subject(subject, components);
    residual_r_core(subject, 0, components, &table, u_i, k)
}

pub(crate) fn residual_r_core(
    subject: &Subject,
    i: usize,
    components: &[Component],
    psi: &PsiTable,
    u_i: &DVector<f64>,
    k: usize,
) -> DMatrix<f64> {
    let m = subject.n_obs();
    let mut r_mat = subject.y.clone();
    for (l, comp) in components.iter().enumerate() {
        if l == k {
            continue;
        }
        let zeta = zeta_tilde(subject, u_i, &comp.beta, l);
        if zeta == 0.0 {
            continue;
        }
        let pv = psi.slice(l, i, m);
        for j in 0..m {
            let coef = zeta * pv[j];
            if coef != 0.0 {
                r_mat.column_mut(j).axpy(-coef, &comp.xi, 1.0);
            }
        }
    }
    r_mat
}

/// Scaled and shifted residual R~_{i,k} driving the xi and psi updates:
/// entry (b, j) is {R zeta~ - sum_{l != k} xi_bl psi_l(t_ij) Gamma_kl} / w with
/// w = sqrt(zeta~^2 + Gamma_kk) and zeta~ = U_ik + x_i' beta_k^{new}.
pub fn residual_rtilde(
    subject: &Subject,
    components: &[Component],
    u_i: &DVector<f64>,
    gamma_i: &DMatrix<f64>,
    k: usize,
    beta_new: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let table = PsiTable::for_subject(subject, components);
    residual_rtilde_core(subject, 0, components, &table, u_i, gamma_i, k, beta_new)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn residual_rtilde_core(
    subject: &Subject,
    i: usize,
    components: &[Component],
    psi: &PsiTable,
    u_i: &DVector<f64>,
    gamma_i: &DMatrix<f64>,
    k: usize,
    beta_new: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let m = subject.n_obs();
    let zeta = u_i[k] + beta_new.dot(&subject.x);
    let w = (zeta * zeta + gamma_i[(k, k)]).sqrt();
    if w < 1e-12 {
        return Err(Error::ZeroDenominator(format!(
            "scaled residual of subject {}: loading and its posterior variance both collapsed",
            subject.id
        )));
    }
    let mut rt = residual_r_core(subject, i, components, psi, u_i, k) * zeta;
    for (l, comp) in components.iter().enumerate() {
        if l == k {
            continue;
        }
        let g = gamma_i[(k, l)];
        if g == 0.0 {
            continue;
        }
        let pv = psi.slice(l, i, m);
        for j in 0..m {
            rt.column_mut(j).axpy(-g * pv[j], &comp.xi, 1.0);
        }
    }
    rt /= w;
    Ok(rt)
}

/// Posterior-weight w_ik = sqrt(zeta~_ik^2 + Gamma_i,kk) used in the xi and
/// psi least-squares problems (the same scaling that defines R~).
pub(crate) fn posterior_weights(
    dataset: &Dataset,
    posterior: &Posterior,
    beta_new: &DVector<f64>,
    k: usize,
) -> Vec<f64> {
    dataset
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let zeta = posterior.u_tilde[i][k] + beta_new.dot(&s.x);
            (zeta * zeta + posterior.gamma[i][(k, k)]).sqrt()
        })
        .collect()
}

/// Closed-form update of beta_k: least squares of Z on the (p M) x q design
/// with rows x_i xi_bk psi_k(t_ij), assembled through its q x q normal
/// equations. Returns an empty vector when q = 0.
pub fn update_beta(
    dataset: &Dataset,
    components: &[Component],
    posterior: &Posterior,
    k: usize,
) -> Result<DVector<f64>> {
    let table = PsiTable::for_dataset(dataset, components);
    update_beta_core(dataset, components, &table, posterior, k)
}

pub(crate) fn update_beta_core(
    dataset: &Dataset,
    components: &[Component],
    psi: &PsiTable,
    posterior: &Posterior,
    k: usize,
) -> Result<DVector<f64>> {
    let q = dataset.q;
    if q == 0 {
        return Ok(DVector::zeros(0));
    }
    let partials = map_indexed(&dataset.subjects, |i, s| {
        let m = s.n_obs();
        let pv = psi.slice(k, i, m);
        let r_mat = residual_r_core(s, i, components, psi, &posterior.u_tilde[i], k);
        let s2: f64 = pv.iter().map(|v| v * v).sum();
        let mut v = 0.0;
        for j in 0..m {
            v += pv[j] * components[k].xi.dot(&r_mat.column(j));
        }
        v -= posterior.u_tilde[i][k] * s2;
        (s.x.clone() * s.x.transpose() * s2, s.x.clone() * v)
    });
    let mut xtx = DMatrix::zeros(q, q);
    let mut xtz = DVector::zeros(q);
    for (a, b) in partials {
        xtx += a;
        xtz += b;
    }
    solve_spd(&xtx, &xtz, "covariate-effect update (collinear covariates?)")
}

/// Solves a symmetric positive-definite system, reporting the condition
/// number when the matrix is numerically rank deficient.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || min <= 1e-12 * max {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    let chol = a.clone().cholesky().ok_or_else(|| Error::SingularMatrix {
        context: context.to_string(),
    })?;
    Ok(chol.solve(b))
}

/// Per-feature ridge-free regression slope for xi_k followed by Euclidean
/// normalization. Returns the unit vector and the discarded pre-normalization
/// norm so the caller can fold the scale back into the loadings.
pub fn update_xi(
    dataset: &Dataset,
    components: &[Component],
    posterior: &Posterior,
    k: usize,
    beta_new: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let table = PsiTable::for_dataset(dataset, components);
    let weights = posterior_weights(dataset, posterior, beta_new, k);
    let rtilde = rtilde_all(dataset, components, &table, posterior, k, beta_new)?;
    update_xi_core(dataset, &table, k, &rtilde, &weights)
}

pub(crate) fn rtilde_all(
    dataset: &Dataset,
    components: &[Component],
    psi: &PsiTable,
    posterior: &Posterior,
    k: usize,
    beta_new: &DVector<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    map_indexed(&dataset.subjects, |i, s| {
        residual_rtilde_core(
            s,
            i,
            components,
            psi,
            &posterior.u_tilde[i],
            &posterior.gamma[i],
            k,
            beta_new,
        )
    })
    .into_iter()
    .collect()
}

pub(crate) fn update_xi_core(
    dataset: &Dataset,
    psi: &PsiTable,
    k: usize,
    rtilde: &[DMatrix<f64>],
    weights: &[f64],
) -> Result<(DVector<f64>, f64)> {
    let p = dataset.p;
    let partials = map_indexed(&dataset.subjects, |i, s| {
        let m = s.n_obs();
        let pv = psi.slice(k, i, m);
        let mut numer = DVector::zeros(p);
        let mut denom = 0.0;
        for j in 0..m {
            let c = weights[i] * pv[j];
            numer.axpy(c, &rtilde[i].column(j), 1.0);
            denom += c * c;
        }
        (numer, denom)
    });
    let mut numer = DVector::zeros(p);
    let mut denom = 0.0;
    for (nv, d) in partials {
        numer += nv;
        denom += d;
    }
    if !(denom > 0.0) {
        return Err(Error::ZeroDenominator(
            "feature-loading update: no usable time weight".into(),
        ));
    }
    numer /= denom;
    let norm = numer.norm();
    if norm < 1e-12 {
        return Err(Error::DegenerateFunction(
            "feature-loading update produced a zero vector".into(),
        ));
    }
    numer /= norm;
    Ok((numer, norm))
}

/// Flips `xi` so its largest-magnitude entry is positive; returns the sign
/// that was applied (to be absorbed into beta_k and the loadings).
pub(crate) fn sign_fix(xi: &mut DVector<f64>) -> f64 {
    let mut idx = 0;
    let mut best = -1.0;
    for (i, v) in xi.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            idx = i;
        }
    }
    if xi[idx] < 0.0 {
        xi.neg_mut();
        -1.0
    } else {
        1.0
    }
}

/// Regularized representer solve for psi_k on knots = all pooled observation
/// times: [diag(w^2) K + eta I] alpha = rhs with rhs_t = w_t (xi' R~ column).
/// The returned function is L2-normalized; the discarded norm is the second
/// element. `components[k].beta` must already hold the current update.
pub fn update_psi(
    dataset: &Dataset,
    components: &[Component],
    posterior: &Posterior,
    k: usize,
    xi_new: &DVector<f64>,
    eta_k: f64,
) -> Result<(KernelFunction, f64)> {
    if !(eta_k > 0.0) {
        return Err(Error::Config(format!("eta must be positive, got {eta_k}")));
    }
    let table = PsiTable::for_dataset(dataset, components);
    let beta_new = components[k].beta.clone();
    let weights = posterior_weights(dataset, posterior, &beta_new, k);
    let rtilde = rtilde_all(dataset, components, &table, posterior, k, &beta_new)?;
    let pooled: Vec<f64> = dataset
        .subjects
        .iter()
        .flat_map(|s| s.times.iter().copied())
        .collect();
    let gram = kernel::gram_unchecked(&pooled);
    let alpha = psi_solve_alpha(dataset, &gram, &rtilde, &weights, xi_new, eta_k)?;
    let f = kernel::l2_normalize(pooled, alpha.iter().copied().collect())?;
    let norm = 1.0 / f.scale;
    Ok((f, norm))
}

/// Right-hand side and ridge solve of the psi update, shared with
/// initialization and cross-validation.
pub(crate) fn psi_solve_alpha(
    dataset: &Dataset,
    gram: &DMatrix<f64>,
    rtilde: &[DMatrix<f64>],
    weights: &[f64],
    xi_new: &DVector<f64>,
    eta: f64,
) -> Result<DVector<f64>> {
    let m_total: usize = dataset.total_obs();
    let mut rhs = DVector::zeros(m_total);
    let mut wobs = vec![0.0; m_total];
    let mut t = 0;
    for (i, s) in dataset.subjects.iter().enumerate() {
        for j in 0..s.n_obs() {
            rhs[t] = weights[i] * xi_new.dot(&rtilde[i].column(j));
            wobs[t] = weights[i];
            t += 1;
        }
    }
    psi_ridge_solve(gram, &wobs, &rhs, eta)
}

/// Solves [diag(w^2) K + eta I] alpha = rhs.
pub(crate) fn psi_ridge_solve(
    gram: &DMatrix<f64>,
    wobs: &[f64],
    rhs: &DVector<f64>,
    eta: f64,
) -> Result<DVector<f64>> {
    let m = gram.nrows();
    let mut a = gram.clone();
    for t in 0..m {
        let w2 = wobs[t] * wobs[t];
        a.row_mut(t).scale_mut(w2);
        a[(t, t)] += eta;
    }
    let svd_cond = |a: &DMatrix<f64>| {
        let sv = a.clone().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    };
    match a.clone().lu().solve(rhs) {
        Some(alpha) if alpha.iter().all(|v| v.is_finite()) => Ok(alpha),
        _ => Err(Error::SingularMatrix {
            context: format!(
                "singular-function ridge solve (condition estimate {:.3e})",
                svd_cond(&a)
            ),
        }),
    }
}

/// Folds the norms discarded by xi and psi normalization back into beta_k,
/// the latent loadings and their covariance so every subject's fitted mean is
/// unchanged; sigma_k^2 scales with the square.
pub fn rebalance_scales(
    component: &mut Component,
    posterior: &mut Posterior,
    k: usize,
    xi_norm: f64,
    psi_norm: f64,
) -> Result<()> {
    if !(xi_norm > 0.0) || !(psi_norm > 0.0) {
        return Err(Error::Config(format!(
            "rebalance requires positive norms, got {xi_norm} and {psi_norm}"
        )));
    }
    apply_gauge(component, posterior, k, xi_norm * psi_norm);
    Ok(())
}

/// Rescales component k's loading axis by `c` (which may be negative for a
/// sign flip): beta_k and U_.k by c, row/column k of each Gamma_i by c,
/// sigma_k^2 by c^2.
pub(crate) fn apply_gauge(component: &mut Component, posterior: &mut Posterior, k: usize, c: f64) {
    component.beta *= c;
    component.sigma2_k *= c * c;
    for u in &mut posterior.u_tilde {
        u[k] *= c;
    }
    for g in &mut posterior.gamma {
        g.row_mut(k).scale_mut(c);
        g.column_mut(k).scale_mut(c);
    }
}

/// Shared fit statistic: ||y_i - H_i(beta_x + U~_i)||^2 + tr(H_i'H_i Gamma_i),
/// the posterior expectation of the squared reconstruction error.
pub(crate) fn expected_sq_error(
    subject: &Subject,
    i: usize,
    components: &[Component],
    psi: &PsiTable,
    u_i: &DVector<f64>,
    gamma_i: &DMatrix<f64>,
) -> f64 {
    let m = subject.n_obs();
    let r = components.len();
    let mut acc = 0.0;
    let mut col = DVector::zeros(subject.y.nrows());
    for j in 0..m {
        col.copy_from(&subject.y.column(j));
        for (k, comp) in components.iter().enumerate() {
            let coef = zeta_tilde(subject, u_i, &comp.beta, k) * psi.slice(k, i, m)[j];
            if coef != 0.0 {
                col.axpy(-coef, &comp.xi, 1.0);
            }
        }
        acc += col.norm_squared();
    }
    for k in 0..r {
        let pk = psi.slice(k, i, m);
        for l in 0..r {
            let pl = psi.slice(l, i, m);
            let psi_dot: f64 = pk.iter().zip(pl).map(|(a, b)| a * b).sum();
            acc += components[k].xi.dot(&components[l].xi) * psi_dot * gamma_i[(k, l)];
        }
    }
    acc
}

/// Exact variance updates: sigma_k^2 = mean_i(U~_ik^2 + Gamma_i,kk) and
/// sigma^2 = mean over all pM entries of the expected squared error.
/// Values below [`super::VARIANCE_FLOOR`] are floored; the flag reports it.
pub fn update_variances(
    dataset: &Dataset,
    components: &[Component],
    posterior: &Posterior,
) -> (Vec<f64>, f64, bool) {
    let table = PsiTable::for_dataset(dataset, components);
    update_variances_core(dataset, components, &table, posterior)
}

pub(crate) fn update_variances_core(
    dataset: &Dataset,
    components: &[Component],
    psi: &PsiTable,
    posterior: &Posterior,
) -> (Vec<f64>, f64, bool) {
    let n = dataset.n() as f64;
    let r = components.len();
    let mut floored = false;
    let mut sigma2_ks = Vec::with_capacity(r);
    for k in 0..r {
        let mut acc = 0.0;
        for i in 0..dataset.n() {
            let u = posterior.u_tilde[i][k];
            acc += u * u + posterior.gamma[i][(k, k)];
        }
        let v = acc / n;
        if v < super::VARIANCE_FLOOR {
            floored = true;
            sigma2_ks.push(super::VARIANCE_FLOOR);
        } else {
            sigma2_ks.push(v);
        }
    }
    let partials = map_indexed(&dataset.subjects, |i, s| {
        expected_sq_error(s, i, components, psi, &posterior.u_tilde[i], &posterior.gamma[i])
    });
    let total: f64 = partials.iter().sum();
    let pm = (dataset.p * dataset.total_obs()) as f64;
    let mut sigma2 = total / pm;
    if sigma2 < super::VARIANCE_FLOOR {
        floored = true;
        sigma2 = super::VARIANCE_FLOOR;
    }
    (sigma2_ks, sigma2, floored)
}
