//! Evaluation criteria: tensor R^2, loading-vs-covariate R^2, mean squared
//! prediction error, and per-component loading/function errors with sign
//! alignment.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::em::ModelFit;
use crate::error::{Error, Result};
use crate::inference::{SubjectReconstruction, TrajectoryGrid};
use crate::kernel::{linspace_01, simpson_integral_01, QUAD_NODES};
use crate::simulate::{truth_eval_psi, truth_trajectory, SimulationTruth};

/// One evaluation's worth of criteria. Fields are `None`/empty when the
/// corresponding inputs (data, truth) were not supplied.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub r2_tensor: Option<f64>,
    pub r2_loading: Vec<f64>,
    pub mspe: Option<f64>,
    pub beta_mse: Vec<f64>,
    pub xi_error: Vec<f64>,
    pub psi_error: Vec<f64>,
    pub sign_alignment: Vec<f64>,
    /// True when some fitted component could not be matched to a true one
    /// (all |cosine similarities| below 0.1); its errors are set worst-case.
    pub matching_failure: bool,
}

/// Coefficient of determination from regressing the pooled observed entries
/// on the r per-component reconstructions plus an intercept.
pub fn r2_tensor(dataset: &Dataset, recons: &[SubjectReconstruction]) -> Result<f64> {
    if recons.len() != dataset.n() {
        return Err(Error::Mismatch(format!(
            "{} reconstructions for {} subjects",
            recons.len(),
            dataset.n()
        )));
    }
    let r = recons.first().map(|c| c.per_component.len()).unwrap_or(0);
    let cols = r + 1;
    // Normal equations over all pooled entries; column r is the intercept.
    let mut gtg = DMatrix::zeros(cols, cols);
    let mut gty = DVector::zeros(cols);
    let mut yty = 0.0;
    let mut ysum = 0.0;
    let mut count = 0usize;
    let mut g_row = DVector::zeros(cols);
    for (i, s) in dataset.subjects.iter().enumerate() {
        for j in 0..s.n_obs() {
            for b in 0..dataset.p {
                for k in 0..r {
                    g_row[k] = recons[i].per_component[k][(b, j)];
                }
                g_row[r] = 1.0;
                let y = s.y[(b, j)];
                for a in 0..cols {
                    for c in 0..cols {
                        gtg[(a, c)] += g_row[a] * g_row[c];
                    }
                    gty[a] += g_row[a] * y;
                }
                yty += y * y;
                ysum += y;
                count += 1;
            }
        }
    }
    let n = count as f64;
    let sst = yty - ysum * ysum / n;
    if !(sst > 0.0) {
        return Err(Error::DegenerateFunction(
            "observed data has zero total variance".into(),
        ));
    }
    let coef = solve_psd_least_squares(&gtg, &gty);
    let ssr = (yty - 2.0 * coef.dot(&gty) + (coef.transpose() * &gtg * &coef)[(0, 0)]).max(0.0);
    Ok(1.0 - ssr / sst)
}

/// Least-squares solve of possibly rank-deficient normal equations via an
/// eigenvalue pseudo-inverse (zero directions get zero coefficients).
fn solve_psd_least_squares(gtg: &DMatrix<f64>, gty: &DVector<f64>) -> DVector<f64> {
    let eig = gtg.clone().symmetric_eigen();
    let max = eig.eigenvalues.max().max(0.0);
    let tol = 1e-12 * max.max(1.0);
    let mut coef = DVector::zeros(gty.len());
    for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > tol {
            let v = eig.eigenvectors.column(idx);
            coef.axpy(v.dot(gty) / ev, &v, 1.0);
        }
    }
    coef
}

/// Per-component OLS R^2 of the subject loadings on the covariates (with
/// intercept). `loadings` is n x r; `x_rows` holds one covariate vector per
/// subject.
pub fn r2_loading(loadings: &DMatrix<f64>, x_rows: &[DVector<f64>]) -> Result<Vec<f64>> {
    let n = loadings.nrows();
    if x_rows.len() != n {
        return Err(Error::Mismatch(format!(
            "{} covariate rows for {} subjects",
            x_rows.len(),
            n
        )));
    }
    let q = x_rows.first().map(|x| x.len()).unwrap_or(0);
    if n <= q + 1 {
        return Err(Error::InsufficientData(format!(
            "loading regression needs n > q + 1, found n = {n}, q = {q}"
        )));
    }
    let cols = q + 1;
    let mut xtx = DMatrix::zeros(cols, cols);
    for x in x_rows {
        let mut row = DVector::zeros(cols);
        row.rows_mut(0, q).copy_from(x);
        row[q] = 1.0;
        xtx += &row * row.transpose();
    }
    let eig = xtx.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || min <= 1e-12 * max {
        return Err(Error::RankDeficient {
            context: "loading regression design".into(),
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    let chol = xtx.cholesky().ok_or_else(|| Error::SingularMatrix {
        context: "loading regression design".into(),
    })?;
    let mut out = Vec::with_capacity(loadings.ncols());
    for k in 0..loadings.ncols() {
        let mut xty = DVector::zeros(cols);
        let mut ysum = 0.0;
        let mut yty = 0.0;
        for (i, x) in x_rows.iter().enumerate() {
            let y = loadings[(i, k)];
            for d in 0..q {
                xty[d] += x[d] * y;
            }
            xty[q] += y;
            ysum += y;
            yty += y * y;
        }
        let sst = yty - ysum * ysum / n as f64;
        if !(sst > 0.0) {
            out.push(0.0);
            continue;
        }
        let coef = chol.solve(&xty);
        let ssr = (yty - coef.dot(&xty)).max(0.0);
        out.push(1.0 - ssr / sst);
    }
    Ok(out)
}

/// Mean squared prediction error against the noiseless truth:
/// (1/np) sum_i sum_b integral of (Yhat_i^b - Y_i^b)^2 over [0, 1], with the
/// integral taken by Simpson quadrature on the (odd, equally spaced) grid the
/// predictions were evaluated on.
pub fn mspe(
    predicted: &[TrajectoryGrid],
    truth: &SimulationTruth,
    grid: &[f64],
) -> Result<f64> {
    let n = predicted.len();
    if n == 0 {
        return Err(Error::InsufficientData("no predicted subjects".into()));
    }
    if truth.zeta.nrows() != n {
        return Err(Error::Mismatch(format!(
            "{n} predictions for {} truth subjects",
            truth.zeta.nrows()
        )));
    }
    if grid.len() % 2 == 0 || grid.len() < 3 {
        return Err(Error::Config(format!(
            "Simpson quadrature needs an odd grid length >= 3, got {}",
            grid.len()
        )));
    }
    let p = truth.xi[0].len();
    let mut total = 0.0;
    for (i, pred) in predicted.iter().enumerate() {
        if pred.times.len() != grid.len() {
            return Err(Error::Mismatch(format!(
                "prediction {i} evaluated on {} points, expected {}",
                pred.times.len(),
                grid.len()
            )));
        }
        let clean = truth_trajectory(truth, i, grid);
        for b in 0..p {
            let sq: Vec<f64> = (0..grid.len())
                .map(|j| {
                    let d = pred.values[(b, j)] - clean[(b, j)];
                    d * d
                })
                .collect();
            total += simpson_integral_01(&sq);
        }
    }
    Ok(total / (n * p) as f64)
}

/// Per-component estimation errors after greedy |cosine| matching of fitted
/// to true feature loadings. Signs are aligned factor by factor: the xi sign
/// comes from <xi_hat, xi>, the psi sign from the L2 inner product with the
/// true function, and their product transfers to the mean-loading scale so
/// reconstructions stay invariant.
pub struct ComponentErrors {
    pub beta_mse: Vec<f64>,
    pub xi_error: Vec<f64>,
    pub psi_error: Vec<f64>,
    pub sign_alignment: Vec<f64>,
    pub matching_failure: bool,
}

pub fn component_errors(
    model: &ModelFit,
    truth: &SimulationTruth,
    x_rows: &[DVector<f64>],
) -> Result<ComponentErrors> {
    let r = model.rank;
    if truth.rank != r {
        return Err(Error::Mismatch(format!(
            "model rank {r} differs from truth rank {}",
            truth.rank
        )));
    }
    if model.p != truth.xi[0].len() {
        return Err(Error::Mismatch(format!(
            "model has {} features, truth has {}",
            model.p,
            truth.xi[0].len()
        )));
    }
    // Greedy maximum-|cosine| assignment of fitted to true components.
    let mut cos = DMatrix::zeros(r, r);
    for k in 0..r {
        for l in 0..r {
            cos[(k, l)] = model.components[k].xi.dot(&truth.xi[l]);
        }
    }
    let mut fitted_left: Vec<usize> = (0..r).collect();
    let mut true_left: Vec<usize> = (0..r).collect();
    let mut matched = vec![usize::MAX; r];
    while !fitted_left.is_empty() {
        let (mut best_k, mut best_l, mut best) = (fitted_left[0], true_left[0], -1.0);
        for &k in &fitted_left {
            for &l in &true_left {
                if cos[(k, l)].abs() > best {
                    best = cos[(k, l)].abs();
                    best_k = k;
                    best_l = l;
                }
            }
        }
        matched[best_k] = best_l;
        fitted_left.retain(|&k| k != best_k);
        true_left.retain(|&l| l != best_l);
    }

    let grid = linspace_01(QUAD_NODES);
    let mut beta_mse = Vec::with_capacity(r);
    let mut xi_error = Vec::with_capacity(r);
    let mut psi_error = Vec::with_capacity(r);
    let mut sign_alignment = Vec::with_capacity(r);
    let mut matching_failure = false;
    for k in 0..r {
        let l = matched[k];
        let comp = &model.components[k];
        let cos_kl = cos[(k, l)];
        let s_xi = if cos_kl >= 0.0 { 1.0 } else { -1.0 };
        sign_alignment.push(s_xi);
        if cos_kl.abs() < 0.1 {
            // Unmatchable component: report worst-case distances.
            matching_failure = true;
            xi_error.push(2.0);
            psi_error.push(4.0);
            beta_mse.push(f64::INFINITY);
            continue;
        }
        xi_error.push((comp.xi.clone() * s_xi - &truth.xi[l]).norm());

        let psi_hat = comp.psi.eval_grid(&grid);
        let psi_true = truth_eval_psi(truth, l, &grid);
        let inner: Vec<f64> = psi_hat.iter().zip(&psi_true).map(|(a, b)| a * b).collect();
        let s_psi = if simpson_integral_01(&inner) >= 0.0 { 1.0 } else { -1.0 };
        let diff_sq: Vec<f64> = psi_hat
            .iter()
            .zip(&psi_true)
            .map(|(a, b)| {
                let d = s_psi * a - b;
                d * d
            })
            .collect();
        psi_error.push(simpson_integral_01(&diff_sq));

        // Mean-loading MSE on the fitted scale; the loading sign is the
        // product of the two factor signs.
        let s_zeta = s_xi * s_psi;
        let mut acc = 0.0;
        for (i, x) in x_rows.iter().enumerate() {
            let fitted = s_zeta * comp.beta.dot(x);
            let target = truth.lambda[l] * truth.gamma[l].dot(&truth.x[i]);
            let d = fitted - target;
            acc += d * d;
        }
        beta_mse.push(acc / x_rows.len().max(1) as f64);
    }
    Ok(ComponentErrors {
        beta_mse,
        xi_error,
        psi_error,
        sign_alignment,
        matching_failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::reconstruct_insample;
    use crate::simulate::{simulate, MRule, SimConfig};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sim_small(seed: u64) -> (Dataset, SimulationTruth) {
        let config = SimConfig {
            n: 10,
            p: 5,
            rank: 1,
            m_rule: MRule::Fixed(3),
            sigma2: 0.2,
            tau: vec![0.5],
            gamma: vec![DVector::from_column_slice(&[1.5, 3.0])],
            lambda: vec![5.0],
            covariate_dists: vec![
                crate::simulate::CovariateDist::Uniform01,
                crate::simulate::CovariateDist::Beta11,
            ],
            seed,
            covariate_seed: None,
        };
        simulate(&config).unwrap()
    }

    fn recon_from_matrices(mats: Vec<DMatrix<f64>>) -> Vec<SubjectReconstruction> {
        mats.into_iter()
            .map(|m| SubjectReconstruction {
                per_component: vec![m.clone()],
                total: m,
            })
            .collect()
    }

    #[test]
    fn r2_is_one_for_perfect_reconstruction() {
        let (ds, _) = sim_small(1);
        let recons = recon_from_matrices(ds.subjects.iter().map(|s| s.y.clone()).collect());
        let r2 = r2_tensor(&ds, &recons).unwrap();
        assert_relative_eq!(r2, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn r2_is_zero_for_zero_reconstruction() {
        let (ds, _) = sim_small(2);
        let recons = recon_from_matrices(
            ds.subjects
                .iter()
                .map(|s| DMatrix::zeros(ds.p, s.n_obs()))
                .collect(),
        );
        let r2 = r2_tensor(&ds, &recons).unwrap();
        assert_relative_eq!(r2, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn r2_matches_dense_least_squares_oracle() {
        // Small case: assemble the full design and solve with nalgebra's SVD.
        let (ds, _) = sim_small(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let recons: Vec<SubjectReconstruction> = ds
            .subjects
            .iter()
            .map(|s| {
                let m = DMatrix::from_fn(ds.p, s.n_obs(), |_, _| rng.random_range(-1.0..1.0));
                SubjectReconstruction {
                    per_component: vec![m.clone()],
                    total: m,
                }
            })
            .collect();
        let r2 = r2_tensor(&ds, &recons).unwrap();

        let rows: usize = ds.subjects.iter().map(|s| s.n_obs() * ds.p).sum();
        let mut design = DMatrix::zeros(rows, 2);
        let mut y = DVector::zeros(rows);
        let mut t = 0;
        for (i, s) in ds.subjects.iter().enumerate() {
            for j in 0..s.n_obs() {
                for b in 0..ds.p {
                    design[(t, 0)] = recons[i].per_component[0][(b, j)];
                    design[(t, 1)] = 1.0;
                    y[t] = s.y[(b, j)];
                    t += 1;
                }
            }
        }
        let coef = design.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        let resid = &y - design * coef;
        let mean = y.sum() / rows as f64;
        let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        let oracle = 1.0 - resid.norm_squared() / sst;
        assert_relative_eq!(r2, oracle, epsilon = 1e-10);
    }

    #[test]
    fn loading_r2_is_one_for_exact_linear_loadings() {
        let (ds, truth) = sim_small(4);
        let x_rows: Vec<DVector<f64>> = ds.subjects.iter().map(|s| s.x.clone()).collect();
        let loadings = DMatrix::from_fn(ds.n(), 1, |i, _| 2.0 * truth.x[i][0] - truth.x[i][1] + 0.3);
        let r2 = r2_loading(&loadings, &x_rows).unwrap();
        assert_relative_eq!(r2[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn loading_r2_null_distribution_mean() {
        // Independent-noise loadings: E[R^2] = q / (n - 1) under the null.
        let n = 40;
        let q = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x_rows: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(q, |_, _| rng.random_range(0.0..1.0)))
            .collect();
        let reps = 400;
        let mut vals = Vec::with_capacity(reps);
        for _ in 0..reps {
            let loadings = DMatrix::from_fn(n, 1, |_, _| {
                let u: f64 = rng.random_range(0.0..1.0);
                let v: f64 = rng.random_range(0.0..1.0);
                // Box-Muller standard normal
                (-2.0 * u.max(1e-12).ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
            });
            vals.push(r2_loading(&loadings, &x_rows).unwrap()[0]);
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / reps as f64).sqrt();
        let expect = q as f64 / (n as f64 - 1.0);
        assert!(
            (mean - expect).abs() < 3.0 * sd / (reps as f64).sqrt() + 0.01,
            "null mean {mean} vs expected {expect}"
        );
    }

    #[test]
    fn mspe_zero_for_exact_predictions_and_offset_squared() {
        let (_, truth) = sim_small(5);
        let grid = linspace_01(101);
        let preds: Vec<TrajectoryGrid> = (0..truth.zeta.nrows())
            .map(|i| TrajectoryGrid {
                times: grid.clone(),
                values: truth_trajectory(&truth, i, &grid),
            })
            .collect();
        assert_relative_eq!(mspe(&preds, &truth, &grid).unwrap(), 0.0, epsilon = 1e-20);

        let c = 0.7;
        let shifted: Vec<TrajectoryGrid> = preds
            .iter()
            .map(|p| TrajectoryGrid {
                times: p.times.clone(),
                values: p.values.map(|v| v + c),
            })
            .collect();
        assert_relative_eq!(mspe(&shifted, &truth, &grid).unwrap(), c * c, max_relative = 1e-10);
    }

    #[test]
    fn component_errors_vanish_when_model_equals_truth() {
        let (ds, truth) = sim_small(6);
        let model = model_from_truth(&ds, &truth);
        let x_rows: Vec<DVector<f64>> = ds.subjects.iter().map(|s| s.x.clone()).collect();
        let errs = component_errors(&model, &truth, &x_rows).unwrap();
        assert!(errs.xi_error[0] < 1e-10);
        assert!(errs.psi_error[0] < 1e-5, "psi error {}", errs.psi_error[0]);
        assert!(errs.beta_mse[0] < 1e-16);
        assert!(!errs.matching_failure);
    }

    #[test]
    fn component_errors_are_sign_invariant() {
        let (ds, truth) = sim_small(7);
        let x_rows: Vec<DVector<f64>> = ds.subjects.iter().map(|s| s.x.clone()).collect();
        let base = model_from_truth(&ds, &truth);
        let errs0 = component_errors(&base, &truth, &x_rows).unwrap();
        // Simultaneous flip of xi and psi leaves the loadings valid; every
        // reported error must be unchanged.
        let mut flipped = base.clone();
        flipped.components[0].xi.neg_mut();
        for a in &mut flipped.components[0].psi.alpha {
            *a = -*a;
        }
        let errs1 = component_errors(&flipped, &truth, &x_rows).unwrap();
        assert_relative_eq!(errs0.xi_error[0], errs1.xi_error[0], epsilon = 1e-12);
        assert_relative_eq!(errs0.psi_error[0], errs1.psi_error[0], epsilon = 1e-12);
        assert_relative_eq!(errs0.beta_mse[0], errs1.beta_mse[0], epsilon = 1e-12);
    }

    #[test]
    fn perturbed_xi_error_matches_hand_distance() {
        let (ds, truth) = sim_small(8);
        let mut model = model_from_truth(&ds, &truth);
        let mut xi = truth.xi[0].clone();
        xi[0] += 0.05;
        xi /= xi.norm();
        model.components[0].xi = xi.clone();
        let x_rows: Vec<DVector<f64>> = ds.subjects.iter().map(|s| s.x.clone()).collect();
        let errs = component_errors(&model, &truth, &x_rows).unwrap();
        assert_relative_eq!(errs.xi_error[0], (xi - &truth.xi[0]).norm(), epsilon = 1e-12);
    }

    /// Builds a ModelFit whose components replicate the simulation truth:
    /// psi is a dense kernel interpolant of the true function, beta = lambda * gamma.
    fn model_from_truth(ds: &Dataset, truth: &SimulationTruth) -> ModelFit {
        use crate::em::{Component, Diagnostics, Posterior};
        let knots = linspace_01(101);
        let gram = crate::kernel::gram_unchecked(&knots);
        let target = DVector::from_vec(truth_eval_psi(truth, 0, &knots));
        // Lightly regularized interpolation of the true function.
        let mut a = gram.clone();
        for d in 0..knots.len() {
            a[(d, d)] += 1e-10;
        }
        let alpha = a.lu().solve(&target).unwrap();
        let psi = crate::kernel::l2_normalize(knots, alpha.iter().copied().collect()).unwrap();
        let n = ds.n();
        let components = vec![Component {
            beta: truth.gamma[0].clone() * truth.lambda[0],
            xi: truth.xi[0].clone(),
            psi,
            sigma2_k: truth.lambda[0] * truth.lambda[0] * truth.tau[0],
        }];
        ModelFit {
            rank: 1,
            components,
            sigma2: truth.sigma2,
            posterior: Posterior {
                u_tilde: (0..n)
                    .map(|i| {
                        DVector::from_column_slice(&[truth.lambda[0]
                            * (truth.zeta[(i, 0)] - truth.gamma[0].dot(&truth.x[i]))])
                    })
                    .collect(),
                gamma: (0..n).map(|_| DMatrix::identity(1, 1)).collect(),
            },
            subject_ids: ds.subjects.iter().map(|s| s.id.clone()).collect(),
            eta: vec![0.1],
            diagnostics: Diagnostics::default(),
            p: ds.p,
            q: ds.q,
            feature_names: ds.feature_names.clone(),
            covariate_names: ds.covariate_names.clone(),
            time_origin: 0.0,
            time_scale: 1.0,
        }
    }

    #[test]
    fn insample_reconstruction_consistency() {
        // Sum of per-component reconstructions equals the stored total.
        let (ds, truth) = sim_small(10);
        let model = model_from_truth(&ds, &truth);
        let recons = reconstruct_insample(&model, &ds).unwrap();
        for rec in &recons {
            let mut sum = DMatrix::zeros(rec.total.nrows(), rec.total.ncols());
            for c in &rec.per_component {
                sum += c;
            }
            assert_relative_eq!((sum - &rec.total).norm(), 0.0, epsilon = 1e-12);
        }
    }
}
