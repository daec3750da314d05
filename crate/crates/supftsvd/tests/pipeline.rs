//! End-to-end library tests: fit on synthetic data, project, predict,
//! reconstruct and score, plus JSON/CSV round trips.

use approx::assert_relative_eq;
use nalgebra::DVector;

use supftsvd::em::{fit, FitConfig};
use supftsvd::inference::{
    default_grid, predict_from_covariates, predict_trajectory, project_subject,
    reconstruct_insample, NewSubjectScores,
};
use supftsvd::kernel::linspace_01;
use supftsvd::metrics::{component_errors, mspe, r2_loading, r2_tensor};
use supftsvd::simulate::{
    simulate, simulate_from_truth, CovariateDist, MRule, SimConfig,
};
use supftsvd::{io, Error};

fn quick_sim(seed: u64) -> SimConfig {
    SimConfig {
        n: 25,
        p: 15,
        rank: 1,
        m_rule: MRule::Fixed(5),
        sigma2: 0.05,
        tau: vec![0.05],
        gamma: vec![DVector::from_column_slice(&[1.5, 3.0])],
        lambda: vec![8.0],
        covariate_dists: vec![CovariateDist::Uniform01, CovariateDist::Beta11],
        seed,
        covariate_seed: None,
    }
}

fn quick_fit_config() -> FitConfig {
    FitConfig {
        rank: 1,
        eta_grid: vec![1e-3, 1e-2, 1e-1],
        max_iter: 60,
        seed: 5,
        ..FitConfig::default()
    }
}

#[test]
fn projecting_training_subjects_reproduces_stored_posteriors() {
    let (ds, _) = simulate(&quick_sim(60)).unwrap();
    let model = fit(&ds, &quick_fit_config()).unwrap();
    for (i, s) in ds.subjects.iter().enumerate() {
        let scores = project_subject(&model, s).unwrap();
        let stored = &model.posterior.u_tilde[i];
        assert!(
            (scores.u_hat.clone() - stored).norm() < 1e-10,
            "subject {i}: projected {} vs stored {}",
            scores.u_hat[0],
            stored[0]
        );
        assert!((scores.gamma_n.clone() - &model.posterior.gamma[i]).norm() < 1e-10);
    }
}

#[test]
fn projection_of_exact_mean_trajectory_has_zero_u() {
    let (ds, _) = simulate(&quick_sim(61)).unwrap();
    let model = fit(&ds, &quick_fit_config()).unwrap();
    // Build a subject whose data equals the model mean for its covariates.
    let x = DVector::from_column_slice(&[0.4, 0.6]);
    let times = vec![0.1, 0.45, 0.8];
    let mut y = nalgebra::DMatrix::zeros(model.p, 3);
    for (k, comp) in model.components.iter().enumerate() {
        let _ = k;
        let zeta = comp.beta.dot(&x);
        for (j, &t) in times.iter().enumerate() {
            let pv = comp.psi.knots.iter().zip(&comp.psi.alpha).fold(0.0, |acc, (&kn, &a)| {
                acc + a * supftsvd::kernel::kernel_eval(
                    supftsvd::kernel::TimePoint::new(t).unwrap(),
                    supftsvd::kernel::TimePoint::new(kn).unwrap(),
                )
            }) * comp.psi.scale;
            y.column_mut(j).axpy(zeta * pv, &comp.xi, 1.0);
        }
    }
    let subject = supftsvd::Subject {
        id: "new".into(),
        x,
        times,
        y,
    };
    let scores = project_subject(&model, &subject).unwrap();
    assert!(scores.u_hat.norm() < 1e-8, "u_hat {}", scores.u_hat.norm());
}

#[test]
fn prediction_is_linear_in_scores() {
    let (ds, _) = simulate(&quick_sim(62)).unwrap();
    let model = fit(&ds, &quick_fit_config()).unwrap();
    let grid = default_grid();
    let scores = NewSubjectScores {
        zeta_hat: DVector::from_column_slice(&[1.3]),
        u_hat: DVector::from_column_slice(&[0.3]),
        gamma_n: nalgebra::DMatrix::zeros(1, 1),
    };
    let doubled = NewSubjectScores {
        zeta_hat: &scores.zeta_hat * 2.0,
        u_hat: scores.u_hat.clone(),
        gamma_n: scores.gamma_n.clone(),
    };
    let t1 = predict_trajectory(&model, &scores, &grid).unwrap();
    let t2 = predict_trajectory(&model, &doubled, &grid).unwrap();
    assert_relative_eq!((t2.values - t1.values * 2.0).norm(), 0.0, epsilon = 1e-12);

    let zero = NewSubjectScores {
        zeta_hat: DVector::zeros(1),
        u_hat: DVector::zeros(1),
        gamma_n: nalgebra::DMatrix::zeros(1, 1),
    };
    let t0 = predict_trajectory(&model, &zero, &grid).unwrap();
    assert_eq!(t0.values, nalgebra::DMatrix::zeros(model.p, grid.len()));
}

#[test]
fn covariate_only_prediction_is_projection_with_zero_u() {
    let (ds, _) = simulate(&quick_sim(63)).unwrap();
    let model = fit(&ds, &quick_fit_config()).unwrap();
    let grid = linspace_01(11);
    let x = DVector::from_column_slice(&[0.2, 0.9]);
    let from_cov = predict_from_covariates(&model, &x, &grid).unwrap();
    let scores = NewSubjectScores {
        zeta_hat: DVector::from_iterator(1, model.components.iter().map(|c| c.beta.dot(&x))),
        u_hat: DVector::zeros(1),
        gamma_n: nalgebra::DMatrix::zeros(1, 1),
    };
    let manual = predict_trajectory(&model, &scores, &grid).unwrap();
    assert_eq!(from_cov.values, manual.values);

    let zero = predict_from_covariates(&model, &DVector::zeros(2), &grid).unwrap();
    assert_eq!(zero.values, nalgebra::DMatrix::zeros(model.p, grid.len()));
}

#[test]
fn covariate_only_prediction_rejects_unsupervised_models() {
    let (ds, _) = simulate(&quick_sim(64)).unwrap();
    let model = fit(&ds.without_covariates(), &quick_fit_config()).unwrap();
    let err =
        predict_from_covariates(&model, &DVector::from_column_slice(&[1.0]), &linspace_01(5))
            .unwrap_err();
    assert!(matches!(err, Error::Mismatch(_)));
}

#[test]
fn noiseless_rank1_reconstruction_matches_data() {
    let mut config = quick_sim(65);
    config.sigma2 = 1e-8;
    config.tau = vec![1e-6];
    let (ds, _) = simulate(&config).unwrap();
    let model = fit(&ds, &quick_fit_config()).unwrap();
    let recons = reconstruct_insample(&model, &ds).unwrap();
    let mut sq = 0.0;
    let mut count = 0;
    for (s, rec) in ds.subjects.iter().zip(&recons) {
        sq += (s.y.clone() - &rec.total).norm_squared();
        count += s.y.len();
    }
    let rms = (sq / count as f64).sqrt();
    assert!(rms < 1e-3, "reconstruction RMS {rms}");
}

#[test]
fn information_ordering_covariate_only_vs_full_projection() {
    // With observed trajectories in hand, projection can only do better.
    let (ds, truth) = simulate(&quick_sim(66)).unwrap();
    let model = fit(&ds, &quick_fit_config()).unwrap();
    let (test_ds, test_truth) = simulate_from_truth(
        &truth,
        25,
        MRule::Fixed(5),
        &[CovariateDist::Uniform01, CovariateDist::Beta11],
        660,
    )
    .unwrap();
    let grid = default_grid();
    let mut full = Vec::new();
    let mut cov_only = Vec::new();
    for s in &test_ds.subjects {
        let scores = project_subject(&model, s).unwrap();
        full.push(predict_trajectory(&model, &scores, &grid).unwrap());
        cov_only.push(predict_from_covariates(&model, &s.x, &grid).unwrap());
    }
    let mspe_full = mspe(&full, &test_truth, &grid).unwrap();
    let mspe_cov = mspe(&cov_only, &test_truth, &grid).unwrap();
    assert!(
        mspe_cov >= mspe_full,
        "covariate-only MSPE {mspe_cov} < full-projection MSPE {mspe_full}"
    );
}

#[test]
fn fitted_model_scores_well_on_its_own_data() {
    let (ds, truth) = simulate(&quick_sim(67)).unwrap();
    let model = fit(&ds, &quick_fit_config()).unwrap();
    let recons = reconstruct_insample(&model, &ds).unwrap();
    let r2 = r2_tensor(&ds, &recons).unwrap();
    assert!(r2 > 0.9, "tensor R2 {r2}");
    let x_rows: Vec<DVector<f64>> = ds.subjects.iter().map(|s| s.x.clone()).collect();
    let loadings = model.fitted_loadings(&x_rows).unwrap();
    let r2l = r2_loading(&loadings, &x_rows).unwrap();
    assert!(r2l[0] > 0.5, "loading R2 {}", r2l[0]);
    let errs = component_errors(&model, &truth, &x_rows).unwrap();
    assert!(!errs.matching_failure);
    assert!(errs.xi_error[0] < 0.2, "xi error {}", errs.xi_error[0]);
}

#[test]
fn model_json_round_trip_is_exact() {
    let (ds, _) = simulate(&quick_sim(68)).unwrap();
    let model = fit(&ds, &quick_fit_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    io::write_model(&path, &model).unwrap();
    let loaded = io::read_model(&path).unwrap();
    assert_eq!(model.sigma2, loaded.sigma2);
    assert_eq!(model.eta, loaded.eta);
    for (a, b) in model.components.iter().zip(&loaded.components) {
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.xi, b.xi);
        assert_eq!(a.psi.alpha, b.psi.alpha);
        assert_eq!(a.psi.scale, b.psi.scale);
        assert_eq!(a.sigma2_k, b.sigma2_k);
    }
    for (a, b) in model.posterior.u_tilde.iter().zip(&loaded.posterior.u_tilde) {
        assert_eq!(a, b);
    }
    for (a, b) in model.posterior.gamma.iter().zip(&loaded.posterior.gamma) {
        assert_eq!(a, b);
    }
}

#[test]
fn truth_json_round_trip_is_exact() {
    let (_, truth) = simulate(&quick_sim(69)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("truth.json");
    io::write_truth(&path, &truth).unwrap();
    let loaded = io::read_truth(&path).unwrap();
    assert_eq!(truth.lambda, loaded.lambda);
    assert_eq!(truth.psi_basis_coef, loaded.psi_basis_coef);
    assert_eq!(truth.zeta, loaded.zeta);
    assert_eq!(truth.xi, loaded.xi);
}

#[test]
fn dataset_csv_round_trip_preserves_values() {
    let (ds, _) = simulate(&quick_sim(70)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let cov = dir.path().join("cov.csv");
    io::write_dataset_csv(&data, &ds).unwrap();
    io::write_covariates_csv(&cov, &ds).unwrap();
    let loaded = io::read_dataset(&data, Some(&cov)).unwrap();
    assert_eq!(loaded.n(), ds.n());
    assert_eq!(loaded.p, ds.p);
    assert_eq!(loaded.q, ds.q);
    for (a, b) in ds.subjects.iter().zip(&loaded.subjects) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.x, b.x);
        // Times were already in [0, 1]; the round trip re-derives the same map.
        for (ta, tb) in a.times.iter().zip(&b.times) {
            assert_relative_eq!(ds.to_raw_time(*ta), loaded.to_raw_time(*tb), epsilon = 1e-12);
        }
        assert_eq!(a.y, b.y);
    }
}
