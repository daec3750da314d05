//! Command-line surface: transform, simulate, fit, predict, evaluate.
//!
//! Exit codes: 0 success, 2 usage/validation, 3 data-format, 4 numerical
//! failure. Every command with a seed is bit-deterministic for a fixed
//! thread count, and no command mutates its input files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use supftsvd::data::{clr_transform, filter_features, FilterRule};
use supftsvd::em::{self, CvDirection, FitConfig};
use supftsvd::error::{Error, Result};
use supftsvd::inference::{default_grid, predict_trajectory, project_subject, NewSubjectScores};
use supftsvd::kernel::linspace_01;
use supftsvd::metrics::{component_errors, mspe, r2_loading, r2_tensor, EvalReport};
use supftsvd::simulate::{simulate, simulate_from_truth, CovariateDist, MRule, SimConfig};
use supftsvd::{io, Dataset};

#[derive(Parser)]
#[command(
    name = "supftsvd",
    version,
    about = "Supervised functional tensor SVD for longitudinal data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter low-abundance features and CLR-transform a count table.
    Transform(TransformArgs),
    /// Generate a synthetic dataset with retained ground truth.
    Simulate(SimulateArgs),
    /// Fit the decomposition to a dataset.
    Fit(FitArgs),
    /// Project subjects through a fitted model and emit trajectories.
    Predict(PredictArgs),
    /// Score a fitted model against data and/or simulation truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct TransformArgs {
    /// Long-format counts CSV (subject_id,time,feature,value).
    #[arg(long)]
    counts: PathBuf,
    /// Output CSV of CLR-transformed values.
    #[arg(long)]
    output: PathBuf,
    /// Keep features observed in at least this fraction of samples.
    #[arg(long)]
    min_prevalence: Option<f64>,
    /// Keep features reaching this relative abundance in enough samples.
    #[arg(long, requires = "min_samples")]
    min_rel_abundance: Option<f64>,
    /// Sample count required by --min-rel-abundance.
    #[arg(long, requires = "min_rel_abundance")]
    min_samples: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    rank: usize,
    /// Fixed observations per subject; default draws from {3,...,8}.
    #[arg(long)]
    m_fixed: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    /// Loading-noise variances, one per component (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    tau: Vec<f64>,
    /// Covariate effects per component, e.g. "1.5,3;2,3.4". Empty for q = 0.
    #[arg(long, default_value = "1.5,3")]
    gamma: String,
    /// Force all covariate effects to zero (keeps the covariates themselves).
    #[arg(long, default_value_t = false)]
    gamma_zero: bool,
    /// Singular values, one per component (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "80.0")]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Separate covariate stream so replicates share covariates.
    #[arg(long)]
    covariate_seed: Option<u64>,
    /// Draw new subjects from an existing truth JSON instead of new components.
    #[arg(long)]
    truth_in: Option<PathBuf>,
    #[arg(long)]
    out_data: PathBuf,
    #[arg(long)]
    out_covariates: Option<PathBuf>,
    #[arg(long)]
    out_truth: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Covariates CSV; omit for an unsupervised (q = 0) fit.
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    rank: usize,
    /// Candidate smoothing values (comma-separated).
    #[arg(long, value_delimiter = ',')]
    eta_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Iterations that re-run cross-validation before eta freezes.
    #[arg(long, default_value_t = 3)]
    s0: usize,
    #[arg(long, default_value_t = 1e-6)]
    delta_stop: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = available parallelism).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Whether cross-validation maximizes or minimizes the held-out squared
    /// correlation.
    #[arg(long, value_parser = ["max", "min"], default_value = "max")]
    cv_direction: String,
    /// Append a constant covariate column.
    #[arg(long, default_value_t = false)]
    add_intercept: bool,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// New subjects' observations; enables full posterior projection.
    #[arg(long)]
    data: Option<PathBuf>,
    /// New subjects' covariates (required with --data if the model has q > 0;
    /// alone it requests covariate-only prediction).
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Number of equally spaced evaluation points on the training time range.
    #[arg(long, default_value_t = 101)]
    grid: usize,
    #[arg(long)]
    out_predictions: PathBuf,
    #[arg(long)]
    out_scores: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Simulation truth JSON enabling component errors (and MSPE with --data).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Observed data enabling tensor R^2 and loading R^2.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Evaluation grid size for MSPE (odd, for Simpson quadrature).
    #[arg(long, default_value_t = 101)]
    grid: usize,
    #[arg(long)]
    out_report: PathBuf,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Transform(args) => cmd_transform(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn cmd_transform(args: TransformArgs) -> Result<()> {
    let counts = io::read_counts(&args.counts)?;
    let rule = match (args.min_prevalence, args.min_rel_abundance, args.min_samples) {
        (Some(_), Some(_), _) => {
            return Err(Error::Config(
                "--min-prevalence and --min-rel-abundance are mutually exclusive".into(),
            ))
        }
        (Some(fraction), None, _) => Some(FilterRule::MinPrevalence { fraction }),
        (None, Some(threshold), Some(min_samples)) => {
            Some(FilterRule::MinRelAbundance { threshold, min_samples })
        }
        _ => None,
    };
    let filtered = match rule {
        Some(rule) => filter_features(&counts, rule)?,
        None => counts,
    };
    let dataset = clr_transform(&filtered)?;
    io::write_dataset_csv(&args.output, &dataset)?;
    eprintln!(
        "transform: kept {} features across {} samples -> {}",
        dataset.p,
        dataset.total_obs(),
        args.output.display()
    );
    Ok(())
}

fn parse_gamma(spec: &str, rank: usize, zero: bool) -> Result<Vec<DVector<f64>>> {
    if spec.trim().is_empty() {
        return Ok(vec![DVector::zeros(0); rank]);
    }
    let mut out = Vec::new();
    for part in spec.split(';') {
        let vals: std::result::Result<Vec<f64>, _> =
            part.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|_| Error::Config(format!("cannot parse gamma {part:?}")))?;
        out.push(DVector::from_vec(vals));
    }
    if out.len() == 1 && rank > 1 {
        out = vec![out[0].clone(); rank];
    }
    if out.len() != rank {
        return Err(Error::Config(format!(
            "gamma specifies {} components, rank is {rank}",
            out.len()
        )));
    }
    if zero {
        for g in &mut out {
            g.fill(0.0);
        }
    }
    Ok(out)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let m_rule = match args.m_fixed {
        Some(m) => MRule::Fixed(m),
        None => MRule::Uniform { lo: 3, hi: 8 },
    };
    let (dataset, truth) = match &args.truth_in {
        Some(path) => {
            let truth = io::read_truth(path)?;
            let q = truth.gamma.first().map(|g| g.len()).unwrap_or(0);
            let dists = vec![CovariateDist::Uniform01; q];
            simulate_from_truth(&truth, args.n, m_rule, &dists, args.seed)?
        }
        None => {
            let gamma = parse_gamma(&args.gamma, args.rank, args.gamma_zero)?;
            let q = gamma.first().map(|g| g.len()).unwrap_or(0);
            let mut dists = vec![CovariateDist::Uniform01; q];
            if q == 2 {
                dists[1] = CovariateDist::Beta11;
            }
            let tau = broadcast(&args.tau, args.rank, "tau")?;
            let lambda = broadcast(&args.lambda, args.rank, "lambda")?;
            let config = SimConfig {
                n: args.n,
                p: args.p,
                rank: args.rank,
                m_rule,
                sigma2: args.sigma2,
                tau,
                gamma,
                lambda,
                covariate_dists: dists,
                seed: args.seed,
                covariate_seed: args.covariate_seed,
            };
            simulate(&config)?
        }
    };
    io::write_dataset_csv(&args.out_data, &dataset)?;
    if let Some(path) = &args.out_covariates {
        if dataset.q == 0 {
            return Err(Error::Config(
                "covariate output requested for a q = 0 simulation".into(),
            ));
        }
        io::write_covariates_csv(path, &dataset)?;
    }
    io::write_truth(&args.out_truth, &truth)?;
    eprintln!(
        "simulate: n = {}, p = {}, rank = {}, M = {}",
        dataset.n(),
        dataset.p,
        truth.rank,
        dataset.total_obs()
    );
    Ok(())
}

fn broadcast(vals: &[f64], rank: usize, name: &str) -> Result<Vec<f64>> {
    if vals.len() == rank {
        Ok(vals.to_vec())
    } else if vals.len() == 1 {
        Ok(vec![vals[0]; rank])
    } else {
        Err(Error::Config(format!(
            "{name} specifies {} values, rank is {rank}",
            vals.len()
        )))
    }
}

/// Runs `f` inside a rayon pool of the requested size so reductions see a
/// fixed subject order regardless of thread count.
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            return pool.install(f);
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let mut dataset = io::read_dataset(&args.data, args.covariates.as_deref())?;
    if args.add_intercept {
        if dataset.q == 0 {
            return Err(Error::Config(
                "--add-intercept without covariates would fit a pure intercept; omit covariates for the unsupervised mode".into(),
            ));
        }
        dataset = dataset.with_intercept();
    }
    let config = FitConfig {
        rank: args.rank,
        eta_grid: args.eta_grid.clone().unwrap_or_else(em::default_eta_grid),
        cv_folds: args.folds,
        cv_freeze_iter: args.s0,
        cv_direction: if args.cv_direction == "min" {
            CvDirection::MinimizeCorrelation
        } else {
            CvDirection::MaximizeCorrelation
        },
        delta_stop: args.delta_stop,
        max_iter: args.max_iter,
        seed: args.seed,
    };
    let model = with_threads(args.threads, || em::fit(&dataset, &config))?;
    io::write_model(&args.out_model, &model)?;
    if let Some(path) = &args.out_diagnostics {
        io::write_diagnostics_csv(path, &model.diagnostics)?;
    }
    eprintln!(
        "fit: rank {} on n = {}, p = {}, q = {}; {} iterations, converged = {}",
        model.rank,
        dataset.n(),
        model.p,
        model.q,
        model.diagnostics.iterations,
        model.diagnostics.converged
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model = io::read_model(&args.model)?;
    if args.grid < 2 {
        return Err(Error::Config("grid needs at least 2 points".into()));
    }
    let grid = if args.grid == 101 {
        default_grid()
    } else {
        linspace_01(args.grid)
    };
    let (ids, scores): (Vec<String>, Vec<NewSubjectScores>) = match (&args.data, &args.covariates)
    {
        (Some(data), covariates) => {
            if model.q > 0 && covariates.is_none() {
                return Err(Error::Mismatch(format!(
                    "model has q = {} covariates; supply --covariates",
                    model.q
                )));
            }
            let mut dataset = io::read_dataset(data, covariates.as_deref())?;
            if dataset.q != model.q {
                return Err(Error::Mismatch(format!(
                    "covariates have q = {}, model expects {}",
                    dataset.q, model.q
                )));
            }
            let clamped = io::align_times_to_model(&mut dataset, &model);
            if clamped > 0 {
                eprintln!(
                    "warning: {clamped} observation times fall outside the training range and were clamped to it"
                );
            }
            let mut ids = Vec::new();
            let mut scores = Vec::new();
            for s in &dataset.subjects {
                ids.push(s.id.clone());
                scores.push(project_subject(&model, s)?);
            }
            (ids, scores)
        }
        (None, Some(covariates)) => {
            if model.q == 0 {
                return Err(Error::Mismatch(
                    "covariate-only prediction is unsupported for a q = 0 model".into(),
                ));
            }
            let cov_ds = read_covariates_as_rows(covariates, &model)?;
            let mut ids = Vec::new();
            let mut scores = Vec::new();
            for (id, x) in cov_ds {
                let traj_scores = NewSubjectScores {
                    zeta_hat: DVector::from_iterator(
                        model.rank,
                        model.components.iter().map(|c| c.beta.dot(&x)),
                    ),
                    u_hat: DVector::zeros(model.rank),
                    gamma_n: nalgebra::DMatrix::zeros(model.rank, model.rank),
                };
                ids.push(id);
                scores.push(traj_scores);
            }
            (ids, scores)
        }
        (None, None) => {
            return Err(Error::Config(
                "predict needs --data (projection) and/or --covariates (covariate-only)".into(),
            ))
        }
    };
    let trajectories: Result<Vec<_>> = scores
        .iter()
        .map(|s| predict_trajectory(&model, s, &grid))
        .collect();
    let trajectories = trajectories?;
    io::write_predictions_csv(
        &args.out_predictions,
        &ids,
        &trajectories,
        &model.feature_names,
        model.time_origin,
        model.time_scale,
    )?;
    if let Some(path) = &args.out_scores {
        io::write_scores_csv(path, &ids, &scores)?;
    }
    eprintln!(
        "predict: {} subjects on a {}-point grid -> {}",
        ids.len(),
        grid.len(),
        args.out_predictions.display()
    );
    Ok(())
}

fn read_covariates_as_rows(
    path: &PathBuf,
    model: &supftsvd::ModelFit,
) -> Result<Vec<(String, DVector<f64>)>> {
    // Reuse the covariates reader by way of a private helper on io.
    let rows = io::read_covariate_rows(path)?;
    for (id, x) in &rows {
        if x.len() != model.q {
            return Err(Error::Mismatch(format!(
                "subject {id} has {} covariates, model expects {}",
                x.len(),
                model.q
            )));
        }
    }
    Ok(rows)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let model = io::read_model(&args.model)?;
    if args.truth.is_none() && args.data.is_none() {
        return Err(Error::Config(
            "evaluate needs --truth and/or --data".into(),
        ));
    }
    let mut report = EvalReport::default();
    let truth = args.truth.as_deref().map(io::read_truth).transpose()?;

    let dataset: Option<Dataset> = match &args.data {
        Some(path) => {
            let mut ds = io::read_dataset(path, args.covariates.as_deref())?;
            let clamped = io::align_times_to_model(&mut ds, &model);
            if clamped > 0 {
                eprintln!(
                    "warning: {clamped} observation times fall outside the training range and were clamped to it"
                );
            }
            Some(ds)
        }
        None => None,
    };

    if let Some(ds) = &dataset {
        let recons = supftsvd::inference::reconstruct_insample(&model, ds)?;
        report.r2_tensor = Some(r2_tensor(ds, &recons)?);
        // Loading R^2 uses the dataset covariates if present, else the truth's.
        let x_rows: Option<Vec<DVector<f64>>> = if ds.q > 0 {
            Some(ds.subjects.iter().map(|s| s.x.clone()).collect())
        } else {
            truth.as_ref().map(|t| t.x.clone())
        };
        if let Some(x_rows) = x_rows {
            if !x_rows.is_empty() && x_rows[0].len() > 0 {
                let loadings = fitted_or_projected_loadings(&model, ds)?;
                report.r2_loading = r2_loading(&loadings, &x_rows)?;
            }
        }
        if let Some(t) = &truth {
            let grid = if args.grid % 2 == 1 && args.grid >= 3 {
                linspace_01(args.grid)
            } else {
                return Err(Error::Config(format!(
                    "MSPE grid must be odd and >= 3, got {}",
                    args.grid
                )));
            };
            let mut preds = Vec::new();
            for s in &ds.subjects {
                let scores = project_subject(&model, s)?;
                preds.push(predict_trajectory(&model, &scores, &grid)?);
            }
            report.mspe = Some(mspe(&preds, t, &grid)?);
        }
    }

    if let Some(t) = &truth {
        let x_rows = t.x.clone();
        let errs = component_errors(&model, t, &x_rows)?;
        report.beta_mse = errs.beta_mse;
        report.xi_error = errs.xi_error;
        report.psi_error = errs.psi_error;
        report.sign_alignment = errs.sign_alignment;
        report.matching_failure = errs.matching_failure;
    }

    io::write_report_json(&args.out_report, &report)?;
    if let Some(path) = &args.out_csv {
        io::write_report_csv(path, &report)?;
    }
    eprintln!("evaluate: report -> {}", args.out_report.display());
    Ok(())
}

/// Subject loadings: stored posteriors when the dataset matches the training
/// subjects, fresh projections otherwise.
fn fitted_or_projected_loadings(
    model: &supftsvd::ModelFit,
    dataset: &Dataset,
) -> Result<nalgebra::DMatrix<f64>> {
    let training = dataset.n() == model.subject_ids.len()
        && dataset
            .subjects
            .iter()
            .zip(&model.subject_ids)
            .all(|(s, id)| &s.id == id)
        && dataset.q == model.q;
    let mut out = nalgebra::DMatrix::zeros(dataset.n(), model.rank);
    for (i, s) in dataset.subjects.iter().enumerate() {
        let zeta = if training {
            DVector::from_iterator(
                model.rank,
                model
                    .components
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c.beta.dot(&s.x) + model.posterior.u_tilde[i][k]),
            )
        } else {
            project_subject(model, s)?.zeta_hat
        };
        for k in 0..model.rank {
            out[(i, k)] = zeta[k];
        }
    }
    Ok(out)
}
