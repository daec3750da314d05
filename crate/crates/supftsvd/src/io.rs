//! File formats: long-format data CSV, covariates CSV, and the versioned
//! JSON documents for models, simulation truths and evaluation reports.
//!
//! Long format is `subject_id,time,feature,value` (UTF-8, decimal point).
//! Subjects, features and per-subject times are ordered by first appearance;
//! duplicate (subject, time, feature) triples and incomplete feature vectors
//! within a sample are input errors rather than silently aggregated.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{rescale_times, CountSubject, CountTable, Dataset, Subject};
use crate::em::{Component, Diagnostics, ModelFit, Posterior};
use crate::error::{Error, Result};
use crate::inference::TrajectoryGrid;
use crate::kernel::KernelFunction;
use crate::metrics::EvalReport;
use crate::simulate::SimulationTruth;

pub const FORMAT_VERSION: &str = "1";

// ---------------------------------------------------------------------------
// Long-format CSV ingestion
// ---------------------------------------------------------------------------

struct LongTable<T> {
    subject_ids: Vec<String>,
    feature_names: Vec<String>,
    /// For each subject: times (in appearance order) and per-(feature, time) values.
    times: Vec<Vec<f64>>,
    values: Vec<HashMap<(usize, usize), T>>,
}

fn read_long_generic<T, F>(path: &Path, parse_value: F) -> Result<LongTable<T>>
where
    F: Fn(&str, u64) -> Result<T>,
{
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    {
        let headers = reader.headers().map_err(csv_err)?;
        let expect = ["subject_id", "time", "feature", "value"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(Error::DataFormat {
                line: Some(1),
                msg: format!("expected header subject_id,time,feature,value, found {got:?}"),
            });
        }
    }
    let mut subject_idx: HashMap<String, usize> = HashMap::new();
    let mut feature_idx: HashMap<String, usize> = HashMap::new();
    let mut time_idx: Vec<HashMap<u64, usize>> = Vec::new();
    let mut table = LongTable {
        subject_ids: Vec::new(),
        feature_names: Vec::new(),
        times: Vec::new(),
        values: Vec::new(),
    };
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::DataFormat {
                line: Some(line),
                msg: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let sid = record[0].to_string();
        let time: f64 = record[1].parse().map_err(|_| Error::DataFormat {
            line: Some(line),
            msg: format!("cannot parse time {:?}", &record[1]),
        })?;
        if !time.is_finite() {
            return Err(Error::DataFormat {
                line: Some(line),
                msg: format!("non-finite time {time}"),
            });
        }
        let feature = record[2].to_string();
        let value = parse_value(&record[3], line)?;

        let si = *subject_idx.entry(sid.clone()).or_insert_with(|| {
            table.subject_ids.push(sid);
            table.times.push(Vec::new());
            table.values.push(HashMap::new());
            time_idx.push(HashMap::new());
            table.subject_ids.len() - 1
        });
        let fi = *feature_idx.entry(feature.clone()).or_insert_with(|| {
            table.feature_names.push(feature);
            table.feature_names.len() - 1
        });
        let ti = *time_idx[si].entry(time.to_bits()).or_insert_with(|| {
            table.times[si].push(time);
            table.times[si].len() - 1
        });
        if table.values[si].insert((fi, ti), value).is_some() {
            return Err(Error::DataFormat {
                line: Some(line),
                msg: format!(
                    "duplicate (subject, time, feature) triple: ({}, {time}, {})",
                    table.subject_ids[si], table.feature_names[fi]
                ),
            });
        }
    }
    if table.subject_ids.is_empty() {
        return Err(Error::DataFormat {
            line: None,
            msg: "no data rows".into(),
        });
    }
    Ok(table)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    Error::DataFormat {
        line,
        msg: e.to_string(),
    }
}

/// Sorts one subject's times ascending and asserts every (feature, time)
/// cell is present; returns the p x m matrix in sorted time order.
fn assemble_matrix<T: Copy>(
    sid: &str,
    p: usize,
    feature_names: &[String],
    times: &[f64],
    cells: &HashMap<(usize, usize), T>,
    zero: T,
) -> Result<(Vec<f64>, Vec<T>)> {
    let m = times.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&j| times[j]).collect();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(Error::DataFormat {
                line: None,
                msg: format!("subject {sid} has two samples at time {}", w[0]),
            });
        }
    }
    let mut out = vec![zero; p * m];
    for (jj, &j) in order.iter().enumerate() {
        for b in 0..p {
            match cells.get(&(b, j)) {
                Some(&v) => out[jj * p + b] = v,
                None => {
                    return Err(Error::DataFormat {
                        line: None,
                        msg: format!(
                            "subject {sid} at time {} is missing feature {}; the model needs complete samples",
                            times[j], feature_names[b]
                        ),
                    })
                }
            }
        }
    }
    Ok((sorted, out))
}

/// Reads a long-format real-valued data CSV and the optional covariates CSV
/// into a [`Dataset`] with times rescaled onto [0, 1].
pub fn read_dataset(data_path: &Path, covariates_path: Option<&Path>) -> Result<Dataset> {
    let table = read_long_generic(data_path, |s, line| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::DataFormat {
                line: Some(line),
                msg: format!("cannot parse value {s:?}"),
            })
    })?;
    let p = table.feature_names.len();
    let covariates = match covariates_path {
        Some(path) => Some(read_covariates(path)?),
        None => None,
    };
    let (q, covariate_names) = match &covariates {
        Some(c) => (c.names.len(), c.names.clone()),
        None => (0, Vec::new()),
    };
    let mut subjects = Vec::with_capacity(table.subject_ids.len());
    for (si, sid) in table.subject_ids.iter().enumerate() {
        let (times, flat) = assemble_matrix(
            sid,
            p,
            &table.feature_names,
            &table.times[si],
            &table.values[si],
            0.0f64,
        )?;
        let x = match &covariates {
            Some(c) => c
                .rows
                .get(sid)
                .cloned()
                .ok_or_else(|| Error::Mismatch(format!("subject {sid} missing from covariates file")))?,
            None => DVector::zeros(0),
        };
        subjects.push(Subject {
            id: sid.clone(),
            x,
            y: DMatrix::from_column_slice(p, times.len(), &flat),
            times,
        });
    }
    let ds = Dataset {
        subjects,
        p,
        q,
        feature_names: table.feature_names,
        covariate_names,
        time_origin: 0.0,
        time_scale: 1.0,
    };
    ds.validate()?;
    Ok(rescale_times(ds))
}

/// Reads a long-format CSV of nonnegative integer counts, times left raw.
pub fn read_counts(path: &Path) -> Result<CountTable> {
    let table = read_long_generic(path, |s, line| {
        s.parse::<u64>().map_err(|_| Error::DataFormat {
            line: Some(line),
            msg: format!("cannot parse count {s:?} as a nonnegative integer"),
        })
    })?;
    let p = table.feature_names.len();
    let mut subjects = Vec::with_capacity(table.subject_ids.len());
    for (si, sid) in table.subject_ids.iter().enumerate() {
        let (times, flat) = assemble_matrix(
            sid,
            p,
            &table.feature_names,
            &table.times[si],
            &table.values[si],
            0u64,
        )?;
        subjects.push(CountSubject {
            id: sid.clone(),
            counts: DMatrix::from_column_slice(p, times.len(), &flat),
            times,
        });
    }
    Ok(CountTable {
        subjects,
        feature_names: table.feature_names,
    })
}

struct Covariates {
    names: Vec<String>,
    rows: HashMap<String, DVector<f64>>,
    ordered: Vec<(String, DVector<f64>)>,
}

/// Covariate rows in file order, for covariate-only prediction.
pub fn read_covariate_rows(path: &Path) -> Result<Vec<(String, DVector<f64>)>> {
    Ok(read_covariates(path)?.ordered)
}

fn read_covariates(path: &Path) -> Result<Covariates> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let headers: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if headers.first().map(String::as_str) != Some("subject_id") {
        return Err(Error::DataFormat {
            line: Some(1),
            msg: "covariates header must start with subject_id".into(),
        });
    }
    let names: Vec<String> = headers[1..].to_vec();
    let mut rows = HashMap::new();
    let mut ordered = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != names.len() + 1 {
            return Err(Error::DataFormat {
                line: Some(line),
                msg: format!("expected {} fields, found {}", names.len() + 1, record.len()),
            });
        }
        let sid = record[0].to_string();
        let mut x = DVector::zeros(names.len());
        for (d, field) in record.iter().skip(1).enumerate() {
            x[d] = field.parse().map_err(|_| Error::DataFormat {
                line: Some(line),
                msg: format!("cannot parse covariate {field:?}"),
            })?;
        }
        if rows.insert(sid.clone(), x.clone()).is_some() {
            return Err(Error::DataFormat {
                line: Some(line),
                msg: format!("duplicate covariate row for subject {sid}"),
            });
        }
        ordered.push((sid, x));
    }
    Ok(Covariates {
        names,
        rows,
        ordered,
    })
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// Writes a dataset back to long format, times mapped to the raw scale.
pub fn write_dataset_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "subject_id,time,feature,value")?;
    for s in &dataset.subjects {
        for (j, &t) in s.times.iter().enumerate() {
            let raw = dataset.to_raw_time(t);
            for b in 0..dataset.p {
                writeln!(
                    out,
                    "{},{},{},{}",
                    s.id,
                    raw,
                    dataset.feature_names[b],
                    s.y[(b, j)]
                )?;
            }
        }
    }
    Ok(())
}

pub fn write_covariates_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "subject_id")?;
    for name in &dataset.covariate_names {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for s in &dataset.subjects {
        write!(out, "{}", s.id)?;
        for d in 0..dataset.q {
            write!(out, ",{}", s.x[d])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Predictions as long-format CSV with raw-time labels.
pub fn write_predictions_csv(
    path: &Path,
    ids: &[String],
    trajectories: &[TrajectoryGrid],
    feature_names: &[String],
    time_origin: f64,
    time_scale: f64,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "subject_id,time,feature,value")?;
    for (id, traj) in ids.iter().zip(trajectories) {
        for (j, &t) in traj.times.iter().enumerate() {
            let raw = time_origin + time_scale * t;
            for (b, name) in feature_names.iter().enumerate() {
                writeln!(out, "{id},{raw},{name},{}", traj.values[(b, j)])?;
            }
        }
    }
    Ok(())
}

/// Per-subject, per-component scores: `subject_id,component,zeta,u_hat`.
pub fn write_scores_csv(
    path: &Path,
    ids: &[String],
    scores: &[crate::inference::NewSubjectScores],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "subject_id,component,zeta,u_hat")?;
    for (id, s) in ids.iter().zip(scores) {
        for k in 0..s.zeta_hat.len() {
            writeln!(out, "{id},{},{},{}", k + 1, s.zeta_hat[k], s.u_hat[k])?;
        }
    }
    Ok(())
}

/// Per-iteration fit diagnostics: objective, relative change, eta values.
pub fn write_diagnostics_csv(path: &Path, diagnostics: &Diagnostics) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let r = diagnostics.eta_trace.first().map(Vec::len).unwrap_or(0);
    write!(out, "iteration,objective,delta")?;
    for k in 0..r {
        write!(out, ",eta_{}", k + 1)?;
    }
    writeln!(out)?;
    for i in 0..diagnostics.objective_trace.len() {
        write!(
            out,
            "{},{},{}",
            i + 1,
            diagnostics.objective_trace[i],
            diagnostics.delta_trace[i]
        )?;
        for k in 0..r {
            write!(out, ",{}", diagnostics.eta_trace[i][k])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentJson {
    beta: Vec<f64>,
    xi: Vec<f64>,
    psi: KernelFunction,
    sigma2_k: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosteriorJson {
    subject_ids: Vec<String>,
    u_tilde: Vec<Vec<f64>>,
    /// Row-major r x r posterior covariances.
    gamma: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagnosticsJson {
    objective_trace: Vec<f64>,
    delta_trace: Vec<f64>,
    eta_trace: Vec<Vec<f64>>,
    iterations: usize,
    converged: bool,
    variance_floored: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelJson {
    format_version: String,
    rank: usize,
    p: usize,
    q: usize,
    feature_names: Vec<String>,
    covariate_names: Vec<String>,
    time_origin: f64,
    time_scale: f64,
    sigma2: f64,
    eta: Vec<f64>,
    components: Vec<ComponentJson>,
    posterior: PosteriorJson,
    diagnostics: DiagnosticsJson,
}

pub fn write_model(path: &Path, model: &ModelFit) -> Result<()> {
    let json = ModelJson {
        format_version: FORMAT_VERSION.to_string(),
        rank: model.rank,
        p: model.p,
        q: model.q,
        feature_names: model.feature_names.clone(),
        covariate_names: model.covariate_names.clone(),
        time_origin: model.time_origin,
        time_scale: model.time_scale,
        sigma2: model.sigma2,
        eta: model.eta.clone(),
        components: model
            .components
            .iter()
            .map(|c| ComponentJson {
                beta: c.beta.iter().copied().collect(),
                xi: c.xi.iter().copied().collect(),
                psi: c.psi.clone(),
                sigma2_k: c.sigma2_k,
            })
            .collect(),
        posterior: PosteriorJson {
            subject_ids: model.subject_ids.clone(),
            u_tilde: model.posterior.u_tilde.iter().map(|u| u.iter().copied().collect()).collect(),
            gamma: model
                .posterior
                .gamma
                .iter()
                .map(|g| g.transpose().iter().copied().collect())
                .collect(),
        },
        diagnostics: DiagnosticsJson {
            objective_trace: model.diagnostics.objective_trace.clone(),
            delta_trace: model.diagnostics.delta_trace.clone(),
            eta_trace: model.diagnostics.eta_trace.clone(),
            iterations: model.diagnostics.iterations,
            converged: model.diagnostics.converged,
            variance_floored: model.diagnostics.variance_floored,
        },
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &json)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelFit> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let json: ModelJson = serde_json::from_reader(file)?;
    if json.format_version != FORMAT_VERSION {
        return Err(Error::Mismatch(format!(
            "unsupported model format_version {:?}",
            json.format_version
        )));
    }
    let r = json.rank;
    if json.components.len() != r || json.eta.len() != r {
        return Err(Error::Mismatch(
            "model components/eta do not match the declared rank".into(),
        ));
    }
    let mut components = Vec::with_capacity(r);
    for (k, c) in json.components.into_iter().enumerate() {
        if c.xi.len() != json.p {
            return Err(Error::Mismatch(format!(
                "component {k} has {} feature loadings, expected {}",
                c.xi.len(),
                json.p
            )));
        }
        if c.beta.len() != json.q {
            return Err(Error::Mismatch(format!(
                "component {k} has {} covariate effects, expected {}",
                c.beta.len(),
                json.q
            )));
        }
        if c.psi.knots.len() != c.psi.alpha.len() {
            return Err(Error::Mismatch(format!(
                "component {k} has mismatched psi knots/alpha lengths"
            )));
        }
        components.push(Component {
            beta: DVector::from_vec(c.beta),
            xi: DVector::from_vec(c.xi),
            psi: c.psi,
            sigma2_k: c.sigma2_k,
        });
    }
    let n = json.posterior.subject_ids.len();
    if json.posterior.u_tilde.len() != n || json.posterior.gamma.len() != n {
        return Err(Error::Mismatch("posterior arrays have inconsistent lengths".into()));
    }
    let mut u_tilde = Vec::with_capacity(n);
    let mut gamma = Vec::with_capacity(n);
    for i in 0..n {
        if json.posterior.u_tilde[i].len() != r || json.posterior.gamma[i].len() != r * r {
            return Err(Error::Mismatch(format!(
                "posterior entry {i} does not match rank {r}"
            )));
        }
        u_tilde.push(DVector::from_column_slice(&json.posterior.u_tilde[i]));
        gamma.push(DMatrix::from_row_slice(r, r, &json.posterior.gamma[i]));
    }
    Ok(ModelFit {
        rank: r,
        components,
        sigma2: json.sigma2,
        posterior: Posterior { u_tilde, gamma },
        subject_ids: json.posterior.subject_ids,
        eta: json.eta,
        diagnostics: Diagnostics {
            objective_trace: json.diagnostics.objective_trace,
            delta_trace: json.diagnostics.delta_trace,
            eta_trace: json.diagnostics.eta_trace,
            iterations: json.diagnostics.iterations,
            converged: json.diagnostics.converged,
            variance_floored: json.diagnostics.variance_floored,
        },
        p: json.p,
        q: json.q,
        feature_names: json.feature_names,
        covariate_names: json.covariate_names,
        time_origin: json.time_origin,
        time_scale: json.time_scale,
    })
}

// ---------------------------------------------------------------------------
// Truth JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthJson {
    format_version: String,
    rank: usize,
    p: usize,
    q: usize,
    sigma2: f64,
    gamma: Vec<Vec<f64>>,
    lambda: Vec<f64>,
    tau: Vec<f64>,
    xi: Vec<Vec<f64>>,
    psi_basis_coef: Vec<Vec<f64>>,
    subject_ids: Vec<String>,
    x: Vec<Vec<f64>>,
    zeta: Vec<Vec<f64>>,
}

pub fn write_truth(path: &Path, truth: &SimulationTruth) -> Result<()> {
    let n = truth.zeta.nrows();
    let json = TruthJson {
        format_version: FORMAT_VERSION.to_string(),
        rank: truth.rank,
        p: truth.xi[0].len(),
        q: truth.gamma.first().map(|g| g.len()).unwrap_or(0),
        sigma2: truth.sigma2,
        gamma: truth.gamma.iter().map(|g| g.iter().copied().collect()).collect(),
        lambda: truth.lambda.clone(),
        tau: truth.tau.clone(),
        xi: truth.xi.iter().map(|v| v.iter().copied().collect()).collect(),
        psi_basis_coef: truth.psi_basis_coef.clone(),
        subject_ids: truth.subject_ids.clone(),
        x: truth.x.iter().map(|v| v.iter().copied().collect()).collect(),
        zeta: (0..n)
            .map(|i| (0..truth.rank).map(|k| truth.zeta[(i, k)]).collect())
            .collect(),
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &json)?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<SimulationTruth> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let json: TruthJson = serde_json::from_reader(file)?;
    if json.format_version != FORMAT_VERSION {
        return Err(Error::Mismatch(format!(
            "unsupported truth format_version {:?}",
            json.format_version
        )));
    }
    let r = json.rank;
    let n = json.subject_ids.len();
    if json.gamma.len() != r
        || json.lambda.len() != r
        || json.tau.len() != r
        || json.xi.len() != r
        || json.psi_basis_coef.len() != r
        || json.x.len() != n
        || json.zeta.len() != n
    {
        return Err(Error::Mismatch("truth arrays do not match rank/subject counts".into()));
    }
    let mut zeta = DMatrix::zeros(n, r);
    for i in 0..n {
        if json.zeta[i].len() != r {
            return Err(Error::Mismatch(format!("zeta row {i} does not match rank {r}")));
        }
        for k in 0..r {
            zeta[(i, k)] = json.zeta[i][k];
        }
    }
    Ok(SimulationTruth {
        rank: r,
        sigma2: json.sigma2,
        gamma: json.gamma.into_iter().map(DVector::from_vec).collect(),
        lambda: json.lambda,
        tau: json.tau,
        xi: json.xi.into_iter().map(DVector::from_vec).collect(),
        psi_basis_coef: json.psi_basis_coef,
        subject_ids: json.subject_ids,
        x: json.x.into_iter().map(DVector::from_vec).collect(),
        zeta,
    })
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportJson {
    format_version: String,
    r2_tensor: Option<f64>,
    r2_loading: Vec<f64>,
    mspe: Option<f64>,
    beta_mse: Vec<f64>,
    xi_error: Vec<f64>,
    psi_error: Vec<f64>,
    sign_alignment: Vec<f64>,
    matching_failure: bool,
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let json = ReportJson {
        format_version: FORMAT_VERSION.to_string(),
        r2_tensor: report.r2_tensor,
        r2_loading: report.r2_loading.clone(),
        mspe: report.mspe,
        beta_mse: report.beta_mse.clone(),
        xi_error: report.xi_error.clone(),
        psi_error: report.psi_error.clone(),
        sign_alignment: report.sign_alignment.clone(),
        matching_failure: report.matching_failure,
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &json)?;
    Ok(())
}

/// One flat CSV row per report for aggregation across replicates.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let r = report
        .r2_loading
        .len()
        .max(report.beta_mse.len())
        .max(report.xi_error.len());
    write!(out, "r2_tensor,mspe,matching_failure")?;
    for k in 1..=r {
        write!(
            out,
            ",r2_loading_{k},beta_mse_{k},xi_error_{k},psi_error_{k},sign_{k}"
        )?;
    }
    writeln!(out)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let at = |v: &Vec<f64>, k: usize| v.get(k).map(|x| x.to_string()).unwrap_or_default();
    write!(
        out,
        "{},{},{}",
        opt(report.r2_tensor),
        opt(report.mspe),
        report.matching_failure
    )?;
    for k in 0..r {
        write!(
            out,
            ",{},{},{},{},{}",
            at(&report.r2_loading, k),
            at(&report.beta_mse, k),
            at(&report.xi_error, k),
            at(&report.psi_error, k),
            at(&report.sign_alignment, k)
        )?;
    }
    writeln!(out)?;
    Ok(())
}

/// Re-expresses a dataset's raw times in a model's stored time map, clamping
/// to [0, 1]; returns the number of clamped observations for warning output.
pub fn align_times_to_model(dataset: &mut Dataset, model: &ModelFit) -> usize {
    let (origin, scale) = (dataset.time_origin, dataset.time_scale);
    let mut clamped = 0;
    for s in &mut dataset.subjects {
        for t in &mut s.times {
            let raw = origin + scale * *t;
            let rescaled = (raw - model.time_origin) / model.time_scale;
            if !(0.0..=1.0).contains(&rescaled) {
                clamped += 1;
            }
            *t = rescaled.clamp(0.0, 1.0);
        }
    }
    dataset.time_origin = model.time_origin;
    dataset.time_scale = model.time_scale;
    clamped
}
