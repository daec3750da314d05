//! Core dataset representation: per-subject trajectory matrices, time rescaling,
//! the modified centered log-ratio transform and low-abundance feature filtering.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One subject's observations: a p x m_i matrix whose column j holds the
/// p-dimensional sample taken at `times[j]`.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    /// Subject-level covariates (length q; empty in unsupervised mode).
    pub x: DVector<f64>,
    /// Strictly increasing observation times.
    pub times: Vec<f64>,
    pub y: DMatrix<f64>,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

/// A complete dataset with a shared feature space and the affine map taking
/// raw study time onto [0, 1] (`raw = time_origin + time_scale * t`).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub p: usize,
    pub q: usize,
    pub feature_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub time_origin: f64,
    pub time_scale: f64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Total observation count M = sum_i m_i.
    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    pub fn to_raw_time(&self, t: f64) -> f64 {
        self.time_origin + self.time_scale * t
    }

    pub fn to_rescaled_time(&self, raw: f64) -> f64 {
        (raw - self.time_origin) / self.time_scale
    }

    /// Validates the cross-subject shape invariants.
    pub fn validate(&self) -> Result<()> {
        for s in &self.subjects {
            if s.n_obs() == 0 {
                return Err(Error::Mismatch(format!("subject {} has no observations", s.id)));
            }
            if s.y.nrows() != self.p || s.y.ncols() != s.n_obs() {
                return Err(Error::Mismatch(format!(
                    "subject {} has a {}x{} matrix, expected {}x{}",
                    s.id,
                    s.y.nrows(),
                    s.y.ncols(),
                    self.p,
                    s.n_obs()
                )));
            }
            if s.x.len() != self.q {
                return Err(Error::Mismatch(format!(
                    "subject {} has {} covariates, expected {}",
                    s.id,
                    s.x.len(),
                    self.q
                )));
            }
            for w in s.times.windows(2) {
                if !(w[1] > w[0]) {
                    return Err(Error::Mismatch(format!(
                        "subject {} has non-increasing times {} then {}",
                        s.id, w[0], w[1]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Drops all covariates, producing the unsupervised (q = 0) view of the data.
    pub fn without_covariates(&self) -> Dataset {
        let mut ds = self.clone();
        ds.q = 0;
        ds.covariate_names.clear();
        for s in &mut ds.subjects {
            s.x = DVector::zeros(0);
        }
        ds
    }

    /// Appends a constant 1.0 covariate column.
    pub fn with_intercept(&self) -> Dataset {
        let mut ds = self.clone();
        ds.q += 1;
        ds.covariate_names.push("intercept".to_string());
        for s in &mut ds.subjects {
            let mut x = s.x.clone().insert_row(s.x.len(), 1.0);
            std::mem::swap(&mut s.x, &mut x);
        }
        ds
    }
}

/// Affinely maps all observation times onto [0, 1] with min -> 0 and max -> 1,
/// recording the inverse map in `time_origin`/`time_scale`. When every time is
/// identical the convention is to map to 0.5 with scale 1.
pub fn rescale_times(mut ds: Dataset) -> Dataset {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for s in &ds.subjects {
        for &t in &s.times {
            min = min.min(t);
            max = max.max(t);
        }
    }
    if !min.is_finite() || !max.is_finite() {
        return ds;
    }
    if max > min {
        let scale = max - min;
        for s in &mut ds.subjects {
            for t in &mut s.times {
                *t = ((*t - min) / scale).clamp(0.0, 1.0);
            }
        }
        ds.time_origin = min;
        ds.time_scale = scale;
    } else {
        for s in &mut ds.subjects {
            for t in &mut s.times {
                *t = 0.5;
            }
        }
        ds.time_origin = min - 0.5;
        ds.time_scale = 1.0;
    }
    ds
}

/// A dataset-shaped table of nonnegative integer counts (times still raw).
#[derive(Debug, Clone)]
pub struct CountTable {
    pub subjects: Vec<CountSubject>,
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CountSubject {
    pub id: String,
    pub times: Vec<f64>,
    /// p x m_i counts, same layout as [`Subject::y`].
    pub counts: DMatrix<u64>,
}

impl CountTable {
    pub fn p(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_samples(&self) -> usize {
        self.subjects.iter().map(|s| s.times.len()).sum()
    }
}

/// Feature retention rules for count tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterRule {
    /// Keep features observed (count > 0) in at least `fraction` of the samples.
    MinPrevalence { fraction: f64 },
    /// Keep features whose within-sample relative abundance reaches `threshold`
    /// in at least `min_samples` samples.
    MinRelAbundance { threshold: f64, min_samples: usize },
}

/// Applies `rule`, preserving feature order. Errors when nothing survives.
pub fn filter_features(table: &CountTable, rule: FilterRule) -> Result<CountTable> {
    match rule {
        FilterRule::MinPrevalence { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Config(format!(
                    "prevalence fraction {fraction} outside [0, 1]"
                )));
            }
        }
        FilterRule::MinRelAbundance { threshold, .. } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::Config(format!(
                    "relative-abundance threshold {threshold} outside [0, 1]"
                )));
            }
        }
    }
    let p = table.p();
    let total_samples = table.n_samples();
    let mut hits = vec![0usize; p];
    for s in &table.subjects {
        for j in 0..s.times.len() {
            let col = s.counts.column(j);
            let depth: u64 = col.iter().sum();
            for b in 0..p {
                let keep = match rule {
                    FilterRule::MinPrevalence { .. } => col[b] > 0,
                    FilterRule::MinRelAbundance { threshold, .. } => {
                        depth > 0 && (col[b] as f64 / depth as f64) >= threshold
                    }
                };
                if keep {
                    hits[b] += 1;
                }
            }
        }
    }
    let kept: Vec<usize> = (0..p)
        .filter(|&b| match rule {
            FilterRule::MinPrevalence { fraction } => {
                hits[b] as f64 >= fraction * total_samples as f64
            }
            FilterRule::MinRelAbundance { min_samples, .. } => hits[b] >= min_samples,
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyFilterResult);
    }
    let feature_names = kept.iter().map(|&b| table.feature_names[b].clone()).collect();
    let subjects = table
        .subjects
        .iter()
        .map(|s| CountSubject {
            id: s.id.clone(),
            times: s.times.clone(),
            counts: DMatrix::from_fn(kept.len(), s.times.len(), |r, c| s.counts[(kept[r], c)]),
        })
        .collect();
    Ok(CountTable {
        subjects,
        feature_names,
    })
}

/// Modified centered log-ratio transform: each sample column becomes
/// log(y + 0.5) minus its mean over features, so per-sample sums are zero.
/// Times are rescaled onto [0, 1] in the returned dataset.
pub fn clr_transform(table: &CountTable) -> Result<Dataset> {
    let p = table.p();
    if p < 2 {
        return Err(Error::Mismatch(format!(
            "CLR transform needs at least 2 features, found {p}"
        )));
    }
    let subjects = table
        .subjects
        .iter()
        .map(|s| {
            let m = s.times.len();
            let mut y = DMatrix::zeros(p, m);
            for j in 0..m {
                let logs: Vec<f64> = (0..p).map(|b| (s.counts[(b, j)] as f64 + 0.5).ln()).collect();
                let mean = logs.iter().sum::<f64>() / p as f64;
                for b in 0..p {
                    y[(b, j)] = logs[b] - mean;
                }
            }
            Subject {
                id: s.id.clone(),
                x: DVector::zeros(0),
                times: s.times.clone(),
                y,
            }
        })
        .collect();
    let ds = Dataset {
        subjects,
        p,
        q: 0,
        feature_names: table.feature_names.clone(),
        covariate_names: Vec::new(),
        time_origin: 0.0,
        time_scale: 1.0,
    };
    Ok(rescale_times(ds))
}
