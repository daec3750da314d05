//! Applying a fitted model to subjects: posterior projection from observed
//! trajectories, covariate-only prediction and reconstruction on time grids.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, Subject};
use crate::em::{e_step, ModelFit};
use crate::error::{Error, Result};
use crate::kernel::linspace_01;
use crate::parallel::map_indexed;

/// Default evaluation grid: 101 equally spaced points on [0, 1].
pub const DEFAULT_GRID_POINTS: usize = 101;

/// A p x |grid| reconstruction evaluated on rescaled times in [0, 1].
#[derive(Debug, Clone)]
pub struct TrajectoryGrid {
    pub times: Vec<f64>,
    pub values: DMatrix<f64>,
}

/// Posterior scores of one projected subject.
#[derive(Debug, Clone)]
pub struct NewSubjectScores {
    /// zeta_k = x' beta_k + U_k, the loading entering reconstructions.
    pub zeta_hat: DVector<f64>,
    pub u_hat: DVector<f64>,
    pub gamma_n: DMatrix<f64>,
}

/// Posterior scores for a new subject under the fitted parameters; the same
/// conditioning formula as the training E-step with theta frozen.
pub fn project_subject(model: &ModelFit, subject: &Subject) -> Result<NewSubjectScores> {
    if subject.x.len() != model.q {
        return Err(Error::Mismatch(format!(
            "subject {} has {} covariates, model expects {}",
            subject.id,
            subject.x.len(),
            model.q
        )));
    }
    if subject.y.nrows() != model.p {
        return Err(Error::Mismatch(format!(
            "subject {} has {} features, model expects {}",
            subject.id,
            subject.y.nrows(),
            model.p
        )));
    }
    if subject.n_obs() == 0 {
        return Err(Error::InsufficientData(format!(
            "subject {} has no observations to project",
            subject.id
        )));
    }
    let (u_hat, gamma_n) = e_step(subject, &model.components, model.sigma2)?;
    let zeta_hat = DVector::from_iterator(
        model.rank,
        model
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| c.beta.dot(&subject.x) + u_hat[k]),
    );
    Ok(NewSubjectScores {
        zeta_hat,
        u_hat,
        gamma_n,
    })
}

/// Rank-r reconstruction sum_k zeta_k xi_bk psi_k(t) on the given grid.
pub fn predict_trajectory(
    model: &ModelFit,
    scores: &NewSubjectScores,
    grid: &[f64],
) -> Result<TrajectoryGrid> {
    for &t in grid {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("grid point {t} outside [0, 1]")));
        }
    }
    let mut values = DMatrix::zeros(model.p, grid.len());
    for (k, comp) in model.components.iter().enumerate() {
        let psi_vals = comp.psi.eval_grid(grid);
        for (j, &pv) in psi_vals.iter().enumerate() {
            values.column_mut(j).axpy(scores.zeta_hat[k] * pv, &comp.xi, 1.0);
        }
    }
    Ok(TrajectoryGrid {
        times: grid.to_vec(),
        values,
    })
}

/// Covariate-only prediction: the mean trajectory with U set to zero.
/// Unsupported for unsupervised (q = 0) models.
pub fn predict_from_covariates(
    model: &ModelFit,
    x: &DVector<f64>,
    grid: &[f64],
) -> Result<TrajectoryGrid> {
    if model.q == 0 {
        return Err(Error::Mismatch(
            "covariate-only prediction is unsupported for a model fitted without covariates".into(),
        ));
    }
    if x.len() != model.q {
        return Err(Error::Mismatch(format!(
            "covariate vector has length {}, model expects {}",
            x.len(),
            model.q
        )));
    }
    let zeta_hat = DVector::from_iterator(
        model.rank,
        model.components.iter().map(|c| c.beta.dot(x)),
    );
    let scores = NewSubjectScores {
        u_hat: DVector::zeros(model.rank),
        gamma_n: DMatrix::zeros(model.rank, model.rank),
        zeta_hat,
    };
    predict_trajectory(model, &scores, grid)
}

/// Per-subject rank-1 reconstructions at the observed times plus their sum.
#[derive(Debug, Clone)]
pub struct SubjectReconstruction {
    pub per_component: Vec<DMatrix<f64>>,
    pub total: DMatrix<f64>,
}

/// Reconstructs every subject of `dataset` at its observed times. Stored
/// training posteriors are reused when the dataset's subjects match the
/// model's training subjects; otherwise each subject is projected afresh.
pub fn reconstruct_insample(
    model: &ModelFit,
    dataset: &Dataset,
) -> Result<Vec<SubjectReconstruction>> {
    if dataset.p != model.p {
        return Err(Error::Mismatch(format!(
            "dataset has {} features, model expects {}",
            dataset.p, model.p
        )));
    }
    let is_training = dataset.n() == model.subject_ids.len()
        && dataset
            .subjects
            .iter()
            .zip(&model.subject_ids)
            .all(|(s, id)| &s.id == id);
    let recons: Result<Vec<SubjectReconstruction>> = map_indexed(&dataset.subjects, |i, s| {
        let zeta = if is_training {
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
        let mut per_component = Vec::with_capacity(model.rank);
        let mut total = DMatrix::zeros(model.p, s.n_obs());
        for (k, comp) in model.components.iter().enumerate() {
            let psi_vals = comp.psi.eval_grid(&s.times);
            let mut recon = DMatrix::zeros(model.p, s.n_obs());
            for (j, &pv) in psi_vals.iter().enumerate() {
                recon.column_mut(j).axpy(zeta[k] * pv, &comp.xi, 1.0);
            }
            total += &recon;
            per_component.push(recon);
        }
        Ok(SubjectReconstruction {
            per_component,
            total,
        })
    })
    .into_iter()
    .collect();
    recons
}

/// The default dense evaluation grid.
pub fn default_grid() -> Vec<f64> {
    linspace_01(DEFAULT_GRID_POINTS)
}
