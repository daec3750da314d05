//! Reproducing kernel for the time mode: rescaled Bernoulli polynomials on [0, 1].
//!
//! The kernel is K(t, t') = 1 + K1(t)K1(t') + K2(t)K2(t') - K4(|t - t'|) with
//! K1(t) = t - 1/2, K2(t) = {K1(t)^2 - 1/12}/2 and
//! K4(t) = {K1(t)^4 - K1(t)^2/2 + 7/240}/24. Functions in the induced space have
//! square-integrable second derivatives, the smoothness class the singular-function
//! penalty controls. All L2 integrals on [0, 1] use composite Simpson quadrature
//! with [`QUAD_NODES`] equally spaced nodes; the expansions are piecewise
//! polynomials of degree at most four, so the rule is accurate far beyond the
//! 1e-6 normalization tolerance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of Simpson quadrature nodes used for all L2 integrals on [0, 1].
pub const QUAD_NODES: usize = 1001;

/// A point in rescaled study time, guaranteed to lie in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && (0.0..=1.0).contains(&t) {
            Ok(TimePoint(t))
        } else {
            Err(Error::Domain(format!("time point {t} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn k1(t: f64) -> f64 {
    t - 0.5
}

fn k2(t: f64) -> f64 {
    0.5 * (k1(t) * k1(t) - 1.0 / 12.0)
}

fn k4(t: f64) -> f64 {
    let a = k1(t);
    let a2 = a * a;
    (a2 * a2 - 0.5 * a2 + 7.0 / 240.0) / 24.0
}

/// Kernel value K(s, t). Symmetric in its arguments; the products commute
/// exactly in IEEE arithmetic, so the symmetry is bit-exact.
pub fn kernel_eval(s: TimePoint, t: TimePoint) -> f64 {
    eval_unchecked(s.0, t.0)
}

pub(crate) fn eval_unchecked(s: f64, t: f64) -> f64 {
    1.0 + k1(s) * k1(t) + k2(s) * k2(t) - k4((s - t).abs())
}

/// Gram matrix of the kernel on a time grid.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub grid: Vec<TimePoint>,
    pub values: DMatrix<f64>,
}

/// Pairwise kernel values on `grid`. Duplicate grid points are permitted; the
/// resulting matrix is then singular, which downstream ridge solves tolerate.
pub fn gram_matrix(grid: &[TimePoint]) -> Result<KernelMatrix> {
    if grid.is_empty() {
        return Err(Error::Domain("empty time grid".into()));
    }
    let raw: Vec<f64> = grid.iter().map(|t| t.value()).collect();
    Ok(KernelMatrix {
        grid: grid.to_vec(),
        values: gram_unchecked(&raw),
    })
}

pub(crate) fn gram_unchecked(times: &[f64]) -> DMatrix<f64> {
    let l = times.len();
    let mut values = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in i..l {
            let v = eval_unchecked(times[i], times[j]);
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    values
}

/// A function in the kernel's span: t -> scale * sum_l alpha[l] K(t, knots[l]).
///
/// `scale` is 1.0 for raw expansions and 1/||.||_{L2} after [`l2_normalize`],
/// so normalized functions integrate to squared norm one on [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelFunction {
    pub knots: Vec<f64>,
    pub alpha: Vec<f64>,
    pub scale: f64,
}

impl KernelFunction {
    /// Unnormalized expansion with `scale = 1`. Knots must lie in [0, 1].
    pub fn raw(knots: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        if knots.len() != alpha.len() {
            return Err(Error::Mismatch(format!(
                "kernel expansion has {} knots but {} coefficients",
                knots.len(),
                alpha.len()
            )));
        }
        for &t in &knots {
            TimePoint::new(t)?;
        }
        Ok(Self {
            knots,
            alpha,
            scale: 1.0,
        })
    }

    pub(crate) fn eval(&self, t: f64) -> f64 {
        let s: f64 = self
            .knots
            .iter()
            .zip(&self.alpha)
            .map(|(&k, &a)| a * eval_unchecked(t, k))
            .sum();
        self.scale * s
    }

    pub(crate) fn eval_grid(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&t| self.eval(t)).collect()
    }

    /// Squared RKHS norm scale^2 * alpha' K alpha, with K the Gram matrix over the knots.
    pub fn rkhs_norm_sq(&self) -> f64 {
        let gram = gram_unchecked(&self.knots);
        self.rkhs_norm_sq_with(&gram)
    }

    pub(crate) fn rkhs_norm_sq_with(&self, gram: &DMatrix<f64>) -> f64 {
        let l = self.alpha.len();
        let mut acc = 0.0;
        for i in 0..l {
            for j in 0..l {
                acc += self.alpha[i] * gram[(i, j)] * self.alpha[j];
            }
        }
        self.scale * self.scale * acc
    }
}

/// Evaluates `f` at `t`: scale * sum_l alpha[l] K(t, knots[l]).
pub fn expansion_eval(f: &KernelFunction, t: TimePoint) -> f64 {
    f.eval(t.value())
}

/// Builds a unit-L2-norm kernel expansion: scale = 1 / ||sum_l alpha[l] K(., t_l)||_{L2}.
///
/// Errors with [`Error::DegenerateFunction`] when the raw norm is below 1e-12.
pub fn l2_normalize(knots: Vec<f64>, alpha: Vec<f64>) -> Result<KernelFunction> {
    let mut f = KernelFunction::raw(knots, alpha)?;
    let norm = l2_norm(&f);
    if !(norm > 1e-12) {
        return Err(Error::DegenerateFunction(format!(
            "kernel expansion has L2 norm {norm:.3e}, below 1e-12"
        )));
    }
    f.scale = 1.0 / norm;
    Ok(f)
}

/// L2 norm of `f` on [0, 1] under the crate-wide Simpson rule.
pub(crate) fn l2_norm(f: &KernelFunction) -> f64 {
    let w = simpson_weights_01(QUAD_NODES);
    let h = 1.0 / (QUAD_NODES - 1) as f64;
    let mut acc = 0.0;
    for (u, wu) in w.iter().enumerate() {
        let v = f.eval(u as f64 * h);
        acc += wu * v * v;
    }
    acc.sqrt()
}

/// Composite Simpson weights on [0, 1] for an odd number of equally spaced nodes.
pub fn simpson_weights_01(nodes: usize) -> Vec<f64> {
    assert!(nodes >= 3 && nodes % 2 == 1, "Simpson rule needs an odd node count >= 3");
    let h = 1.0 / (nodes - 1) as f64;
    let mut w = vec![0.0; nodes];
    w[0] = h / 3.0;
    w[nodes - 1] = h / 3.0;
    for (u, wu) in w.iter_mut().enumerate().take(nodes - 1).skip(1) {
        *wu = if u % 2 == 1 { 4.0 * h / 3.0 } else { 2.0 * h / 3.0 };
    }
    w
}

/// Integrates values sampled on equally spaced nodes spanning [0, 1].
pub fn simpson_integral_01(values: &[f64]) -> f64 {
    let w = simpson_weights_01(values.len());
    values.iter().zip(&w).map(|(v, wu)| v * wu).sum()
}

/// Equally spaced nodes on [0, 1], endpoints included.
pub fn linspace_01(nodes: usize) -> Vec<f64> {
    assert!(nodes >= 2);
    let h = 1.0 / (nodes - 1) as f64;
    (0..nodes).map(|u| (u as f64 * h).min(1.0)).collect()
}
