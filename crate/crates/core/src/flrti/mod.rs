//! Interpretable functional linear regression of a scalar response on a
//! curve, `Y = β0 + ∫ X(t) β(t) dt + ε`, with `β` driven towards regions
//! that are exactly zero or exactly linear.
//!
//! The curve axis is mapped to `s ∈ [0, 1]` and the integral discretized with
//! trapeze weights. Penalized coefficients `η` live on the standardized
//! problem (centered curves, standardized response); the penalty is
//!
//! ```text
//! σ · ( ω Σ_j w_j |η_j|  +  (1 − ω) (h₀² / h) Σ_j |η_{j-1} − 2η_j + η_{j+1}| )
//! ```
//!
//! with `h` the grid spacing and `h₀ = 1/99`, so both terms approximate
//! grid-independent integrals and carry comparable weight at 100 points.

mod admm;
mod ipm;
mod simplex;

use crate::cart::fold_assignment;
use admm::{AdmmSettings, AdmmState, Penalty, Quadratic};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use simplex::LpError;

pub const DEFAULT_GRID_POINTS: usize = 100;
pub const DEFAULT_SIGMAS: [f64; 5] = [0.005, 0.01, 0.05, 0.1, 0.5];
pub const DEFAULT_OMEGAS: [f64; 7] = [0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0];
pub const DEFAULT_FOLDS: usize = 10;

const REFERENCE_SPACING: f64 = 1.0 / 99.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlrtiError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("grid needs at least 4 points, got {0}")]
    GridTooShort(usize),
    #[error("grid must be strictly increasing and evenly spaced")]
    GridNotUniform,
    #[error("curve {index} has {got} values, grid has {expected}")]
    GridMismatch { index: usize, expected: usize, got: usize },
    #[error("non-finite value in sample {0}")]
    NonFinite(usize),
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("omega must lie in [0, 1], got {0}")]
    Omega(f64),
    #[error("degenerate design: all curves are identical")]
    Degenerate,
    #[error("solver did not converge after {iterations} iterations (primal residual {primal:.3e}, dual residual {dual:.3e})")]
    NotConverged { iterations: usize, primal: f64, dual: f64 },
    #[error("Dantzig program failed: {0}")]
    Lp(#[from] LpError),
    #[error("{folds}-fold cross-validation needs at least {folds} samples, got {n}")]
    Folds { folds: usize, n: usize },
    #[error("empty tuning grid")]
    EmptyTuningGrid,
    #[error("permutation check needs n_perm ≥ 100, got {0}")]
    Permutations(usize),
}

/// One curve `X_i` on the shared grid with its scalar response `Y_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub x: Vec<f64>,
    pub y: f64,
}

/// Samples on a common, evenly spaced grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalData {
    grid: Vec<f64>,
    samples: Vec<FunctionalSample>,
}

impl FunctionalData {
    pub fn new(grid: Vec<f64>, samples: Vec<FunctionalSample>) -> Result<Self, FlrtiError> {
        check_grid(&grid)?;
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != grid.len() {
                return Err(FlrtiError::GridMismatch {
                    index: i,
                    expected: grid.len(),
                    got: s.x.len(),
                });
            }
            if !s.y.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
                return Err(FlrtiError::NonFinite(i));
            }
        }
        Ok(FunctionalData { grid, samples })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn samples(&self) -> &[FunctionalSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> FunctionalData {
        FunctionalData {
            grid: self.grid.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    fn with_responses(&self, y: &[f64]) -> FunctionalData {
        FunctionalData {
            grid: self.grid.clone(),
            samples: self
                .samples
                .iter()
                .zip(y)
                .map(|(s, &y)| FunctionalSample { x: s.x.clone(), y })
                .collect(),
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<(), FlrtiError> {
    if grid.len() < 4 {
        return Err(FlrtiError::GridTooShort(grid.len()));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(FlrtiError::GridNotUniform);
    }
    let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    if h <= 0.0 {
        return Err(FlrtiError::GridNotUniform);
    }
    for (j, t) in grid.iter().enumerate() {
        if (t - (grid[0] + h * j as f64)).abs() > 1e-6 * h {
            return Err(FlrtiError::GridNotUniform);
        }
    }
    Ok(())
}

/// `p` evenly spaced points from `a` to `b`.
pub fn uniform_grid(a: f64, b: f64, p: usize) -> Vec<f64> {
    (0..p)
        .map(|j| if j + 1 == p { b } else { a + (b - a) * j as f64 / (p - 1) as f64 })
        .collect()
}

/// Linear interpolation of `(at, values)` onto `onto`; `None` if any target
/// lies outside `[at[0], at[last]]`.
pub fn resample(at: &[f64], values: &[f64], onto: &[f64]) -> Option<Vec<f64>> {
    if at.is_empty() || at.len() != values.len() {
        return None;
    }
    let last = at.len() - 1;
    onto.iter()
        .map(|&t| {
            if t < at[0] - 1e-9 || t > at[last] + 1e-9 {
                return None;
            }
            let k = at.partition_point(|&a| a <= t);
            if k == 0 {
                return Some(values[0]);
            }
            if k > last {
                return Some(values[last]);
            }
            let (t0, t1) = (at[k - 1], at[k]);
            let f = (t - t0) / (t1 - t0);
            Some(values[k - 1] + f * (values[k] - values[k - 1]))
        })
        .collect()
}

/// Trapeze weights on `[0, 1]` for `p` points.
fn unit_weights(p: usize) -> Vec<f64> {
    let h = 1.0 / (p - 1) as f64;
    let mut w = vec![h; p];
    w[0] = h / 2.0;
    w[p - 1] = h / 2.0;
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    #[default]
    Lasso,
    Dantzig,
}

impl std::str::FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lasso" => Ok(Selector::Lasso),
            "dantzig" => Ok(Selector::Dantzig),
            other => Err(format!("unknown selector '{other}' (expected lasso or dantzig)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlrtiModel {
    pub grid: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta0: f64,
    pub sigma: f64,
    pub omega: f64,
    #[serde(default)]
    pub selector: Selector,
    pub cv_error: Option<f64>,
    pub seed: Option<u64>,
}

impl FlrtiModel {
    /// Fraction of grid points where `β` is exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        self.beta.iter().filter(|b| **b == 0.0).count() as f64 / self.beta.len() as f64
    }

    /// `∫ β(t) dt` over the grid.
    pub fn integrated_beta(&self) -> f64 {
        trapeze(&self.grid, &self.beta)
    }
}

fn trapeze(grid: &[f64], v: &[f64]) -> f64 {
    grid.windows(2)
        .zip(v.windows(2))
        .map(|(t, f)| (t[1] - t[0]) * (f[0] + f[1]) / 2.0)
        .sum()
}

/// `β0 + ∫ x(t) β(t) dt` with the trapeze rule on the model grid.
pub fn predict(model: &FlrtiModel, x: &[f64]) -> Result<f64, FlrtiError> {
    if x.len() != model.grid.len() {
        return Err(FlrtiError::GridMismatch {
            index: 0,
            expected: model.grid.len(),
            got: x.len(),
        });
    }
    let prod: Vec<f64> = x.iter().zip(&model.beta).map(|(a, b)| a * b).collect();
    Ok(model.beta0 + trapeze(&model.grid, &prod))
}

/// Standardized problem for one training set and one `ω`.
struct Prepared {
    quad: Quadratic,
    pen: Penalty,
    ptp: DMatrix<f64>,
    y_mean: f64,
    y_sd: f64,
    x_mean: Vec<f64>,
    x_scale: f64,
    weights: Vec<f64>,
    length: f64,
}

enum Prep {
    Constant(f64),
    Problem(Box<Prepared>),
}

fn prepare(data: &FunctionalData, omega: f64) -> Result<Prep, FlrtiError> {
    let n = data.len();
    let p = data.grid.len();
    let nf = n as f64;
    let y_mean = data.samples.iter().map(|s| s.y).sum::<f64>() / nf;
    let y_sd = (data.samples.iter().map(|s| (s.y - y_mean).powi(2)).sum::<f64>() / nf).sqrt();
    let mut x_mean = vec![0.0; p];
    for s in &data.samples {
        for (m, v) in x_mean.iter_mut().zip(&s.x) {
            *m += v / nf;
        }
    }
    let ss: f64 = data
        .samples
        .iter()
        .flat_map(|s| s.x.iter().zip(&x_mean).map(|(v, m)| (v - m).powi(2)))
        .sum();
    let x_scale = (ss / (nf * p as f64)).sqrt();
    let x_mag = x_mean.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !(x_scale > 1e-12 * x_mag.max(1e-300)) {
        return Err(FlrtiError::Degenerate);
    }
    if !(y_sd > 1e-14 * y_mean.abs().max(1e-300)) {
        return Ok(Prep::Constant(y_mean));
    }
    let weights = unit_weights(p);
    let z = DMatrix::from_fn(n, p, |i, j| (data.samples[i].x[j] - x_mean[j]) * weights[j] / x_scale);
    let yt = DVector::from_fn(n, |i, _| (data.samples[i].y - y_mean) / y_sd);
    let zt = z.transpose();
    let m = &zt * &z / nf;
    let g = &zt * &yt / nf;
    let h = 1.0 / (p - 1) as f64;
    let pen = Penalty {
        p,
        zero_w: if omega > 0.0 { weights.iter().map(|w| omega * w).collect() } else { Vec::new() },
        curv_w: if omega < 1.0 { (1.0 - omega) * REFERENCE_SPACING * REFERENCE_SPACING / h } else { 0.0 },
    };
    let dense = pen.dense();
    let ptp = dense.transpose() * dense;
    Ok(Prep::Problem(Box::new(Prepared {
        quad: Quadratic { m, g, c: 0.5 * yt.dot(&yt) / nf },
        pen,
        ptp,
        y_mean,
        y_sd,
        x_mean,
        x_scale,
        weights,
        length: data.grid[p - 1] - data.grid[0],
    })))
}

impl Prepared {
    fn model(&self, data: &FunctionalData, eta: &[f64], sigma: f64, omega: f64, selector: Selector) -> FlrtiModel {
        let beta: Vec<f64> = eta.iter().map(|e| self.y_sd * e / (self.length * self.x_scale)).collect();
        let offset: f64 = (0..beta.len())
            .map(|j| self.length * self.weights[j] * self.x_mean[j] * beta[j])
            .sum();
        FlrtiModel {
            grid: data.grid.clone(),
            beta,
            beta0: self.y_mean - offset,
            sigma,
            omega,
            selector,
            cv_error: None,
            seed: None,
        }
    }
}

fn check_params(data: &FunctionalData, sigma: f64, omega: f64) -> Result<(), FlrtiError> {
    if data.len() < 3 {
        return Err(FlrtiError::TooFewSamples { need: 3, got: data.len() });
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FlrtiError::Sigma(sigma));
    }
    if !(0.0..=1.0).contains(&omega) {
        return Err(FlrtiError::Omega(omega));
    }
    Ok(())
}

/// Fit the model at a fixed penalty `sigma` and zero-weight `omega`.
pub fn fit(data: &FunctionalData, sigma: f64, omega: f64, selector: Selector) -> Result<FlrtiModel, FlrtiError> {
    check_params(data, sigma, omega)?;
    match prepare(data, omega)? {
        Prep::Constant(c) => Ok(constant_model(data, c, sigma, omega, selector)),
        Prep::Problem(prep) => {
            let eta = match selector {
                Selector::Lasso => lasso(&prep, sigma, None, true)?.0,
                Selector::Dantzig => dantzig(&prep, sigma)?,
            };
            Ok(prep.model(data, &eta, sigma, omega, selector))
        }
    }
}

fn constant_model(data: &FunctionalData, c: f64, sigma: f64, omega: f64, selector: Selector) -> FlrtiModel {
    FlrtiModel {
        grid: data.grid.clone(),
        beta: vec![0.0; data.grid.len()],
        beta0: c,
        sigma,
        omega,
        selector,
        cv_error: None,
        seed: None,
    }
}

/// Solve the penalized problem: ADMM, then an exact solve on the face it
/// identifies, accepted when it carries an optimality certificate. A stalled
/// ADMM run is handed to the interior-point solver, whose point is only
/// snapped onto a face when `exact` zeros are wanted.
fn lasso(
    prep: &Prepared,
    sigma: f64,
    warm: Option<AdmmState>,
    exact: bool,
) -> Result<(Vec<f64>, AdmmState), FlrtiError> {
    let (q, pen) = (&prep.quad, &prep.pen);
    let (state, report) = admm::admm(q, pen, &prep.ptp, sigma, warm, &AdmmSettings::default());
    if let Some(eta) = admm::refine(q, pen, sigma, &state.z, 1e-6) {
        return Ok((eta, state));
    }
    let polished = admm::polish(q, pen, sigma, &state.z);
    let mut options: Vec<Vec<f64>> = Vec::new();
    if report.converged {
        if let Some(eta) = polished {
            options.push(eta);
        }
        if !pen.zero_w.is_empty() {
            options.push((0..pen.p).map(|j| state.z[j] / pen.zero_w[j]).collect());
        }
        options.push(state.eta.clone());
    } else {
        log::debug!(
            "ADMM stalled after {} iterations (primal {:.2e}, dual {:.2e}); switching to the interior point",
            report.iterations,
            report.primal_residual,
            report.dual_residual
        );
        let eta = ipm::solve(q, pen, sigma, &ipm::IpmSettings::default()).map_err(|_| FlrtiError::NotConverged {
            iterations: report.iterations,
            primal: report.primal_residual,
            dual: report.dual_residual,
        })?;
        if !exact {
            return Ok((eta, state));
        }
        // interior points never sit exactly on the face; snap tiny rows
        let mut pe = vec![0.0; pen.rows()];
        pen.apply(&eta, &mut pe);
        let top = pe.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for rel in [1e-9, 1e-7, 1e-5] {
            let z: Vec<f64> = pe.iter().map(|v| if v.abs() <= rel * top { 0.0 } else { *v }).collect();
            if let Some(e) = admm::refine(q, pen, sigma, &z, 1e-6) {
                return Ok((e, state));
            }
            if let Some(e) = admm::polish(q, pen, sigma, &z) {
                options.push(e);
            }
        }
        options.push(eta);
    }
    // no certificate: keep the best available point, preferring ones with
    // exact zeros when objectives are indistinguishable
    let objs: Vec<f64> = options.iter().map(|e| q.objective(e, sigma, pen)).collect();
    let best = objs.iter().cloned().fold(f64::INFINITY, f64::min);
    let pick = (0..options.len())
        .find(|&k| objs[k] <= best + 1e-6 * best.abs().max(1e-12))
        .unwrap_or(0);
    Ok((options.swap_remove(pick), state))
}

/// Dantzig form: minimize `‖Pη‖₁` subject to `|g − Mη|_j ≤ σ Σ_k |P_kj|`.
fn dantzig(prep: &Prepared, sigma: f64) -> Result<Vec<f64>, FlrtiError> {
    let p = prep.pen.p;
    let dense = prep.pen.dense();
    let m = dense.nrows();
    let bound: Vec<f64> = (0..p).map(|j| sigma * dense.column(j).iter().map(|v| v.abs()).sum::<f64>()).collect();
    // columns: a (p), b (p), u+ (m), u- (m), s+ (p), s- (p)
    let n = 4 * p + 2 * m;
    let mut a = Vec::with_capacity(m + 2 * p);
    let mut b = Vec::with_capacity(m + 2 * p);
    for k in 0..m {
        let mut row = vec![0.0; n];
        for j in 0..p {
            row[j] = dense[(k, j)];
            row[p + j] = -dense[(k, j)];
        }
        row[2 * p + k] = -1.0;
        row[2 * p + m + k] = 1.0;
        a.push(row);
        b.push(0.0);
    }
    let (mm, g) = (&prep.quad.m, &prep.quad.g);
    for j in 0..p {
        // Mη + s+ = g + bound
        let mut row = vec![0.0; n];
        for l in 0..p {
            row[l] = mm[(j, l)];
            row[p + l] = -mm[(j, l)];
        }
        row[2 * p + 2 * m + j] = 1.0;
        a.push(row);
        b.push(g[j] + bound[j]);
        // -Mη + s- = bound - g
        let mut row = vec![0.0; n];
        for l in 0..p {
            row[l] = -mm[(j, l)];
            row[p + l] = mm[(j, l)];
        }
        row[3 * p + 2 * m + j] = 1.0;
        a.push(row);
        b.push(bound[j] - g[j]);
    }
    let mut c = vec![0.0; n];
    for v in c.iter_mut().skip(2 * p).take(2 * m) {
        *v = 1.0;
    }
    let x = simplex::solve(&a, &b, &c, 50 * (m + 2 * p))?;
    Ok((0..p).map(|j| x[j] - x[p + j]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub sigma: f64,
    pub omega: f64,
    /// mean out-of-fold squared error
    pub cv_error: f64,
    /// standard error of the per-fold mean squared errors
    pub cv_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_sigma: f64,
    pub best_omega: f64,
    pub best_error: f64,
    pub cells: Vec<CvCell>,
    pub folds: usize,
    pub seed: u64,
    pub fold_of: Vec<usize>,
}

/// Out-of-fold predictions for every (σ, ω) cell, σ visited in decreasing
/// order per fold and ω so successive lasso solves start warm.
fn out_of_fold(
    data: &FunctionalData,
    sigmas: &[f64],
    omegas: &[f64],
    fold_of: &[usize],
    folds: usize,
    selector: Selector,
) -> Result<Vec<Vec<Vec<f64>>>, FlrtiError> {
    let n = data.len();
    let mut order: Vec<usize> = (0..sigmas.len()).collect();
    order.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]));
    // pred[omega][sigma][sample]
    let mut pred = vec![vec![vec![0.0; n]; sigmas.len()]; omegas.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let tr = data.subset(&train);
        for (oi, &omega) in omegas.iter().enumerate() {
            let prep = prepare(&tr, omega)?;
            let mut warm: Option<(AdmmState, f64)> = None;
            for &si in &order {
                let sigma = sigmas[si];
                let model = match &prep {
                    Prep::Constant(c) => constant_model(&tr, *c, sigma, omega, selector),
                    Prep::Problem(pr) => {
                        let eta = match selector {
                            Selector::Lasso => {
                                let start = warm.take().map(|(mut st, prev)| {
                                    let r = sigma / prev;
                                    st.y.iter_mut().for_each(|v| *v *= r);
                                    st
                                });
                                let (eta, st) = lasso(pr, sigma, start, false)?;
                                warm = Some((st, sigma));
                                eta
                            }
                            Selector::Dantzig => dantzig(pr, sigma)?,
                        };
                        pr.model(&tr, &eta, sigma, omega, selector)
                    }
                };
                for &i in &test {
                    pred[oi][si][i] = predict(&model, &data.samples[i].x)?;
                }
            }
        }
    }
    Ok(pred)
}

/// Grid search over `(σ, ω)` minimizing the mean out-of-fold squared error.
/// Ties keep the first cell in `omegas × sigmas` order.
pub fn cross_validate(
    data: &FunctionalData,
    sigmas: &[f64],
    omegas: &[f64],
    folds: usize,
    seed: u64,
    selector: Selector,
) -> Result<CvResult, FlrtiError> {
    if sigmas.is_empty() || omegas.is_empty() {
        return Err(FlrtiError::EmptyTuningGrid);
    }
    let n = data.len();
    if folds < 2 || n < folds {
        return Err(FlrtiError::Folds { folds, n });
    }
    for &s in sigmas {
        check_params(data, s, omegas[0])?;
    }
    for &o in omegas {
        check_params(data, sigmas[0], o)?;
    }
    let fold_of = fold_assignment(n, folds, seed);
    let pred = out_of_fold(data, sigmas, omegas, &fold_of, folds, selector)?;
    let mut cells = Vec::new();
    for (oi, &omega) in omegas.iter().enumerate() {
        for (si, &sigma) in sigmas.iter().enumerate() {
            let mut per_fold = vec![(0.0, 0usize); folds];
            let mut total = 0.0;
            for i in 0..n {
                let e = (pred[oi][si][i] - data.samples[i].y).powi(2);
                total += e;
                per_fold[fold_of[i]].0 += e;
                per_fold[fold_of[i]].1 += 1;
            }
            let means: Vec<f64> = per_fold.iter().map(|(s, c)| s / *c as f64).collect();
            let mu = means.iter().sum::<f64>() / folds as f64;
            let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (folds - 1) as f64;
            cells.push(CvCell {
                sigma,
                omega,
                cv_error: total / n as f64,
                cv_se: (var / folds as f64).sqrt(),
            });
        }
    }
    let mut best = 0;
    for (k, c) in cells.iter().enumerate() {
        if c.cv_error < cells[best].cv_error {
            best = k;
        }
    }
    Ok(CvResult {
        best_sigma: cells[best].sigma,
        best_omega: cells[best].omega,
        best_error: cells[best].cv_error,
        cells,
        folds,
        seed,
        fold_of,
    })
}

/// Cross-validate, then refit on all samples at the chosen `(σ, ω)`.
pub fn fit_cv(
    data: &FunctionalData,
    sigmas: &[f64],
    omegas: &[f64],
    folds: usize,
    seed: u64,
    selector: Selector,
) -> Result<(FlrtiModel, CvResult), FlrtiError> {
    let cv = cross_validate(data, sigmas, omegas, folds, seed, selector)?;
    let mut model = fit(data, cv.best_sigma, cv.best_omega, selector)?;
    model.cv_error = Some(cv.best_error);
    model.seed = Some(seed);
    Ok((model, cv))
}

fn cv_r2(data: &FunctionalData, model: &FlrtiModel, fold_of: &[usize], folds: usize) -> Result<f64, FlrtiError> {
    let pred = out_of_fold(data, &[model.sigma], &[model.omega], fold_of, folds, model.selector)?;
    let n = data.len() as f64;
    let mean = data.samples.iter().map(|s| s.y).sum::<f64>() / n;
    let sst: f64 = data.samples.iter().map(|s| (s.y - mean).powi(2)).sum();
    let sse: f64 = data.samples.iter().zip(&pred[0][0]).map(|(s, p)| (s.y - p).powi(2)).sum();
    Ok(if sst > 0.0 { 1.0 - sse / sst } else { 0.0 })
}

/// Permutation p-value of the cross-validated R² at the model's `(σ, ω)`:
/// `(1 + #{R²_perm ≥ R²_obs}) / (1 + n_perm)`. Responses are shuffled with a
/// ChaCha8 stream seeded by `seed`; folds stay fixed.
pub fn permutation_null_check(
    data: &FunctionalData,
    model: &FlrtiModel,
    n_perm: usize,
    folds: usize,
    seed: u64,
) -> Result<f64, FlrtiError> {
    if n_perm < 100 {
        return Err(FlrtiError::Permutations(n_perm));
    }
    let n = data.len();
    if folds < 2 || n < folds {
        return Err(FlrtiError::Folds { folds, n });
    }
    check_params(data, model.sigma, model.omega)?;
    let fold_of = fold_assignment(n, folds, seed);
    let observed = cv_r2(data, model, &fold_of, folds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<f64> = data.samples.iter().map(|s| s.y).collect();
    let mut hits = 0;
    for _ in 0..n_perm {
        y.shuffle(&mut rng);
        let perm = data.with_responses(&y);
        if cv_r2(&perm, model, &fold_of, folds)? >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + n_perm) as f64)
}
