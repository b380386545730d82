//! Logistic PCA for binary matrices.
//!
//! Each entry `x_ij` is modelled as Bernoulli with natural parameter
//! `θ_ij`. The saturated parameters (`±∞`) are truncated to `±m`, giving
//! `Θ̃`, and the fitted parameters are the projection
//!
//! ```text
//! Θ = 1μᵀ + (Θ̃ − 1μᵀ)·U·Uᵀ,   UᵀU = I_k
//! ```
//!
//! with `U` chosen to minimise the Bernoulli deviance `D(Θ | X)`. The
//! principal component scores of a row are `(θ̃_i − μ)ᵀU`.
//!
//! The solver is a majorization-minimization scheme. Because the second
//! derivative of the deviance in each `θ_ij` is at most 1/2, the deviance at
//! `Θ` is bounded above by `D(Θᵗ) + ¼‖Θ − Z‖² − ¼‖Θᵗ − Z‖²` with the working
//! matrix `Z = Θᵗ + 4(X − σ(Θᵗ))`. Minimising that bound over orthonormal
//! `U` is an eigenproblem: `U` spans the top-`k` eigenvectors of
//! `Θ̃cᵀZc + ZcᵀΘ̃c − Θ̃cᵀΘ̃c` (`c` = minus `1μᵀ`). Each step can only lower
//! the deviance.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{BinaryMatrix, Corpus, SongMeta};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::linalg::{log_sigmoid, orthonormality_error, sigmoid, softplus, top_eigenvectors};

pub const DEFAULT_M_GRID: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuMode {
    /// `μ = 0`.
    #[default]
    FixedZero,
    /// `μ_j = logit(column mean)` clipped to `±m`, held fixed while fitting.
    ColumnMainEffects,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpcaConfig {
    pub k: usize,
    pub m: f64,
    pub mu_mode: MuMode,
    pub max_iterations: usize,
    pub rel_tol: f64,
    /// Random orthonormal starts tried after the PCA start; the start with
    /// the lowest final deviance wins, earlier starts winning ties.
    #[serde(default)]
    pub restarts: usize,
    /// Master seed for the random starts and the fold shuffles of model
    /// selection. Equal seeds give bit-identical fits.
    pub seed: u64,
}

impl LpcaConfig {
    pub fn new(k: usize, m: f64) -> Self {
        Self {
            k,
            m,
            mu_mode: MuMode::FixedZero,
            max_iterations: 1000,
            rel_tol: 1e-6,
            restarts: 0,
            seed: 0,
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_mu_mode(mut self, mu_mode: MuMode) -> Self {
        self.mu_mode = mu_mode;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate_params(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::InvalidArgument(format!("m must be positive, got {}", self.m)));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rel_tol must be positive, got {}",
                self.rel_tol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpcaModel {
    /// d × k loadings with orthonormal columns.
    pub u: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub m: f64,
    pub mu_mode: MuMode,
    /// Deviance at the initial loadings followed by one entry per iteration.
    pub deviance_trace: Vec<f64>,
    pub converged: bool,
}

impl LpcaModel {
    pub fn k(&self) -> usize {
        self.u.ncols()
    }

    pub fn d(&self) -> usize {
        self.u.nrows()
    }

    pub fn final_deviance(&self) -> f64 {
        *self.deviance_trace.last().expect("trace is never empty")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.try_into()
    }
}

/// On-disk layout of a fitted model; `U` is stored row by row (d rows of k).
#[derive(Serialize, Deserialize)]
struct ModelFile {
    m: f64,
    mu_mode: MuMode,
    mu: Vec<f64>,
    #[serde(rename = "U")]
    u: Vec<Vec<f64>>,
    k: usize,
    deviance_trace: Vec<f64>,
    converged: bool,
}

impl From<&LpcaModel> for ModelFile {
    fn from(model: &LpcaModel) -> Self {
        Self {
            m: model.m,
            mu_mode: model.mu_mode,
            mu: model.mu.clone(),
            u: model
                .u
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            k: model.k(),
            deviance_trace: model.deviance_trace.clone(),
            converged: model.converged,
        }
    }
}

impl TryFrom<ModelFile> for LpcaModel {
    type Error = Error;
    fn try_from(f: ModelFile) -> Result<Self> {
        let d = f.u.len();
        if d != f.mu.len() {
            return Err(Error::Format(format!("U has {d} rows but mu has {}", f.mu.len())));
        }
        if f.u.iter().any(|r| r.len() != f.k) {
            return Err(Error::Format(format!("every row of U must have k={} entries", f.k)));
        }
        if f.deviance_trace.is_empty() {
            return Err(Error::Format("empty deviance trace".into()));
        }
        Ok(Self {
            u: DMatrix::from_fn(d, f.k, |i, j| f.u[i][j]),
            mu: f.mu,
            m: f.m,
            mu_mode: f.mu_mode,
            deviance_trace: f.deviance_trace,
            converged: f.converged,
        })
    }
}

/// Truncated saturated natural parameters: `+m` where `x = 1`, `−m` where `x = 0`.
pub fn saturated_params(x: &BinaryMatrix, m: f64) -> Result<DMatrix<f64>> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidArgument(format!("m must be positive, got {m}")));
    }
    Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        if x.get(i, j) == 1 {
            m
        } else {
            -m
        }
    }))
}

/// Contribution of one entry to the deviance: `−2 log σ(±θ)`.
#[inline]
pub fn deviance_term(theta: f64, x: u8) -> f64 {
    if x == 1 {
        -2.0 * log_sigmoid(theta)
    } else {
        -2.0 * log_sigmoid(-theta)
    }
}

/// `D(Θ | X) = −2 Σ [x log σ(θ) + (1 − x) log σ(−θ)]`, summed row by row.
pub fn bernoulli_deviance(theta: &DMatrix<f64>, x: &BinaryMatrix) -> Result<f64> {
    check_shape(theta, x)?;
    let mut total = 0.0;
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            total += deviance_term(theta[(i, j)], x.get(i, j));
        }
    }
    Ok(total)
}

fn check_shape(theta: &DMatrix<f64>, x: &BinaryMatrix) -> Result<()> {
    if theta.nrows() != x.nrows() || theta.ncols() != x.ncols() {
        return Err(Error::Shape(format!(
            "parameters are {}x{}, data is {}x{}",
            theta.nrows(),
            theta.ncols(),
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Main effects for `mode`: zeros, or `logit(column mean)` clipped to `±m`.
pub fn main_effects(x: &BinaryMatrix, m: f64, mode: MuMode) -> Vec<f64> {
    match mode {
        MuMode::FixedZero => vec![0.0; x.ncols()],
        MuMode::ColumnMainEffects => x
            .column_means()
            .into_iter()
            .map(|p| {
                let logit = if p <= 0.0 {
                    f64::NEG_INFINITY
                } else if p >= 1.0 {
                    f64::INFINITY
                } else {
                    (p / (1.0 - p)).ln()
                };
                logit.clamp(-m, m)
            })
            .collect(),
    }
}

fn subtract_mu(theta: &mut DMatrix<f64>, mu: &[f64]) {
    for (j, mut col) in theta.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mu[j]);
    }
}

fn add_mu(theta: &mut DMatrix<f64>, mu: &[f64]) {
    for (j, mut col) in theta.column_iter_mut().enumerate() {
        col.add_scalar_mut(mu[j]);
    }
}

/// `1μᵀ + centered·U·Uᵀ`.
fn project(centered: &DMatrix<f64>, u: &DMatrix<f64>, mu: &[f64]) -> DMatrix<f64> {
    let mut theta = (centered * u) * u.transpose();
    add_mu(&mut theta, mu);
    theta
}

/// Snapshot handed to a [`fit_observed`] callback after initialization
/// (`iteration == 0`) and after every solver step.
pub struct IterationState<'a> {
    /// 0 for the PCA start, `r` for the `r`-th random start.
    pub start: usize,
    pub iteration: usize,
    pub u: &'a DMatrix<f64>,
    pub deviance: f64,
}

pub fn fit(x: &BinaryMatrix, config: &LpcaConfig) -> Result<LpcaModel> {
    fit_observed(x, config, |_| {})
}

/// [`fit`] with a callback invoked at every iterate.
pub fn fit_observed<F>(x: &BinaryMatrix, config: &LpcaConfig, mut observe: F) -> Result<LpcaModel>
where
    F: FnMut(&IterationState<'_>),
{
    config.validate_params()?;
    let (n, d) = (x.nrows(), x.ncols());
    if n < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!(
            "logistic PCA needs at least 2 rows and 2 columns, got {n}x{d}"
        )));
    }
    let max_k = n.min(d);
    if config.k == 0 || config.k > max_k {
        return Err(Error::ComponentsOutOfRange {
            k: config.k,
            max: max_k,
        });
    }
    let k = config.k;
    let mu = main_effects(x, config.m, config.mu_mode);
    let mut centered = saturated_params(x, config.m)?;
    subtract_mu(&mut centered, &mu);
    let gram = centered.tr_mul(&centered);
    let problem = Problem {
        x,
        mu: &mu,
        centered: &centered,
        gram: &gram,
    };

    let mut best = problem.descend(initial_loadings(x, config.m, k)?, config, 0, &mut observe)?;
    let mut rng = exec::rng(exec::derive_seed(config.seed, 0x57A7));
    for start in 1..=config.restarts {
        let gaussian = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
        let candidate = problem.descend(gaussian.qr().q(), config, start, &mut observe)?;
        if candidate.1.last() < best.1.last() {
            best = candidate;
        }
    }
    let (u, trace, converged) = best;
    debug_assert!(orthonormality_error(&u) < 1e-8);
    Ok(LpcaModel {
        u,
        mu,
        m: config.m,
        mu_mode: config.mu_mode,
        deviance_trace: trace,
        converged,
    })
}

struct Problem<'a> {
    x: &'a BinaryMatrix,
    mu: &'a [f64],
    centered: &'a DMatrix<f64>,
    gram: &'a DMatrix<f64>,
}

impl Problem<'_> {
    /// Majorization-minimization from `u`; returns the final loadings, the
    /// deviance trace and whether the tolerance was met.
    fn descend<F>(
        &self,
        mut u: DMatrix<f64>,
        config: &LpcaConfig,
        start: usize,
        observe: &mut F,
    ) -> Result<(DMatrix<f64>, Vec<f64>, bool)>
    where
        F: FnMut(&IterationState<'_>),
    {
        let (x, mu, k) = (self.x, self.mu, u.ncols());
        let (n, d) = (x.nrows(), x.ncols());
        let mut theta = project(self.centered, &u, mu);
        let mut deviance = bernoulli_deviance(&theta, x)?;
        let mut trace = vec![deviance];
        observe(&IterationState {
            start,
            iteration: 0,
            u: &u,
            deviance,
        });
        for iteration in 1..=config.max_iterations {
            // Zc = Θ − 1μᵀ + 4(X − σ(Θ)); the residual is computed from the
            // side of the sigmoid matching x so that complementing X negates
            // it exactly.
            let mut zc = theta.clone();
            subtract_mu(&mut zc, mu);
            for j in 0..d {
                for i in 0..n {
                    let t = theta[(i, j)];
                    let r = if x.get(i, j) == 1 { sigmoid(-t) } else { -sigmoid(t) };
                    zc[(i, j)] += 4.0 * r;
                }
            }
            let cross = self.centered.tr_mul(&zc);
            let target = &cross + cross.transpose() - self.gram;
            u = top_eigenvectors(&target, k).0;
            theta = project(self.centered, &u, mu);
            let previous = deviance;
            deviance = bernoulli_deviance(&theta, x)?;
            trace.push(deviance);
            observe(&IterationState {
                start,
                iteration,
                u: &u,
                deviance,
            });
            let change = (previous - deviance).abs() / previous.abs().max(f64::MIN_POSITIVE);
            if change < config.rel_tol {
                return Ok((u, trace, true));
            }
        }
        Ok((u, trace, false))
    }
}

/// Top-`k` right singular vectors of the column-centred `Θ̃`, i.e. classical
/// PCA on the truncated saturated parameters.
fn initial_loadings(x: &BinaryMatrix, m: f64, k: usize) -> Result<DMatrix<f64>> {
    let mut tilde = saturated_params(x, m)?;
    let n = tilde.nrows() as f64;
    for mut col in tilde.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    Ok(top_eigenvectors(&tilde.tr_mul(&tilde), k).0)
}

fn check_columns(model: &LpcaModel, x: &BinaryMatrix) -> Result<()> {
    if x.ncols() != model.d() {
        return Err(Error::Shape(format!(
            "data has {} columns, model expects {}",
            x.ncols(),
            model.d()
        )));
    }
    Ok(())
}

/// Principal component scores `(Θ̃ − 1μᵀ)U`, one row per row of `x`.
pub fn embed(model: &LpcaModel, x: &BinaryMatrix) -> Result<DMatrix<f64>> {
    check_columns(model, x)?;
    let mut centered = saturated_params(x, model.m)?;
    subtract_mu(&mut centered, &model.mu);
    Ok(centered * &model.u)
}

pub fn embed_corpus(model: &LpcaModel, corpus: &Corpus) -> Result<Embeddings> {
    let scores = embed(model, &corpus.matrix())?;
    Embeddings::new(scores, corpus.metadata())
}

/// Fitted natural parameters `Θ = 1μᵀ + (Θ̃ − 1μᵀ)UUᵀ` and probabilities `σ(Θ)`.
pub fn reconstruct(model: &LpcaModel, x: &BinaryMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_columns(model, x)?;
    let mut centered = saturated_params(x, model.m)?;
    subtract_mu(&mut centered, &model.mu);
    let theta = project(&centered, &model.u, &model.mu);
    let p = theta.map(sigmoid);
    Ok((theta, p))
}

/// Deviance of the model's projection of `x` (used for held-out rows).
pub fn projected_deviance(model: &LpcaModel, x: &BinaryMatrix) -> Result<f64> {
    let (theta, _) = reconstruct(model, x)?;
    bernoulli_deviance(&theta, x)
}

/// Deviance of the rank-0 model matching `mode`.
pub fn baseline_deviance(x: &BinaryMatrix, m: f64, mode: MuMode) -> f64 {
    let mu = main_effects(x, m, mode);
    let mut total = 0.0;
    for i in 0..x.nrows() {
        for (j, &mu_j) in mu.iter().enumerate() {
            total += deviance_term(mu_j, x.get(i, j));
        }
    }
    total
}

/// Largest deviance explained any `k` can reach with `μ = 0`:
/// `1 − log(1 + e^{−m}) / log 2`, attained at `k = min(n, d)` where the
/// projection reproduces the saturated parameters.
///
/// Each projected row lies in the ball with diameter `[0, θ̃ᵢ]`, and the
/// deviance gradient at `θ̃ᵢ` points along `−θ̃ᵢ`, so by convexity no
/// projection beats `θ̃ᵢ` itself.
pub fn explained_upper_bound(m: f64) -> f64 {
    1.0 - softplus(-m) / std::f64::consts::LN_2
}

/// `1 − D(model)/D(baseline)`, clipped to `[0, 1]`.
pub fn deviance_explained(model: &LpcaModel, x: &BinaryMatrix) -> Result<f64> {
    let d_model = projected_deviance(model, x)?;
    let d_base = baseline_deviance(x, model.m, model.mu_mode);
    if d_base <= 0.0 {
        return Ok(if d_model <= 0.0 { 1.0 } else { 0.0 });
    }
    Ok((1.0 - d_model / d_base).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub m: f64,
    pub fold: usize,
    pub heldout_deviance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub m_grid: Vec<f64>,
    pub folds: usize,
    pub k: usize,
    pub seed: u64,
    /// Fold index of every row.
    pub fold_of_row: Vec<usize>,
    /// One entry per (m, fold), m-major.
    pub cells: Vec<CvCell>,
    /// Summed held-out deviance per grid value.
    pub totals: Vec<f64>,
    pub best_m: f64,
}

/// Seeded row-to-fold assignment: rows are shuffled and dealt round-robin.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut exec::rng(exec::derive_seed(seed, 0xF01D)));
    let mut fold_of_row = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold_of_row[row] = pos % folds;
    }
    fold_of_row
}

/// Row indices (training, held-out) of `fold`.
pub fn split_fold(fold_of_row: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..fold_of_row.len()).partition(|&i| fold_of_row[i] != fold)
}

/// Row-wise cross-validation of the truncation level `m`. For each grid
/// value and fold, the model is fitted on the training rows and scored by the
/// deviance of its projection of the held-out rows. The best `m` minimises
/// the summed held-out deviance, ties going to the smaller `m`.
pub fn cross_validate_m(
    x: &BinaryMatrix,
    m_grid: &[f64],
    folds: usize,
    base: &LpcaConfig,
    execution: Execution,
) -> Result<CvResult> {
    if m_grid.is_empty() {
        return Err(Error::InvalidArgument("empty m grid".into()));
    }
    if let Some(bad) = m_grid.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
        return Err(Error::InvalidArgument(format!("grid value m={bad} is not positive")));
    }
    let n = x.nrows();
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!(
            "folds must be between 2 and n={n}, got {folds}"
        )));
    }
    let fold_of_row = assign_folds(n, folds, base.seed);
    let required = base.k.max(2);
    for fold in 0..folds {
        let train_rows = fold_of_row.iter().filter(|&&f| f != fold).count();
        if train_rows < required {
            return Err(Error::FoldTooSmall {
                fold,
                train_rows,
                required,
            });
        }
    }
    let splits: Vec<(BinaryMatrix, BinaryMatrix)> = (0..folds)
        .map(|fold| {
            let (train, test) = split_fold(&fold_of_row, fold);
            (x.select_rows(&train), x.select_rows(&test))
        })
        .collect();

    let outcomes = exec::map_indexed(execution, m_grid.len() * folds, |cell| {
        let (mi, fold) = (cell / folds, cell % folds);
        let config = LpcaConfig {
            m: m_grid[mi],
            ..base.clone()
        };
        let (train, test) = &splits[fold];
        fit(train, &config)
            .and_then(|model| projected_deviance(&model, test))
            .map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })
    });

    let mut cells = Vec::with_capacity(outcomes.len());
    for (cell, outcome) in outcomes.into_iter().enumerate() {
        cells.push(CvCell {
            m: m_grid[cell / folds],
            fold: cell % folds,
            heldout_deviance: outcome?,
        });
    }
    let totals: Vec<f64> = cells
        .chunks(folds)
        .map(|c| c.iter().map(|cell| cell.heldout_deviance).sum())
        .collect();
    let mut best = 0;
    for i in 1..m_grid.len() {
        let better = totals[i] < totals[best]
            || (totals[i] == totals[best] && m_grid[i] < m_grid[best]);
        if better {
            best = i;
        }
    }
    Ok(CvResult {
        m_grid: m_grid.to_vec(),
        folds,
        k: base.k,
        seed: base.seed,
        fold_of_row,
        cells,
        totals,
        best_m: m_grid[best],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    pub threshold: f64,
    /// Deviance explained for k = 1, 2, … as far as the scan went.
    pub explained: Vec<f64>,
}

/// Smallest `k` whose fit explains at least `threshold` of the baseline
/// deviance. Candidate `k` values are evaluated in batches of the worker
/// count; the answer does not depend on the batch size.
pub fn choose_k(
    x: &BinaryMatrix,
    threshold: f64,
    base: &LpcaConfig,
    execution: Execution,
) -> Result<KSelection> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let k_max = x.nrows().min(x.ncols());
    if base.mu_mode == MuMode::FixedZero {
        let bound = explained_upper_bound(base.m);
        if threshold > bound {
            return Err(Error::ThresholdUnreachable {
                threshold,
                max_explained: bound,
                k_max,
            });
        }
    }
    let batch = exec::worker_count(execution);
    let mut explained = Vec::new();
    let mut next = 1;
    while next <= k_max {
        let end = (next + batch - 1).min(k_max);
        let values = exec::map_indexed(execution, end - next + 1, |offset| {
            let config = LpcaConfig {
                k: next + offset,
                ..base.clone()
            };
            fit(x, &config).and_then(|model| deviance_explained(&model, x))
        });
        for value in values {
            explained.push(value?);
            if *explained.last().unwrap() >= threshold {
                return Ok(KSelection {
                    k: explained.len(),
                    threshold,
                    explained,
                });
            }
        }
        next = end + 1;
    }
    let max_explained = explained.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Err(Error::ThresholdUnreachable {
        threshold,
        max_explained,
        k_max,
    })
}

/// Principal component scores with the metadata of their source rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub scores: DMatrix<f64>,
    pub rows: Vec<SongMeta>,
}

impl Embeddings {
    pub fn new(scores: DMatrix<f64>, rows: Vec<SongMeta>) -> Result<Self> {
        if scores.nrows() != rows.len() {
            return Err(Error::Shape(format!(
                "{} score rows for {} metadata rows",
                scores.nrows(),
                rows.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(Self { scores, rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.scores.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.scores.row(i).iter().copied().collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            scores: self.scores.select_rows(rows),
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Keeps the first `k` components.
    pub fn truncate_components(&self, k: usize) -> Self {
        let k = k.min(self.k());
        Self {
            scores: self.scores.columns(0, k).into_owned(),
            rows: self.rows.clone(),
        }
    }

    /// Indices of rows satisfying `pred`.
    pub fn indices_where<F: Fn(&SongMeta) -> bool>(&self, pred: F) -> Vec<usize> {
        (0..self.n()).filter(|&i| pred(&self.rows[i])).collect()
    }

    /// CSV with `title, author, album, album_ordinal, PC1 … PCk`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["title", "author", "album", "album_ordinal"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=self.k()).map(|c| format!("PC{c}")));
        w.write_record(&header)?;
        for (i, meta) in self.rows.iter().enumerate() {
            let mut rec = vec![
                meta.title.clone(),
                meta.author.to_string(),
                meta.album.clone(),
                meta.album_ordinal.to_string(),
            ];
            rec.extend(self.scores.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected = ["title", "author", "album", "album_ordinal"];
        if header.len() < 5 || header.iter().take(4).zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Format(
                "embeddings header must be title,author,album,album_ordinal,PC1,…".into(),
            ));
        }
        let k = header.len() - 4;
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = idx + 1;
            let album_ordinal = rec[3].parse().map_err(|_| Error::Parse {
                row,
                column: "album_ordinal".into(),
                message: format!("\"{}\" is not a non-negative integer", &rec[3]),
            })?;
            rows.push(SongMeta {
                title: rec[0].to_string(),
                author: rec[1].parse().unwrap_or(crate::corpus::Author::Other),
                album: rec[2].to_string(),
                album_ordinal,
            });
            for c in 0..k {
                let v: f64 = rec[4 + c].parse().map_err(|_| Error::Parse {
                    row,
                    column: header[4 + c].to_string(),
                    message: format!("\"{}\" is not a number", &rec[4 + c]),
                })?;
                values.push(v);
            }
        }
        let n = rows.len();
        Self::new(DMatrix::from_row_slice(n, k, &values), rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AuthorRule, SyntheticSpec, synthesize_corpus, Author};

    fn bm(rows: &[&[u8]]) -> BinaryMatrix {
        BinaryMatrix::from_rows(rows).unwrap()
    }

    fn synthetic(n: usize, d: usize, k_true: usize, scale: f64, seed: u64) -> BinaryMatrix {
        let spec = SyntheticSpec::random_low_rank(n, d, k_true, scale, 0.0, seed);
        let rule = AuthorRule::AlternatingAlbums {
            authors: [Author::Lennon, Author::McCartney],
            album_size: 10,
        };
        synthesize_corpus(&spec, &rule).unwrap().matrix()
    }

    #[test]
    fn saturated_params_truncate_to_m() {
        let x = bm(&[&[1, 0], &[0, 1]]);
        let t = saturated_params(&x, 3.0).unwrap();
        assert_eq!(t[(0, 0)], 3.0);
        assert_eq!(t[(0, 1)], -3.0);
        let t = saturated_params(&x, 1.0).unwrap();
        assert_eq!(t, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert!(saturated_params(&x, 0.0).is_err());
    }

    #[test]
    fn deviance_at_zero_is_n_d_log_2() {
        let x = synthetic(7, 5, 1, 1.0, 3);
        let d = bernoulli_deviance(&DMatrix::zeros(7, 5), &x).unwrap();
        assert!((d - 2.0 * 35.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn deviance_single_entry() {
        // -2 log σ(3) = 0.0971747…
        let d = bernoulli_deviance(&DMatrix::from_element(1, 1, 3.0), &bm(&[&[1]])).unwrap();
        assert!((d - 0.097_174_703_147_483_82).abs() < 1e-12);
    }

    #[test]
    fn deviance_vanishes_at_saturation_and_rejects_shape() {
        let x = bm(&[&[1, 0], &[0, 1]]);
        let theta = saturated_params(&x, 700.0).unwrap();
        let d = bernoulli_deviance(&theta, &x).unwrap();
        assert!(d >= 0.0 && d < 1e-300);
        let wrong = saturated_params(&x, 700.0).unwrap().map(|v| -v);
        assert!(bernoulli_deviance(&wrong, &x).unwrap().is_finite());
        assert!(bernoulli_deviance(&DMatrix::zeros(3, 2), &x).is_err());
    }

    #[test]
    fn fit_rejects_bad_k() {
        let x = synthetic(6, 4, 1, 1.0, 0);
        assert!(matches!(
            fit(&x, &LpcaConfig::new(5, 3.0)),
            Err(Error::ComponentsOutOfRange { k: 5, max: 4 })
        ));
        assert!(fit(&x, &LpcaConfig::new(0, 3.0)).is_err());
        assert!(fit(&x, &LpcaConfig::new(1, -1.0)).is_err());
    }

    #[test]
    fn fit_handles_constant_columns() {
        let x = bm(&[&[1, 0, 1], &[1, 0, 0], &[1, 0, 1], &[1, 0, 0]]);
        let model = fit(&x, &LpcaConfig::new(2, 3.0)).unwrap();
        assert!(model.final_deviance().is_finite());
        assert!(orthonormality_error(&model.u) < 1e-8);
        let model = fit(&x, &LpcaConfig::new(1, 3.0).with_mu_mode(MuMode::ColumnMainEffects)).unwrap();
        assert_eq!(model.mu[0], 3.0);
        assert_eq!(model.mu[1], -3.0);
    }

    #[test]
    fn four_by_two_example_fits_every_entry() {
        let x = bm(&[&[1, 1], &[1, 1], &[0, 0], &[0, 0]]);
        let model = fit(&x, &LpcaConfig::new(1, 3.0)).unwrap();
        let (_, p) = reconstruct(&model, &x).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let agree = if x.get(i, j) == 1 { p[(i, j)] } else { 1.0 - p[(i, j)] };
                assert!(agree >= 0.9, "entry ({i},{j}) prob {agree}");
            }
        }
        // Dense angle-grid minimum over U = (cos φ, sin φ).
        let tilde = saturated_params(&x, 3.0).unwrap();
        let mut best = f64::INFINITY;
        for s in 0..10_000 {
            let phi = std::f64::consts::PI * s as f64 / 10_000.0;
            let u = DMatrix::from_column_slice(2, 1, &[phi.cos(), phi.sin()]);
            let theta = (&tilde * &u) * u.transpose();
            best = best.min(bernoulli_deviance(&theta, &x).unwrap());
        }
        assert!((model.final_deviance() - best).abs() < 1e-3);
    }

    #[test]
    fn full_rank_reaches_saturated_fit() {
        let x = synthetic(20, 6, 2, 1.0, 11);
        let model = fit(&x, &LpcaConfig::new(6, 3.0)).unwrap();
        let (theta, p) = reconstruct(&model, &x).unwrap();
        let tilde = saturated_params(&x, 3.0).unwrap();
        assert!((theta - &tilde).amax() < 1e-12);
        let s3 = sigmoid(3.0);
        for i in 0..20 {
            for j in 0..6 {
                let want = if x.get(i, j) == 1 { s3 } else { 1.0 - s3 };
                assert!((p[(i, j)] - want).abs() < 1e-12);
            }
        }
        let explained = deviance_explained(&model, &x).unwrap();
        assert!((explained - 0.929_903_268_834_634).abs() < 1e-9);
        assert!((explained - explained_upper_bound(3.0)).abs() < 1e-9);
        let smaller = fit(&x, &LpcaConfig::new(5, 3.0)).unwrap();
        assert!(model.final_deviance() <= smaller.final_deviance());
    }

    #[test]
    fn trace_descends_and_ends_at_reconstruction() {
        let x = synthetic(40, 12, 2, 1.5, 5);
        for mode in [MuMode::FixedZero, MuMode::ColumnMainEffects] {
            let config = LpcaConfig::new(3, 4.0).with_mu_mode(mode);
            let mut worst = 0.0f64;
            let model = fit_observed(&x, &config, |s| worst = worst.max(orthonormality_error(s.u))).unwrap();
            assert!(worst <= 1e-8);
            for w in model.deviance_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
            }
            let (theta, _) = reconstruct(&model, &x).unwrap();
            let recomputed = bernoulli_deviance(&theta, &x).unwrap();
            assert!((recomputed - model.final_deviance()).abs() <= 1e-9);
        }
    }

    #[test]
    fn embed_with_basis_loadings_copies_columns() {
        let x = bm(&[&[1, 0, 1], &[0, 0, 1]]);
        let mut u = DMatrix::zeros(3, 2);
        u[(0, 0)] = 1.0;
        u[(1, 1)] = 1.0;
        let model = LpcaModel {
            u,
            mu: vec![0.0; 3],
            m: 2.0,
            mu_mode: MuMode::FixedZero,
            deviance_trace: vec![0.0],
            converged: true,
        };
        let s = embed(&model, &x).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, -2.0]));
        let model1 = LpcaModel {
            u: model.u.columns(0, 1).into_owned(),
            ..model.clone()
        };
        let (theta, _) = reconstruct(&model1, &x).unwrap();
        assert_eq!(theta.column(0).iter().copied().collect::<Vec<_>>(), vec![2.0, -2.0]);
        assert!(theta.columns(1, 2).iter().all(|&v| v == 0.0));
        assert!(embed(&model, &bm(&[&[1, 0]])).is_err());
    }

    #[test]
    fn embed_identical_and_complement_rows() {
        let x = synthetic(30, 8, 2, 1.0, 2);
        let model = fit(&x, &LpcaConfig::new(2, 3.0)).unwrap();
        let r0 = x.row(0).to_vec();
        let comp: Vec<u8> = r0.iter().map(|v| 1 - v).collect();
        let probe = BinaryMatrix::from_rows(&[r0.clone(), r0, comp]).unwrap();
        let s = embed(&model, &probe).unwrap();
        for c in 0..2 {
            assert_eq!(s[(0, c)], s[(1, c)]);
            assert!((s[(0, c)] + s[(2, c)]).abs() < 1e-12);
        }
        let bound = 3.0 * (8f64).sqrt();
        assert!(embed(&model, &x).unwrap().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn complement_gives_identical_trace() {
        let x = synthetic(30, 10, 2, 1.0, 8);
        let config = LpcaConfig::new(2, 3.0);
        let a = fit(&x, &config).unwrap();
        let b = fit(&x.complement(), &config).unwrap();
        assert_eq!(a.deviance_trace, b.deviance_trace);
    }

    #[test]
    fn explained_is_monotone_in_k() {
        let x = synthetic(60, 15, 3, 1.5, 21);
        let mut last = 0.0;
        for k in 1..=8 {
            let model = fit(&x, &LpcaConfig::new(k, 4.0)).unwrap();
            let e = deviance_explained(&model, &x).unwrap();
            assert!(e >= last, "k={k}: {e} < {last}");
            last = e;
        }
    }

    #[test]
    fn model_json_round_trip() {
        let x = synthetic(12, 5, 1, 1.0, 4);
        let model = fit(&x, &LpcaConfig::new(2, 3.0)).unwrap();
        let json = model.to_json().unwrap();
        for key in ["\"m\"", "\"mu_mode\"", "\"mu\"", "\"U\"", "\"k\"", "\"deviance_trace\"", "\"converged\""] {
            assert!(json.contains(key), "missing {key}");
        }
        assert_eq!(LpcaModel::from_json(&json).unwrap(), model);
    }

    #[test]
    fn cv_is_deterministic_and_validates_folds() {
        let x = synthetic(30, 8, 2, 2.0, 9);
        let base = LpcaConfig::new(2, 3.0).with_seed(17);
        let a = cross_validate_m(&x, &[1.0, 3.0, 5.0], 3, &base, Execution::Sequential).unwrap();
        let b = cross_validate_m(&x, &[1.0, 3.0, 5.0], 3, &base, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), 9);
        let one = cross_validate_m(&x, &[4.0], 3, &base, Execution::Sequential).unwrap();
        assert_eq!(one.best_m, 4.0);
        let tiny = synthetic(4, 8, 1, 1.0, 9);
        assert!(matches!(
            cross_validate_m(&tiny, &[1.0], 4, &LpcaConfig::new(4, 1.0), Execution::Sequential),
            Err(Error::FoldTooSmall { .. })
        ));
        assert!(cross_validate_m(&x, &[1.0], 1, &base, Execution::Sequential).is_err());
    }

    #[test]
    fn choose_k_unreachable_reports_max() {
        let x = synthetic(10, 4, 1, 1.0, 1);
        match choose_k(&x, 0.999, &LpcaConfig::new(1, 1.0), Execution::Sequential) {
            Err(Error::ThresholdUnreachable { max_explained, k_max, .. }) => {
                assert_eq!(k_max, 4);
                // k = d reproduces Θ̃ exactly: 1 − log σ(1)/log(1/2).
                assert!((max_explained - 0.548_058_916_916_951_9).abs() < 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(choose_k(&x, 1.5, &LpcaConfig::new(1, 1.0), Execution::Sequential).is_err());
        // Main-effects mode has no closed-form cap and scans every k.
        let main = LpcaConfig::new(1, 1.0).with_mu_mode(MuMode::ColumnMainEffects);
        match choose_k(&x, 0.999, &main, Execution::Sequential) {
            Err(Error::ThresholdUnreachable { max_explained, k_max, .. }) => {
                assert_eq!(k_max, 4);
                assert!(max_explained < 0.999);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn no_fit_exceeds_the_zero_mean_cap() {
        for seed in 0..4 {
            let x = synthetic(25, 7, 2, 2.0, 40 + seed);
            for m in [1.0, 3.0, 6.0] {
                let cap = explained_upper_bound(m);
                for k in 1..=7 {
                    let model = fit(&x, &LpcaConfig::new(k, m)).unwrap();
                    assert!(deviance_explained(&model, &x).unwrap() <= cap + 1e-12);
                }
            }
        }
    }

    #[test]
    fn embeddings_csv_round_trip() {
        let spec = SyntheticSpec::random_low_rank(12, 6, 2, 1.0, 0.0, 1);
        let rule = AuthorRule::AlternatingAlbums {
            authors: [Author::Lennon, Author::McCartney],
            album_size: 4,
        };
        let corpus = synthesize_corpus(&spec, &rule).unwrap();
        let model = fit(&corpus.matrix(), &LpcaConfig::new(3, 3.0)).unwrap();
        let emb = embed_corpus(&model, &corpus).unwrap();
        let mut buf = Vec::new();
        emb.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("title,author,album,album_ordinal,PC1,PC2,PC3\n"));
        assert_eq!(Embeddings::read_csv(buf.as_slice()).unwrap(), emb);
    }

    #[test]
    fn restarts_never_lose_to_the_pca_start() {
        for seed in 0..6 {
            let x = synthetic(30, 6, 2, 1.5, 300 + seed);
            let config = LpcaConfig::new(2, 3.0).with_seed(seed);
            let single = fit(&x, &config).unwrap();
            let multi = fit(&x, &config.clone().with_restarts(3)).unwrap();
            assert!(multi.final_deviance() <= single.final_deviance());
            assert_eq!(multi, fit(&x, &config.clone().with_restarts(3)).unwrap());
            assert!(orthonormality_error(&multi.u) < 1e-8);
        }
    }

    #[test]
    fn every_start_is_observed_and_descends() {
        let x = synthetic(20, 5, 1, 1.5, 77);
        let mut last: Vec<Option<f64>> = vec![None; 3];
        fit_observed(&x, &LpcaConfig::new(2, 2.0).with_restarts(2), |s| {
            if let Some(prev) = last[s.start] {
                assert!(s.deviance <= prev + 1e-9);
            }
            last[s.start] = Some(s.deviance);
        })
        .unwrap();
        assert!(last.iter().all(Option::is_some));
    }
}
