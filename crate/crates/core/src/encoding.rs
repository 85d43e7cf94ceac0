//! Ridge-regression encoding benchmark: predict per-voxel activations from
//! stimulus features and compare how well two sets of activation estimates
//! can be predicted.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::GlmSolver;
use crate::stats::{wilcoxon_signed_rank, Alternative, TestResult};

/// Penalty grid searched by the inner cross-validation.
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0];
pub const DEFAULT_TOP_K: usize = 100;

/// Ridge weights `(X^T X + lambda I)^{-1} X^T Y`, all targets sharing one
/// Cholesky factorization.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::invalid(format!("features have {} rows, targets {}", x.nrows(), y.nrows())));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("ridge penalty must be finite and >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        // reuses the QR rank test of the GLM solver to name dependent columns
        GlmSolver::new(x, &DMatrix::zeros(x.nrows(), 0))?;
    }
    let gram = x.tr_mul(x);
    let rhs = x.tr_mul(y);
    ridge_solve(&gram, &rhs, lambda)
}

fn ridge_solve(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let mut a = gram.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = a.cholesky().ok_or(Error::RankDeficient { columns: vec![] })?;
    Ok(chol.solve(rhs))
}

/// `1 - |y - y_hat|^2 / (n var(y))` with the population variance of `y`.
pub fn predictive_r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "prediction has {} values, target {}",
            y_pred.len(),
            y_true.len()
        )));
    }
    if y_true.len() < 2 {
        return Err(Error::InsufficientData("predictive r2 needs at least 2 samples".into()));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot <= 1e-24 * y_true.iter().map(|v| v * v).sum::<f64>() || ss_tot == 0.0 {
        return Err(Error::DegenerateInput("target has zero variance".into()));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingDataset {
    /// examples x features
    pub features: DMatrix<f64>,
    /// examples x voxels
    pub activations: DMatrix<f64>,
    /// Cross-validation fold (session) of each example.
    pub fold_ids: Vec<usize>,
}

impl EncodingDataset {
    pub fn new(features: DMatrix<f64>, activations: DMatrix<f64>, fold_ids: Vec<usize>) -> Result<Self> {
        let m = features.nrows();
        if activations.nrows() != m || fold_ids.len() != m {
            return Err(Error::invalid(format!(
                "row counts differ: features {m}, activations {}, folds {}",
                activations.nrows(),
                fold_ids.len()
            )));
        }
        let ds = Self {
            features,
            activations,
            fold_ids,
        };
        if ds.folds().len() < 2 {
            return Err(Error::InsufficientData("encoding benchmark needs at least 2 folds".into()));
        }
        Ok(ds)
    }

    pub fn num_voxels(&self) -> usize {
        self.activations.ncols()
    }

    /// Distinct fold labels in increasing order.
    pub fn folds(&self) -> Vec<usize> {
        let mut f = self.fold_ids.clone();
        f.sort_unstable();
        f.dedup();
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaPolicy {
    Fixed(f64),
    /// Chosen per voxel by inner leave-one-fold-out over the training folds.
    Grid(Vec<f64>),
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        Self::Grid(DEFAULT_LAMBDA_GRID.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingOptions {
    pub lambda: LambdaPolicy,
    pub top_k: usize,
}

impl Default for EncodingOptions {
    fn default() -> Self {
        Self {
            lambda: LambdaPolicy::default(),
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EncodingOutcome {
    Tested(TestResult),
    /// Every selected voxel scored identically under both arms.
    NoDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingReport {
    /// Mean held-out r2 per voxel, canonical arm.
    pub scores_canonical: Vec<f64>,
    pub scores_rank1: Vec<f64>,
    /// Voxels ranked by canonical score, best first, truncated to top_k.
    pub selected: Vec<usize>,
    /// One-sided Wilcoxon test of rank-one > canonical on the selected voxels.
    pub outcome: EncodingOutcome,
}

impl EncodingReport {
    pub fn write_scatter_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(["voxel_id", "score_canonical", "score_rank1"]).map_err(csv_io)?;
        for &v in &self.selected {
            w.write_record([
                v.to_string(),
                format!("{:?}", self.scores_canonical[v]),
                format!("{:?}", self.scores_rank1[v]),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "voxels_selected = {}", self.selected.len())?;
        let mean = |s: &[f64]| self.selected.iter().map(|&v| s[v]).sum::<f64>() / self.selected.len().max(1) as f64;
        writeln!(out, "mean_score_canonical = {}", mean(&self.scores_canonical))?;
        writeln!(out, "mean_score_rank1 = {}", mean(&self.scores_rank1))?;
        match self.outcome {
            EncodingOutcome::Tested(t) => {
                writeln!(out, "wilcoxon_statistic = {}", t.statistic)?;
                writeln!(out, "wilcoxon_p_greater = {}", t.p_value)?;
                writeln!(out, "wilcoxon_n = {}", t.n_effective)?;
            }
            EncodingOutcome::NoDifference => writeln!(out, "wilcoxon = no difference")?,
        }
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("{other:?}")),
    }
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).mean())
}

fn center(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - means[j])
}

/// Held-out r2 per voxel for each penalty, training on `train` rows and
/// predicting `test` rows. Features and targets are centred with training
/// means so that the intercept is not penalized.
fn fold_scores(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    train: &[usize],
    test: &[usize],
    lambdas: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let xtr = select_rows(features, train);
    let ytr = select_rows(targets, train);
    let (xm, ym) = (column_means(&xtr), column_means(&ytr));
    let xtr = center(&xtr, &xm);
    let ytr = center(&ytr, &ym);
    let xte = center(&select_rows(features, test), &xm);
    let yte = select_rows(targets, test);
    let gram = xtr.tr_mul(&xtr);
    let rhs = xtr.tr_mul(&ytr);
    lambdas
        .iter()
        .map(|&lambda| {
            let w = if lambda == 0.0 {
                ridge_fit(&xtr, &ytr, 0.0)?
            } else {
                ridge_solve(&gram, &rhs, lambda)?
            };
            let mut pred = &xte * w;
            for j in 0..pred.ncols() {
                pred.column_mut(j).add_scalar_mut(ym[j]);
            }
            (0..yte.ncols())
                .map(|j| predictive_r2(yte.column(j).as_slice(), pred.column(j).as_slice()))
                .collect()
        })
        .collect()
}

fn rows_in(fold_ids: &[usize], pred: impl Fn(usize) -> bool) -> Vec<usize> {
    (0..fold_ids.len()).filter(|&i| pred(fold_ids[i])).collect()
}

/// Mean held-out r2 per voxel under leave-one-fold-out cross-validation.
pub fn cross_validated_scores(data: &EncodingDataset, lambda: &LambdaPolicy) -> Result<Vec<f64>> {
    let folds = data.folds();
    let v = data.num_voxels();
    let per_fold: Vec<Vec<f64>> = folds
        .par_iter()
        .map(|&held| {
            let train = rows_in(&data.fold_ids, |f| f != held);
            let test = rows_in(&data.fold_ids, |f| f == held);
            match lambda {
                LambdaPolicy::Fixed(l) => Ok(fold_scores(&data.features, &data.activations, &train, &test, &[*l])?.remove(0)),
                LambdaPolicy::Grid(grid) => {
                    let chosen = choose_lambdas(data, held, grid)?;
                    let scores = fold_scores(&data.features, &data.activations, &train, &test, grid)?;
                    Ok((0..v).map(|j| scores[chosen[j]][j]).collect())
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok((0..v)
        .map(|j| per_fold.iter().map(|s| s[j]).sum::<f64>() / per_fold.len() as f64)
        .collect())
}

/// Index into `grid` of the best inner-CV penalty for every voxel, using only
/// folds other than `held`. Ties go to the larger penalty.
fn choose_lambdas(data: &EncodingDataset, held: usize, grid: &[f64]) -> Result<Vec<usize>> {
    if grid.is_empty() {
        return Err(Error::invalid("empty penalty grid"));
    }
    let inner: Vec<usize> = data.folds().into_iter().filter(|&f| f != held).collect();
    let v = data.num_voxels();
    if inner.len() < 2 {
        return Ok(vec![grid.len() - 1; v]);
    }
    let mut totals = vec![vec![0.0; v]; grid.len()];
    for &val in &inner {
        let train = rows_in(&data.fold_ids, |f| f != held && f != val);
        let test = rows_in(&data.fold_ids, |f| f == val);
        let s = fold_scores(&data.features, &data.activations, &train, &test, grid)?;
        for (tot, sc) in totals.iter_mut().zip(&s) {
            for j in 0..v {
                tot[j] += sc[j];
            }
        }
    }
    Ok((0..v)
        .map(|j| {
            let mut best = 0;
            for l in 1..grid.len() {
                if totals[l][j] >= totals[best][j] {
                    best = l;
                }
            }
            best
        })
        .collect())
}

/// Score both activation sets, pick the `top_k` voxels by canonical score and
/// test whether the rank-one activations are predicted better.
pub fn encoding_benchmark(
    canonical: &EncodingDataset,
    rank1: &EncodingDataset,
    options: &EncodingOptions,
) -> Result<EncodingReport> {
    if canonical.fold_ids != rank1.fold_ids {
        return Err(Error::invalid("the two datasets use different folds"));
    }
    if canonical.num_voxels() != rank1.num_voxels() {
        return Err(Error::invalid(format!(
            "voxel counts differ: {} vs {}",
            canonical.num_voxels(),
            rank1.num_voxels()
        )));
    }
    if canonical.features.ncols() != rank1.features.ncols() {
        return Err(Error::invalid("feature dimensions differ"));
    }
    if options.top_k == 0 {
        return Err(Error::invalid("top_k must be positive"));
    }
    let scores_canonical = cross_validated_scores(canonical, &options.lambda)?;
    let scores_rank1 = cross_validated_scores(rank1, &options.lambda)?;
    let mut order: Vec<usize> = (0..scores_canonical.len()).collect();
    order.sort_by(|&a, &b| scores_canonical[b].total_cmp(&scores_canonical[a]).then(a.cmp(&b)));
    order.truncate(options.top_k);
    let x: Vec<f64> = order.iter().map(|&v| scores_rank1[v]).collect();
    let y: Vec<f64> = order.iter().map(|&v| scores_canonical[v]).collect();
    let outcome = match wilcoxon_signed_rank(&x, &y, Alternative::Greater) {
        Ok(t) => EncodingOutcome::Tested(t),
        Err(Error::InsufficientData(_)) if x == y => EncodingOutcome::NoDifference,
        Err(e) => return Err(e),
    };
    Ok(EncodingReport {
        scores_canonical,
        scores_rank1,
        selected: order,
        outcome,
    })
}
