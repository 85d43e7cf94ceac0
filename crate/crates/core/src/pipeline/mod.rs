//! Multi-session datasets, per-voxel fitting, and leave-one-session-out
//! validation against the canonical HRF.

pub mod io;
pub mod npy;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::design::{build_session_design, DesignMatrix, EventTable};
use crate::error::{Error, Result};
use crate::glm::{solver_loglik, GlmSolver};
use crate::hrf_basis::{canonical_basis, fir_basis_with_dt, glover_derivative, peak_time, BasisKind, HrfBasis};
use crate::noise::{estimate_ar1, whiten};
use crate::rank_one::{RankOneFit, RankOneSolver, SolverOptions};
use crate::stats::{paired_mean_test, wilcoxon_signed_rank, Alternative, TestResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub events: EventTable,
    /// `n x voxels`
    pub bold: DMatrix<f64>,
    /// `n x q` nuisance regressors. An intercept is added when no column is constant.
    pub confounds: DMatrix<f64>,
}

impl Session {
    pub fn new(events: EventTable, bold: DMatrix<f64>, confounds: DMatrix<f64>) -> Result<Self> {
        if bold.nrows() == 0 || bold.ncols() == 0 {
            return Err(Error::EmptyData(format!("session {} has no BOLD data", events.session_id())));
        }
        if confounds.nrows() != bold.nrows() {
            return Err(Error::invalid(format!(
                "session {}: {} BOLD scans but {} confound rows",
                events.session_id(),
                bold.nrows(),
                confounds.nrows()
            )));
        }
        Ok(Self { events, bold, confounds })
    }

    pub fn num_scans(&self) -> usize {
        self.bold.nrows()
    }

    /// Confounds with an intercept column guaranteed.
    fn nuisance(&self) -> DMatrix<f64> {
        with_intercept(&self.confounds)
    }
}

fn with_intercept(p: &DMatrix<f64>) -> DMatrix<f64> {
    let has_constant = (0..p.ncols()).any(|j| {
        let c = p.column(j);
        c[0] != 0.0 && c.iter().all(|v| *v == c[0])
    });
    if has_constant {
        p.clone()
    } else {
        p.clone().insert_column(p.ncols(), 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sessions: Vec<Session>,
    tr: f64,
}

impl Dataset {
    pub fn new(sessions: Vec<Session>, tr: f64) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::EmptyData("dataset has no sessions".into()));
        }
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::invalid(format!("TR must be positive, got {tr}")));
        }
        let v = sessions[0].bold.ncols();
        let p = sessions[0].events.num_conditions();
        for s in &sessions {
            if s.bold.ncols() != v {
                return Err(Error::invalid(format!(
                    "session {} has {} voxels, expected {v}",
                    s.events.session_id(),
                    s.bold.ncols()
                )));
            }
            if s.events.num_conditions() != p {
                return Err(Error::invalid(format!(
                    "session {} has {} conditions, expected {p}",
                    s.events.session_id(),
                    s.events.num_conditions()
                )));
            }
        }
        Ok(Self { sessions, tr })
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn tr(&self) -> f64 {
        self.tr
    }

    pub fn num_voxels(&self) -> usize {
        self.sessions[0].bold.ncols()
    }

    pub fn num_conditions(&self) -> usize {
        self.sessions[0].events.num_conditions()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Whitening {
    None,
    /// Per voxel and session, AR(1) fitted to canonical-GLM residuals.
    Ar1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub solver: SolverOptions,
    /// The basis is sampled at `TR / oversample`.
    pub oversample: usize,
    /// Use exact off-grid onsets (continuous bases only).
    pub asynchronous: bool,
    pub whitening: Whitening,
    /// Worker threads for voxel-level parallelism; `None` uses all cores.
    pub workers: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            oversample: 1,
            asynchronous: false,
            whitening: Whitening::None,
            workers: None,
        }
    }
}

fn check_basis(basis: &HrfBasis, tr: f64, options: &FitOptions) -> Result<()> {
    if options.oversample == 0 {
        return Err(Error::invalid("oversample must be at least 1"));
    }
    let expected = tr / options.oversample as f64;
    if (basis.dt() - expected).abs() > 1e-9 * expected && basis.kind() != BasisKind::Fir {
        return Err(Error::invalid(format!(
            "basis is sampled every {} s but TR / oversample = {expected} s",
            basis.dt()
        )));
    }
    Ok(())
}

fn session_design(session: &Session, basis: &HrfBasis, tr: f64, options: &FitOptions) -> Result<DesignMatrix> {
    build_session_design(
        &session.events,
        basis,
        session.num_scans(),
        tr,
        options.oversample,
        options.asynchronous,
    )
}

/// Place per-session nuisance blocks on the diagonal.
fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

fn run_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(job()),
        Some(0) => Err(Error::invalid("worker count must be at least 1")),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::invalid(e.to_string()))?;
            Ok(pool.install(job))
        }
    }
}

/// Stacked design, block confounds and segment boundaries of several sessions.
struct Stacked {
    design: DesignMatrix,
    confounds: DMatrix<f64>,
    segments: Vec<(usize, usize)>,
}

fn stack_sessions(sessions: &[&Session], basis: &HrfBasis, tr: f64, options: &FitOptions) -> Result<Stacked> {
    let designs = sessions
        .iter()
        .map(|s| session_design(s, basis, tr, options))
        .collect::<Result<Vec<_>>>()?;
    let design = DesignMatrix::vstack(&designs)?;
    let nuisance: Vec<DMatrix<f64>> = sessions.iter().map(|s| s.nuisance()).collect();
    let confounds = block_diagonal(&nuisance);
    let mut segments = Vec::with_capacity(sessions.len());
    let mut start = 0;
    for s in sessions {
        segments.push((start, s.num_scans()));
        start += s.num_scans();
    }
    Ok(Stacked {
        design,
        confounds,
        segments,
    })
}

fn voxel_series(sessions: &[&Session], voxel: usize) -> DVector<f64> {
    let n: usize = sessions.iter().map(|s| s.num_scans()).sum();
    let mut y = DVector::zeros(n);
    let mut start = 0;
    for s in sessions {
        y.rows_mut(start, s.num_scans()).copy_from(&s.bold.column(voxel));
        start += s.num_scans();
    }
    y
}

/// Whiten every session segment of `x` with its own coefficient.
fn whiten_segments(x: &[f64], segments: &[(usize, usize)], rhos: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    for (&(start, len), &rho) in segments.iter().zip(rhos) {
        out.extend(whiten(&x[start..start + len], rho)?);
    }
    Ok(out)
}

fn whiten_matrix(m: &DMatrix<f64>, segments: &[(usize, usize)], rhos: &[f64]) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        let col = whiten_segments(m.column(j).as_slice(), segments, rhos)?;
        out.set_column(j, &DVector::from_vec(col));
    }
    Ok(out)
}

/// AR(1) coefficient per session segment from canonical-GLM residuals.
fn segment_rhos(canonical: &GlmSolver, y: &DVector<f64>, segments: &[(usize, usize)]) -> Result<Vec<f64>> {
    let resid = canonical.solve(y)?.residuals;
    segments
        .iter()
        .map(|&(start, len)| {
            let seg = &resid.as_slice()[start..start + len];
            match estimate_ar1(seg) {
                Ok(m) => Ok(m.rho),
                Err(Error::DegenerateInput(_)) => Ok(0.0),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Rank-one fit of every voxel on the time-concatenated `sessions`.
pub fn fit_sessions(sessions: &[&Session], basis: &HrfBasis, tr: f64, options: &FitOptions) -> Result<Vec<RankOneFit>> {
    if sessions.is_empty() {
        return Err(Error::InsufficientData("no training sessions".into()));
    }
    check_basis(basis, tr, options)?;
    let v = sessions[0].bold.ncols();
    if sessions.iter().any(|s| s.bold.ncols() != v) {
        return Err(Error::invalid("sessions disagree on the number of voxels"));
    }
    let stacked = stack_sessions(sessions, basis, tr, options)?;
    let solver = RankOneSolver::new(&stacked.design, &stacked.confounds, basis, options.solver)?;
    let canonical = match options.whitening {
        Whitening::Ar1 => {
            let alpha = basis.canonical_coefficients()?;
            Some(GlmSolver::new(&stacked.design.collapse(&alpha), &stacked.confounds)?)
        }
        Whitening::None => None,
    };
    let fit_one = |voxel: usize| -> Result<RankOneFit> {
        let y = voxel_series(sessions, voxel);
        match &canonical {
            None => solver.fit(&y),
            Some(glm) => {
                let rhos = segment_rhos(glm, &y, &stacked.segments)?;
                let yw = DVector::from_vec(whiten_segments(y.as_slice(), &stacked.segments, &rhos)?);
                let design = stacked
                    .design
                    .map_columns(|c| whiten_segments(c, &stacked.segments, &rhos).expect("|rho| < 1 checked above"));
                let confounds = whiten_matrix(&stacked.confounds, &stacked.segments, &rhos)?;
                RankOneSolver::new(&design, &confounds, basis, options.solver)?.fit(&yw)
            }
        }
    };
    run_pool(options.workers, || (0..v).into_par_iter().map(fit_one).collect::<Result<Vec<_>>>())?
}

/// Rank-one fit of every voxel using all sessions of `dataset`.
pub fn fit_dataset(dataset: &Dataset, basis: &HrfBasis, options: &FitOptions) -> Result<Vec<RankOneFit>> {
    let sessions: Vec<&Session> = dataset.sessions.iter().collect();
    fit_sessions(&sessions, basis, dataset.tr, options)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateOptions {
    pub fit: FitOptions,
    /// Number of voxels summarized in the HRF report.
    pub top_k: usize,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            top_k: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrfSummary {
    /// Voxels in the summary, best first.
    pub voxels: Vec<usize>,
    pub dt: f64,
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
    /// Canonical HRF on the same grid.
    pub canonical: DVector<f64>,
    pub peak_times: Vec<f64>,
    pub mean_peak_time: f64,
    pub canonical_peak_time: f64,
    /// `canonical_peak_time - mean_peak_time`; positive when fitted HRFs peak earlier.
    pub peak_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// `voxels x sessions` held-out log-likelihood with the fitted HRF.
    pub loglik_rank1: DMatrix<f64>,
    /// Same with the canonical HRF.
    pub loglik_canonical: DMatrix<f64>,
    /// Same with confounds only.
    pub loglik_null: DMatrix<f64>,
    /// One-sided tests of rank-one > canonical on per-voxel sums; `None`
    /// when there are too few voxels or no variation.
    pub t_test: Option<TestResult>,
    pub wilcoxon: Option<TestResult>,
    /// Per voxel, mean over folds of the normalized fitted HRF (`r x voxels`).
    pub hrfs: DMatrix<f64>,
    pub summary: HrfSummary,
}

impl ValidationReport {
    pub fn total_rank1(&self) -> Vec<f64> {
        row_sums(&self.loglik_rank1)
    }

    pub fn total_canonical(&self) -> Vec<f64> {
        row_sums(&self.loglik_canonical)
    }
}

fn row_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m.row(i).sum()).collect()
}

/// The canonical HRF as a one-function basis with the same grid as `basis`.
pub fn canonical_reference(basis: &HrfBasis) -> Result<HrfBasis> {
    canonical_basis(basis.duration(), basis.dt(), 0)
}

/// Basis from `fir:<r>` or `canonical:<derivatives>`, sampled every
/// `TR / oversample`. Canonical bases span `hrf_length` seconds.
pub fn parse_basis(text: &str, tr: f64, oversample: usize, hrf_length: f64) -> Result<HrfBasis> {
    if oversample == 0 {
        return Err(Error::invalid("oversample must be at least 1"));
    }
    let dt = tr / oversample as f64;
    let (kind, arg) = text
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("basis `{text}`: expected fir:<r> or canonical:<derivatives>")))?;
    let count: usize = arg
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("basis `{text}`: `{arg}` is not a count")))?;
    match kind.trim() {
        "fir" => fir_basis_with_dt(count, dt),
        "canonical" => {
            if !(hrf_length > 0.0 && hrf_length.is_finite()) {
                return Err(Error::invalid(format!("HRF length must be positive, got {hrf_length}")));
            }
            canonical_basis((hrf_length / dt).ceil() as usize, dt, count)
        }
        other => Err(Error::invalid(format!("unknown basis kind `{other}`"))),
    }
}

fn optional_test(result: Result<TestResult>) -> Result<Option<TestResult>> {
    match result {
        Ok(t) => Ok(Some(t)),
        Err(Error::InsufficientData(_) | Error::DegenerateInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Leave-one-session-out comparison of the rank-one HRF with the canonical
/// HRF by held-out GLM log-likelihood.
pub fn cross_session_validate(dataset: &Dataset, basis: &HrfBasis, options: &ValidateOptions) -> Result<ValidationReport> {
    let s_count = dataset.sessions.len();
    if s_count < 2 {
        return Err(Error::InsufficientData("cross-session validation needs at least 2 sessions".into()));
    }
    if options.top_k == 0 {
        return Err(Error::invalid("top_k must be positive"));
    }
    let fopts = &options.fit;
    let whiten = fopts.whitening == Whitening::Ar1;
    let tr = dataset.tr;
    let v = dataset.num_voxels();
    let r = basis.duration();
    let reference = canonical_reference(basis)?;
    let ones = DVector::from_element(1, 1.0);

    let mut ll_rank1 = DMatrix::zeros(v, s_count);
    let mut ll_canonical = DMatrix::zeros(v, s_count);
    let mut ll_null = DMatrix::zeros(v, s_count);
    let mut hrf_sum = DMatrix::zeros(r, v);

    for held in 0..s_count {
        let train: Vec<&Session> = (0..s_count).filter(|&s| s != held).map(|s| &dataset.sessions[s]).collect();
        let fits = fit_sessions(&train, basis, tr, fopts)?;
        let test = &dataset.sessions[held];
        let design = session_design(test, basis, tr, fopts)?;
        let canonical_x = session_design(test, &reference, tr, fopts)?.collapse(&ones);
        let nuisance = test.nuisance();
        let canonical_solver = GlmSolver::new(&canonical_x, &nuisance)?;
        let null_solver = GlmSolver::new(&DMatrix::zeros(test.num_scans(), 0), &nuisance)?;
        let rows: Vec<(f64, f64, f64)> = run_pool(fopts.workers, || {
            (0..v)
                .into_par_iter()
                .map(|voxel| {
                    let y = test.bold.column(voxel).into_owned();
                    let x_fit = design.collapse(&fits[voxel].alpha);
                    let a = solver_loglik(&GlmSolver::new(&x_fit, &nuisance)?, &y, whiten)?;
                    let b = solver_loglik(&canonical_solver, &y, whiten)?;
                    let c = solver_loglik(&null_solver, &y, whiten)?;
                    Ok((a, b, c))
                })
                .collect::<Result<Vec<_>>>()
        })??;
        for (voxel, (a, b, c)) in rows.into_iter().enumerate() {
            ll_rank1[(voxel, held)] = a;
            ll_canonical[(voxel, held)] = b;
            ll_null[(voxel, held)] = c;
            hrf_sum.column_mut(voxel).axpy(1.0 / s_count as f64, &fits[voxel].h, 1.0);
        }
    }

    let total_rank1 = row_sums(&ll_rank1);
    let total_canonical = row_sums(&ll_canonical);
    let t_test = optional_test(paired_mean_test(&total_rank1, &total_canonical, Alternative::Greater))?;
    let wilcoxon = optional_test(wilcoxon_signed_rank(&total_rank1, &total_canonical, Alternative::Greater))?;

    let gain: Vec<f64> = total_rank1.iter().zip(row_sums(&ll_null)).map(|(a, b)| a - b).collect();
    let summary = summarize_hrfs(&hrf_sum, &gain, basis.dt(), options.top_k);
    Ok(ValidationReport {
        loglik_rank1: ll_rank1,
        loglik_canonical: ll_canonical,
        loglik_null: ll_null,
        t_test,
        wilcoxon,
        hrfs: hrf_sum,
        summary,
    })
}

/// Mean/sd HRF and peak statistics over the `top_k` voxels with the largest `score`.
pub fn summarize_hrfs(hrfs: &DMatrix<f64>, score: &[f64], dt: f64, top_k: usize) -> HrfSummary {
    let mut order: Vec<usize> = (0..hrfs.ncols()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    let r = hrfs.nrows();
    let k = order.len() as f64;
    let mut mean = DVector::zeros(r);
    for &v in &order {
        mean += hrfs.column(v);
    }
    mean /= k;
    let mut sd = DVector::zeros(r);
    if order.len() > 1 {
        for &v in &order {
            sd += (hrfs.column(v) - &mean).map(|d| d * d);
        }
        sd = (sd / (k - 1.0)).map(f64::sqrt);
    }
    let peak_times: Vec<f64> = order.iter().map(|&v| peak_time(hrfs.column(v).as_slice(), dt)).collect();
    let mean_peak_time = peak_times.iter().sum::<f64>() / k;
    let canonical = DVector::from_fn(r, |i, _| glover_derivative(0, i as f64 * dt));
    let canonical_peak_time = peak_time(canonical.as_slice(), dt);
    HrfSummary {
        voxels: order,
        dt,
        mean,
        sd,
        canonical,
        peak_times,
        mean_peak_time,
        canonical_peak_time,
        peak_shift: canonical_peak_time - mean_peak_time,
    }
}
