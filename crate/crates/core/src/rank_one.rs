//! Rank-one constrained regression: joint estimation of the HRF
//! coefficients `alpha`, per-condition activations `beta` and confound
//! weights `w` by minimizing
//!
//! ```text
//! 1/2 |y - X_Q vec(alpha beta^T) - P w|^2  (+ 1/2 lambda |Q alpha|^2)
//! ```
//!
//! Any noise whitening is applied to `y`, `X_Q` and `P` before the problem is
//! built. The gradients never form a Kronecker product: with the residual
//! `d = X_Q vec(alpha beta^T) + P w - y`, the vector `X_Q^T d` is reshaped
//! into a `t x p` matrix `G`, and
//!
//! ```text
//! grad_alpha = G beta,   grad_beta = G^T alpha,   grad_w = P^T d.
//! ```

use nalgebra::{DMatrix, DVector};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::glm::GlmSolver;
use crate::hrf_basis::HrfBasis;
use crate::lbfgs::{self, LbfgsOptions, Termination};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative gradient tolerance: stop when `|grad|_inf <= tol * max(1, |f|)`.
    pub tol: f64,
    pub lbfgs_history: usize,
    /// Weight of the optional `1/2 |Q alpha|^2` penalty.
    pub hrf_penalty: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            lbfgs_history: 10,
            hrf_penalty: 0.0,
        }
    }
}

impl SolverOptions {
    fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions {
            history: self.lbfgs_history,
            max_iter: self.max_iter,
            tol: self.tol,
            ..LbfgsOptions::default()
        }
    }
}

/// One voxel's regression problem. All inputs are borrowed so that many
/// voxels can share a design.
#[derive(Debug, Clone, Copy)]
pub struct RankOneProblem<'a> {
    design: &'a DesignMatrix,
    confounds: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    basis: &'a HrfBasis,
    hrf_penalty: f64,
}

impl<'a> RankOneProblem<'a> {
    pub fn new(
        design: &'a DesignMatrix,
        confounds: &'a DMatrix<f64>,
        y: &'a DVector<f64>,
        basis: &'a HrfBasis,
    ) -> Result<Self> {
        check_dimensions(design, confounds, basis)?;
        if y.len() != design.nrows() {
            return Err(Error::invalid(format!(
                "response has {} samples, design has {} rows",
                y.len(),
                design.nrows()
            )));
        }
        Ok(Self {
            design,
            confounds,
            y,
            basis,
            hrf_penalty: 0.0,
        })
    }

    pub fn with_hrf_penalty(mut self, weight: f64) -> Self {
        self.hrf_penalty = weight;
        self
    }

    pub fn num_conditions(&self) -> usize {
        self.design.num_conditions()
    }

    pub fn num_functions(&self) -> usize {
        self.design.functions_per_condition()
    }

    pub fn num_confounds(&self) -> usize {
        self.confounds.ncols()
    }

    fn check_params(&self, alpha: &DVector<f64>, beta: &DVector<f64>, w: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.num_functions() || beta.len() != self.num_conditions() || w.len() != self.num_confounds() {
            return Err(Error::invalid(format!(
                "parameter lengths ({}, {}, {}) do not match problem ({}, {}, {})",
                alpha.len(),
                beta.len(),
                w.len(),
                self.num_functions(),
                self.num_conditions(),
                self.num_confounds()
            )));
        }
        Ok(())
    }

    /// Residual `X_Q vec(alpha beta^T) + P w - y`.
    fn residual(&self, alpha: &[f64], beta: &[f64], w: &[f64]) -> DVector<f64> {
        let (t, p) = (alpha.len(), beta.len());
        let mut coef = DVector::zeros(t * p);
        for j in 0..p {
            for k in 0..t {
                coef[j * t + k] = alpha[k] * beta[j];
            }
        }
        let mut d = -self.y.clone();
        d.gemv(1.0, self.design.values(), &coef, 1.0);
        if !w.is_empty() {
            d.gemv(1.0, self.confounds, &DVector::from_column_slice(w), 1.0);
        }
        d
    }

    fn penalty_gram(&self) -> Option<DMatrix<f64>> {
        (self.hrf_penalty != 0.0).then(|| {
            let q = self.basis.samples();
            q.transpose() * q * self.hrf_penalty
        })
    }

    /// Objective and gradient over the stacked vector `[alpha; beta; w]`.
    fn evaluate(&self, x: &[f64], grad: &mut [f64], penalty: Option<&DMatrix<f64>>) -> f64 {
        let (t, p) = (self.num_functions(), self.num_conditions());
        let (alpha, rest) = x.split_at(t);
        let (beta, w) = rest.split_at(p);
        let d = self.residual(alpha, beta, w);
        let xtd = self.design.values().tr_mul(&d);
        let (g_alpha, rest) = grad.split_at_mut(t);
        let (g_beta, g_w) = rest.split_at_mut(p);
        for k in 0..t {
            g_alpha[k] = (0..p).map(|j| xtd[j * t + k] * beta[j]).sum();
        }
        for j in 0..p {
            g_beta[j] = (0..t).map(|k| xtd[j * t + k] * alpha[k]).sum();
        }
        if !g_w.is_empty() {
            let ptd = self.confounds.tr_mul(&d);
            g_w.copy_from_slice(ptd.as_slice());
        }
        let mut f = 0.5 * d.norm_squared();
        if let Some(gram) = penalty {
            let a = DVector::from_column_slice(alpha);
            let ga = gram * &a;
            f += 0.5 * a.dot(&ga);
            for k in 0..t {
                g_alpha[k] += ga[k];
            }
        }
        f
    }
}

fn check_dimensions(design: &DesignMatrix, confounds: &DMatrix<f64>, basis: &HrfBasis) -> Result<()> {
    if confounds.nrows() != design.nrows() {
        return Err(Error::invalid(format!(
            "confounds have {} rows, design has {}",
            confounds.nrows(),
            design.nrows()
        )));
    }
    if design.functions_per_condition() != basis.num_functions() {
        return Err(Error::invalid(format!(
            "design has {} functions per condition, basis has {}",
            design.functions_per_condition(),
            basis.num_functions()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub w: DVector<f64>,
}

/// Value of the (penalized) least-squares objective.
pub fn objective(problem: &RankOneProblem<'_>, alpha: &DVector<f64>, beta: &DVector<f64>, w: &DVector<f64>) -> Result<f64> {
    problem.check_params(alpha, beta, w)?;
    let d = problem.residual(alpha.as_slice(), beta.as_slice(), w.as_slice());
    let mut f = 0.5 * d.norm_squared();
    if problem.hrf_penalty != 0.0 {
        f += 0.5 * problem.hrf_penalty * problem.basis.hrf(alpha).norm_squared();
    }
    Ok(f)
}

/// Analytic gradient of [`objective`] with respect to `alpha`, `beta`, `w`.
pub fn gradient(problem: &RankOneProblem<'_>, alpha: &DVector<f64>, beta: &DVector<f64>, w: &DVector<f64>) -> Result<Gradient> {
    problem.check_params(alpha, beta, w)?;
    let (t, p) = (alpha.len(), beta.len());
    let x = stack(alpha, beta, w);
    let mut g = vec![0.0; x.len()];
    problem.evaluate(&x, &mut g, problem.penalty_gram().as_ref());
    Ok(Gradient {
        alpha: DVector::from_column_slice(&g[..t]),
        beta: DVector::from_column_slice(&g[t..t + p]),
        w: DVector::from_column_slice(&g[t + p..]),
    })
}

fn stack(alpha: &DVector<f64>, beta: &DVector<f64>, w: &DVector<f64>) -> Vec<f64> {
    alpha.iter().chain(beta.iter()).chain(w.iter()).copied().collect()
}

/// Parameters of a rank-one model.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneParams {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub w: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct RankOneFit {
    pub alpha: DVector<f64>,
    /// Sampled HRF `Q alpha`, scaled so its largest-magnitude sample is +1.
    pub h: DVector<f64>,
    pub beta: DVector<f64>,
    pub w: DVector<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The response was constant; `beta` is zero and `h` the canonical projection.
    pub degenerate: bool,
    /// Objective after each accepted iteration.
    pub trace: Vec<f64>,
}

/// Resolve the `(c h, beta / c)` ambiguity: scale `h` so that its
/// largest-magnitude sample is exactly +1 and compensate in `beta`.
pub fn normalize_fit(h: &DVector<f64>, beta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let s = peak_sample(h)?;
    Ok((h / s, beta * s))
}

fn peak_sample(h: &DVector<f64>) -> Result<f64> {
    let s = h
        .iter()
        .copied()
        .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
    if s == 0.0 || !s.is_finite() {
        return Err(Error::DegenerateFit("HRF is identically zero".into()));
    }
    Ok(s)
}

/// Fits many voxels that share a design, confounds and basis. The
/// canonical-HRF GLM used for initialization is factored once.
#[derive(Debug, Clone)]
pub struct RankOneSolver<'a> {
    design: &'a DesignMatrix,
    confounds: &'a DMatrix<f64>,
    basis: &'a HrfBasis,
    options: SolverOptions,
    init_alpha: DVector<f64>,
    init_glm: Option<GlmSolver>,
    confound_glm: Option<GlmSolver>,
}

impl<'a> RankOneSolver<'a> {
    pub fn new(
        design: &'a DesignMatrix,
        confounds: &'a DMatrix<f64>,
        basis: &'a HrfBasis,
        options: SolverOptions,
    ) -> Result<Self> {
        check_dimensions(design, confounds, basis)?;
        let init_alpha = basis.canonical_coefficients()?;
        let x_h = design.collapse(&init_alpha);
        // falls back to a ridge start when the canonical design is singular
        let init_glm = GlmSolver::new(&x_h, confounds).ok();
        let confound_glm = if confounds.ncols() > 0 {
            GlmSolver::new(&DMatrix::zeros(design.nrows(), 0), confounds).ok()
        } else {
            None
        };
        Ok(Self {
            design,
            confounds,
            basis,
            options,
            init_alpha,
            init_glm,
            confound_glm,
        })
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    /// Starting point: canonical-GLM activations, canonical HRF coefficients,
    /// and the least-squares confound fit on the remaining residual.
    pub fn initial_params(&self, y: &DVector<f64>) -> Result<RankOneParams> {
        let alpha = self.init_alpha.clone();
        let beta = match &self.init_glm {
            Some(glm) => glm.solve(y)?.beta,
            None => self.ridge_start(y, &alpha),
        };
        let x_h = self.design.collapse(&alpha);
        let remainder = y - &x_h * &beta;
        let w = self.confound_fit(&remainder)?;
        Ok(RankOneParams { alpha, beta, w })
    }

    fn ridge_start(&self, y: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
        let x_h = self.design.collapse(alpha);
        let mut gram = x_h.transpose() * &x_h;
        let lambda = 1e-8 * gram.trace().max(1.0);
        for i in 0..gram.nrows() {
            gram[(i, i)] += lambda;
        }
        let rhs = x_h.tr_mul(y);
        gram.cholesky()
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(x_h.ncols()))
    }

    fn confound_fit(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.confound_glm {
            Some(glm) => Ok(glm.solve(y)?.w),
            None if self.confounds.ncols() == 0 => Ok(DVector::zeros(0)),
            None => {
                let svd = self.confounds.clone().svd(true, true);
                let eps = 1e-12 * svd.singular_values.max();
                svd.solve(y, eps).map_err(|e| Error::invalid(e.to_string()))
            }
        }
    }

    /// Fit one voxel from the default starting point.
    pub fn fit(&self, y: &DVector<f64>) -> Result<RankOneFit> {
        let problem = self.problem(y)?;
        if is_constant(y) {
            return self.degenerate_fit(&problem);
        }
        let init = self.initial_params(y)?;
        self.run(&problem, &init)
    }

    /// Fit one voxel from a caller-supplied starting point.
    pub fn fit_from(&self, y: &DVector<f64>, init: &RankOneParams) -> Result<RankOneFit> {
        let problem = self.problem(y)?;
        problem.check_params(&init.alpha, &init.beta, &init.w)?;
        self.run(&problem, init)
    }

    fn problem<'y>(&self, y: &'y DVector<f64>) -> Result<RankOneProblem<'y>>
    where
        'a: 'y,
    {
        Ok(RankOneProblem::new(self.design, self.confounds, y, self.basis)?.with_hrf_penalty(self.options.hrf_penalty))
    }

    fn degenerate_fit(&self, problem: &RankOneProblem<'_>) -> Result<RankOneFit> {
        let alpha = self.init_alpha.clone();
        let beta = DVector::zeros(problem.num_conditions());
        let w = self.confound_fit(problem.y)?;
        self.finish(problem, alpha, beta, w, 0, true, Vec::new(), true)
    }

    fn run(&self, problem: &RankOneProblem<'_>, init: &RankOneParams) -> Result<RankOneFit> {
        let penalty = problem.penalty_gram();
        let x0 = stack(&init.alpha, &init.beta, &init.w);
        let res = lbfgs::minimize(
            |x, g| problem.evaluate(x, g, penalty.as_ref()),
            &x0,
            &self.options.lbfgs(),
        )?;
        let (t, p) = (problem.num_functions(), problem.num_conditions());
        let alpha = DVector::from_column_slice(&res.x[..t]);
        let beta = DVector::from_column_slice(&res.x[t..t + p]);
        let w = DVector::from_column_slice(&res.x[t + p..]);
        let converged = res.termination == Termination::Converged;
        self.finish(problem, alpha, beta, w, res.iterations, converged, res.trace, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        problem: &RankOneProblem<'_>,
        alpha: DVector<f64>,
        beta: DVector<f64>,
        w: DVector<f64>,
        iterations: usize,
        converged: bool,
        trace: Vec<f64>,
        degenerate: bool,
    ) -> Result<RankOneFit> {
        let h_raw = self.basis.hrf(&alpha);
        let s = peak_sample(&h_raw)?;
        let alpha = alpha / s;
        let beta = beta * s;
        let h = h_raw / s;
        let objective = objective(problem, &alpha, &beta, &w)?;
        let g = gradient(problem, &alpha, &beta, &w)?;
        let grad_norm = g.alpha.amax().max(g.beta.amax()).max(if g.w.is_empty() { 0.0 } else { g.w.amax() });
        Ok(RankOneFit {
            alpha,
            h,
            beta,
            w,
            objective,
            grad_norm,
            iterations,
            converged,
            degenerate,
            trace,
        })
    }
}

fn is_constant(y: &DVector<f64>) -> bool {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var <= 1e-24 * (mean * mean).max(f64::MIN_POSITIVE)
}

/// Fit a single voxel: L-BFGS over `[alpha; beta; w]` from the canonical
/// GLM starting point, followed by [`normalize_fit`].
pub fn fit_voxel(problem: &RankOneProblem<'_>, options: &SolverOptions) -> Result<RankOneFit> {
    let solver = RankOneSolver::new(problem.design, problem.confounds, problem.basis, *options)?;
    solver.fit(problem.y)
}
