//! Fixed-HRF general linear model: least-squares activations and the
//! held-out likelihood used to compare HRF estimates.

use nalgebra::{DMatrix, DVector};

use crate::design::{build_stimulus_matrix, convolve_design, EventTable};
use crate::error::{Error, Result};
use crate::noise::{estimate_ar1, residual_loglik, Ar1Model};

/// A column whose component orthogonal to the preceding columns is smaller
/// than this fraction of its norm is reported as dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub beta: DVector<f64>,
    pub w: DVector<f64>,
    pub residuals: DVector<f64>,
    pub sigma2: f64,
    pub rho: Option<f64>,
}

/// Householder QR of `[X_h P]`, reusable across voxels sharing a design.
#[derive(Debug, Clone)]
pub struct GlmSolver {
    design: DMatrix<f64>,
    qr: nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    r: DMatrix<f64>,
    p: usize,
    q: usize,
}

impl GlmSolver {
    pub fn new(x_h: &DMatrix<f64>, confounds: &DMatrix<f64>) -> Result<Self> {
        let n = x_h.nrows();
        if confounds.nrows() != n {
            return Err(Error::invalid(format!(
                "design has {n} rows but confounds have {}",
                confounds.nrows()
            )));
        }
        let (p, q) = (x_h.ncols(), confounds.ncols());
        if p + q == 0 {
            return Err(Error::invalid("GLM needs at least one regressor"));
        }
        if n < p + q {
            return Err(Error::InsufficientData(format!(
                "{n} scans cannot determine {} regressors",
                p + q
            )));
        }
        let mut design = DMatrix::zeros(n, p + q);
        design.columns_mut(0, p).copy_from(x_h);
        design.columns_mut(p, q).copy_from(confounds);

        let qr = design.clone().qr();
        let r = qr.r();
        let dependent: Vec<usize> = (0..p + q)
            .filter(|&j| {
                let norm = design.column(j).norm();
                norm == 0.0 || r[(j, j)].abs() <= RANK_TOLERANCE * norm
            })
            .collect();
        if !dependent.is_empty() {
            return Err(Error::RankDeficient { columns: dependent });
        }
        Ok(Self { design, qr, r, p, q })
    }

    pub fn solve(&self, y: &DVector<f64>) -> Result<GlmFit> {
        let n = self.design.nrows();
        if y.len() != n {
            return Err(Error::invalid(format!("response has {} samples, design has {n} rows", y.len())));
        }
        let m = self.p + self.q;
        let mut qty = y.clone();
        self.qr.q_tr_mul(&mut qty);
        let coef = self
            .r
            .view((0, 0), (m, m))
            .solve_upper_triangular(&qty.rows(0, m))
            .ok_or_else(|| Error::RankDeficient { columns: vec![] })?;
        let residuals = y - &self.design * &coef;
        let dof = (n - m).max(1) as f64;
        let sigma2 = residuals.norm_squared() / dof;
        Ok(GlmFit {
            beta: coef.rows(0, self.p).into_owned(),
            w: coef.rows(self.p, self.q).into_owned(),
            residuals,
            sigma2,
            rho: None,
        })
    }
}

/// Ordinary least squares of `y` on `[X_h P]`.
pub fn fit_glm(y: &DVector<f64>, x_h: &DMatrix<f64>, confounds: &DMatrix<f64>) -> Result<GlmFit> {
    GlmSolver::new(x_h, confounds)?.solve(y)
}

/// Log-likelihood of a held-out session under a GLM whose HRF is `h`
/// (sampled every TR). Activations and confound weights are refit on the
/// held-out data; only the HRF is carried over.
pub fn heldout_loglik(
    y_test: &DVector<f64>,
    events_test: &EventTable,
    h: &[f64],
    confounds_test: &DMatrix<f64>,
    tr: f64,
    whiten: bool,
) -> Result<f64> {
    let v = build_stimulus_matrix(events_test, y_test.len(), tr, 1)?;
    let x_h = convolve_design(&v, h)?;
    heldout_loglik_with_design(y_test, &x_h, confounds_test, whiten)
}

/// [`heldout_loglik`] for a prebuilt fixed-HRF design.
pub fn heldout_loglik_with_design(
    y: &DVector<f64>,
    x_h: &DMatrix<f64>,
    confounds: &DMatrix<f64>,
    whiten: bool,
) -> Result<f64> {
    let solver = GlmSolver::new(x_h, confounds)?;
    solver_loglik(&solver, y, whiten)
}

pub(crate) fn solver_loglik(solver: &GlmSolver, y: &DVector<f64>, whiten: bool) -> Result<f64> {
    let fit = solver.solve(y)?;
    let scale = y.norm_squared().max(f64::MIN_POSITIVE);
    if fit.residuals.norm_squared() <= 1e-20 * scale {
        return Err(Error::DegenerateInput(
            "held-out residuals vanish; the likelihood is unbounded".into(),
        ));
    }
    let n = y.len();
    let resid = fit.residuals.as_slice();
    let model = if whiten {
        estimate_ar1(resid)?
    } else {
        Ar1Model::white(fit.sigma2, n)?
    };
    residual_loglik(resid, &model)
}
