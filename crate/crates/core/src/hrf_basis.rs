//! Canonical hemodynamic response, its derivative family, and the basis
//! matrices that constrain the HRF shape.
//!
//! The canonical response is the Glover difference of two gamma-shaped bumps,
//!
//! ```text
//! g(t) = (t/d1)^a1 exp(-(t - d1)/b1) - c (t/d2)^a2 exp(-(t - d2)/b2)
//! ```
//!
//! with `a1 = 6`, `b1 = 0.9`, `d1 = a1 b1`, `a2 = 12`, `b2 = 0.9`, `d2 = a2 b2`
//! and `c = 0.35`, rescaled so that its maximum is exactly 1. It is zero for
//! `t <= 0`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const A1: f64 = 6.0;
const B1: f64 = 0.9;
const D1: f64 = A1 * B1;
const A2: f64 = 12.0;
const B2: f64 = 0.9;
const D2: f64 = A2 * B2;
const UNDERSHOOT: f64 = 0.35;

/// Highest derivative order available in the canonical family.
pub const MAX_DERIVATIVES: usize = 5;

/// Relative singular-value floor below which basis columns count as dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// `d^k/dt^k [(t/d)^a exp(-(t-d)/b)]` for `t > 0`, by the Leibniz rule.
fn gamma_bump_derivative(k: usize, t: f64, a: f64, b: f64, d: f64) -> f64 {
    let base = (t / d).powf(a) * (-(t - d) / b).exp();
    if base == 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut binom = 1.0;
    let mut falling = 1.0;
    for i in 0..=k {
        let exp_part = (-1.0 / b).powi((k - i) as i32);
        sum += binom * falling * t.powi(-(i as i32)) * exp_part;
        // advance C(k, i) -> C(k, i+1) and a^(i) -> a^(i+1)
        binom = binom * (k - i) as f64 / (i + 1) as f64;
        falling *= a - i as f64;
    }
    base * sum
}

fn glover_unnormalized(k: usize, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    gamma_bump_derivative(k, t, A1, B1, D1) - UNDERSHOOT * gamma_bump_derivative(k, t, A2, B2, D2)
}

struct Peak {
    time: f64,
    value: f64,
}

fn peak() -> &'static Peak {
    static PEAK: OnceLock<Peak> = OnceLock::new();
    PEAK.get_or_init(|| {
        // g' changes sign exactly once on [3, 8]
        let (mut lo, mut hi) = (3.0_f64, 8.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if glover_unnormalized(1, mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let time = 0.5 * (lo + hi);
        Peak {
            time,
            value: glover_unnormalized(0, time),
        }
    })
}

/// Time (seconds) at which the canonical HRF attains its maximum.
pub fn glover_peak_time() -> f64 {
    peak().time
}

/// Peak-normalized canonical HRF at `t` seconds after the event.
pub fn glover_hrf(t: f64) -> Result<f64> {
    if !t.is_finite() {
        return Err(Error::invalid(format!("HRF evaluated at non-finite time {t}")));
    }
    Ok(glover_derivative(0, t))
}

/// `k`-th time derivative of the peak-normalized canonical HRF; 0 for `t <= 0`.
pub fn glover_derivative(k: usize, t: f64) -> f64 {
    let p = peak();
    if t.is_sign_negative() || t == 0.0 {
        return 0.0;
    }
    if t == p.time && k == 0 {
        return 1.0;
    }
    glover_unnormalized(k, t) / p.value
}

/// Closed-form description of a basis that can be evaluated off the sampling grid.
///
/// Column `k` is `scales[k] * g^(k)(t + shift)` for `t >= 0` and zero before,
/// where `g` is the peak-normalized canonical HRF.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousBasis {
    shift: f64,
    scales: Vec<f64>,
}

impl ContinuousBasis {
    /// The canonical HRF advanced by `shift` seconds (peak earlier when positive).
    pub fn shifted_canonical(shift: f64) -> Self {
        Self {
            shift,
            scales: vec![1.0],
        }
    }

    pub fn num_functions(&self) -> usize {
        self.scales.len()
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn evaluate(&self, k: usize, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        self.scales[k] * glover_derivative(k, t + self.shift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Fir,
    Canonical { num_derivatives: usize },
    Custom,
}

/// An `r x t` matrix whose columns span the admissible HRF shapes, sampled
/// every `dt` seconds.
#[derive(Debug, Clone)]
pub struct HrfBasis {
    kind: BasisKind,
    dt: f64,
    samples: DMatrix<f64>,
    continuous: Option<ContinuousBasis>,
}

impl HrfBasis {
    /// Wrap an arbitrary sampled basis. Columns must be linearly independent.
    pub fn from_samples(samples: DMatrix<f64>, dt: f64) -> Result<Self> {
        let basis = Self {
            kind: BasisKind::Custom,
            dt,
            samples,
            continuous: None,
        };
        basis.validate()?;
        Ok(basis)
    }

    /// A basis with a closed form, sampled at `0, dt, ..., (r-1) dt`.
    pub fn from_continuous(continuous: ContinuousBasis, r: usize, dt: f64) -> Result<Self> {
        let t = continuous.num_functions();
        let samples = DMatrix::from_fn(r, t, |i, k| continuous.evaluate(k, i as f64 * dt));
        let basis = Self {
            kind: BasisKind::Custom,
            dt,
            samples,
            continuous: Some(continuous),
        };
        basis.validate()?;
        Ok(basis)
    }

    fn validate(&self) -> Result<()> {
        let (r, t) = self.samples.shape();
        if r == 0 || t == 0 {
            return Err(Error::invalid("basis must have at least one row and one column"));
        }
        if t > r {
            return Err(Error::invalid(format!(
                "basis has more functions ({t}) than samples ({r})"
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("sampling interval must be positive, got {}", self.dt)));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("basis contains non-finite samples"));
        }
        let sv = self.samples.clone().singular_values();
        let max = sv.max();
        let dependent: Vec<usize> = (0..t).filter(|&k| sv[k] <= RANK_TOLERANCE * max).collect();
        if max == 0.0 || !dependent.is_empty() {
            return Err(Error::RankDeficient {
                columns: if max == 0.0 { (0..t).collect() } else { dependent },
            });
        }
        Ok(())
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Number of samples `r` (HRF duration in scans).
    pub fn duration(&self) -> usize {
        self.samples.nrows()
    }

    /// Number of basis functions `t`.
    pub fn num_functions(&self) -> usize {
        self.samples.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn continuous(&self) -> Option<&ContinuousBasis> {
        self.continuous.as_ref()
    }

    /// Sampled HRF `Q alpha`.
    pub fn hrf(&self, alpha: &DVector<f64>) -> DVector<f64> {
        &self.samples * alpha
    }

    /// Least-squares coefficients of `h` in this basis.
    pub fn project(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        if h.len() != self.duration() {
            return Err(Error::invalid(format!(
                "cannot project a length-{} HRF onto a basis of duration {}",
                h.len(),
                self.duration()
            )));
        }
        let svd = self.samples.clone().svd(true, true);
        svd.solve(h, RANK_TOLERANCE * svd.singular_values.max())
            .map_err(|e| Error::invalid(e.to_string()))
    }

    /// The sampled canonical HRF projected onto this basis, the default HRF
    /// starting point for a fit.
    pub fn canonical_coefficients(&self) -> Result<DVector<f64>> {
        let h = DVector::from_fn(self.duration(), |i, _| glover_derivative(0, i as f64 * self.dt));
        self.project(&h)
    }
}

/// Canonical HRF followed by its first `num_derivatives` time derivatives,
/// sampled at `0, TR, ..., (r-1) TR`.
///
/// Column 0 keeps the peak normalization; derivative columns have unit
/// Euclidean norm on the grid. Columns are not orthogonalized.
pub fn canonical_basis(r: usize, tr: f64, num_derivatives: usize) -> Result<HrfBasis> {
    if num_derivatives > MAX_DERIVATIVES {
        return Err(Error::invalid(format!(
            "at most {MAX_DERIVATIVES} derivatives are supported, got {num_derivatives}"
        )));
    }
    if r == 0 {
        return Err(Error::invalid("basis duration must be at least one scan"));
    }
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::invalid(format!("TR must be positive, got {tr}")));
    }
    let mut scales = vec![1.0];
    for k in 1..=num_derivatives {
        let norm = (0..r)
            .map(|i| glover_derivative(k, i as f64 * tr).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::RankDeficient { columns: vec![k] });
        }
        scales.push(1.0 / norm);
    }
    let continuous = ContinuousBasis { shift: 0.0, scales };
    let mut basis = HrfBasis::from_continuous(continuous, r, tr)?;
    basis.kind = BasisKind::Canonical { num_derivatives };
    Ok(basis)
}

/// Identity basis: one free coefficient per lag.
pub fn fir_basis(r: usize) -> Result<HrfBasis> {
    fir_basis_with_dt(r, 1.0)
}

/// Identity basis with an explicit sampling interval, for reporting peak times.
pub fn fir_basis_with_dt(r: usize, dt: f64) -> Result<HrfBasis> {
    if r == 0 {
        return Err(Error::invalid("FIR basis needs at least one lag"));
    }
    Ok(HrfBasis {
        kind: BasisKind::Fir,
        dt,
        samples: DMatrix::identity(r, r),
        continuous: None,
    })
}

/// Evaluate each basis function at `i*TR - offset` for `i = 0..r`.
pub fn sample_basis_at_offset(basis: &HrfBasis, offset: f64, r: usize, tr: f64) -> Result<DMatrix<f64>> {
    let continuous = basis.continuous().ok_or_else(|| {
        Error::Unsupported(format!(
            "{:?} basis has no continuous form and cannot be sampled off-grid",
            basis.kind()
        ))
    })?;
    if !(0.0..tr).contains(&offset) {
        return Err(Error::invalid(format!("offset {offset} outside [0, {tr})")));
    }
    Ok(DMatrix::from_fn(r, continuous.num_functions(), |i, k| {
        continuous.evaluate(k, i as f64 * tr - offset)
    }))
}

/// Peak time of a sampled HRF in seconds, refined by fitting a parabola
/// through the largest sample and its neighbours.
pub fn peak_time(h: &[f64], dt: f64) -> f64 {
    let Some((imax, _)) = h
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
    else {
        return f64::NAN;
    };
    if imax == 0 || imax + 1 >= h.len() {
        return imax as f64 * dt;
    }
    let (l, c, r) = (h[imax - 1], h[imax], h[imax + 1]);
    let denom = l - 2.0 * c + r;
    let shift = if denom < 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
    (imax as f64 + shift) * dt
}
