//! Event tables and the lag-expanded design matrices.
//!
//! Columns of every design produced here are ordered condition-major:
//! column `condition * t + k` holds lag (or basis function) `k` of
//! `condition`, so that `X * vec(h beta^T) = X_h * beta` with `vec` stacking
//! the `t x p` coefficient matrix column by column. Use [`column_index`]
//! rather than re-deriving the layout.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hrf_basis::{sample_basis_at_offset, HrfBasis};

/// Position of lag/function `k` of `condition` in a design with `t`
/// functions per condition.
#[inline]
pub const fn column_index(condition: usize, k: usize, t: usize) -> usize {
    condition * t + k
}

/// Onsets closer than this (relative to TR) to a grid line count as on-grid.
const GRID_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub onset: f64,
    pub condition: usize,
}

/// Impulse events of one session, sorted by onset.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTable {
    events: Vec<Event>,
    num_conditions: usize,
    session_id: String,
}

impl EventTable {
    /// Build a table with `num_conditions` conditions. Events are sorted by
    /// onset (stable, so ties keep input order).
    pub fn new(mut events: Vec<Event>, num_conditions: usize, session_id: impl Into<String>) -> Result<Self> {
        for e in &events {
            if !e.onset.is_finite() || e.onset < 0.0 {
                return Err(Error::invalid(format!("event onset {} must be finite and non-negative", e.onset)));
            }
            if e.condition >= num_conditions {
                return Err(Error::invalid(format!(
                    "condition {} outside [0, {num_conditions})",
                    e.condition
                )));
            }
        }
        events.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        Ok(Self {
            events,
            num_conditions,
            session_id: session_id.into(),
        })
    }

    /// Like [`EventTable::new`] with the condition count taken as `max id + 1`.
    pub fn from_events(events: Vec<Event>, session_id: impl Into<String>) -> Result<Self> {
        let p = events.iter().map(|e| e.condition + 1).max().unwrap_or(0);
        Self::new(events, p, session_id)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn num_conditions(&self) -> usize {
        self.num_conditions
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn check_within(&self, n: usize, tr: f64) -> Result<()> {
        let end = n as f64 * tr;
        if let Some(e) = self.events.iter().find(|e| e.onset >= end) {
            return Err(Error::OutOfRange(format!(
                "event at {} s is beyond the session end ({n} scans x {tr} s = {end} s)",
                e.onset
            )));
        }
        Ok(())
    }
}

/// Dense `n x (p*t)` design with condition-major column ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    num_conditions: usize,
    functions_per_condition: usize,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, num_conditions: usize, functions_per_condition: usize) -> Result<Self> {
        if values.ncols() != num_conditions * functions_per_condition {
            return Err(Error::invalid(format!(
                "design has {} columns, expected {num_conditions} x {functions_per_condition}",
                values.ncols()
            )));
        }
        Ok(Self {
            values,
            num_conditions,
            functions_per_condition,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_conditions(&self) -> usize {
        self.num_conditions
    }

    pub fn functions_per_condition(&self) -> usize {
        self.functions_per_condition
    }

    /// `X * vec(coef)` for a `t x p` coefficient matrix.
    pub fn apply(&self, coef: &DMatrix<f64>) -> DVector<f64> {
        debug_assert_eq!(coef.shape(), (self.functions_per_condition, self.num_conditions));
        let flat = DVector::from_column_slice(coef.as_slice());
        &self.values * flat
    }

    /// Collapse the lag/function axis with fixed weights: the `n x p` matrix
    /// `X (I_p (x) alpha)`. With `alpha` = HRF coefficients this is the
    /// fixed-HRF design `X_h`.
    pub fn collapse(&self, alpha: &DVector<f64>) -> DMatrix<f64> {
        let t = self.functions_per_condition;
        assert_eq!(alpha.len(), t, "coefficient length must equal functions per condition");
        let n = self.nrows();
        let mut out = DMatrix::zeros(n, self.num_conditions);
        for j in 0..self.num_conditions {
            let mut col = out.column_mut(j);
            for k in 0..t {
                col.axpy(alpha[k], &self.values.column(column_index(j, k, t)), 1.0);
            }
        }
        out
    }

    /// Row-scaled copy, e.g. after pre-whitening with `map` applied per column.
    pub fn map_columns(&self, mut map: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let n = self.nrows();
        let mut values = DMatrix::zeros(n, self.values.ncols());
        for c in 0..self.values.ncols() {
            let col: Vec<f64> = self.values.column(c).iter().copied().collect();
            values.column_mut(c).copy_from_slice(&map(&col));
        }
        Self { values, ..*self }
    }

    /// Stack session designs on top of each other.
    pub fn vstack(parts: &[DesignMatrix]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("no designs to stack"))?;
        let (p, t) = (first.num_conditions, first.functions_per_condition);
        if parts.iter().any(|d| d.num_conditions != p || d.functions_per_condition != t) {
            return Err(Error::invalid("stacked designs must share condition and function counts"));
        }
        let n: usize = parts.iter().map(|d| d.nrows()).sum();
        let mut values = DMatrix::zeros(n, p * t);
        let mut row = 0;
        for d in parts {
            values.rows_mut(row, d.nrows()).copy_from(&d.values);
            row += d.nrows();
        }
        Ok(Self {
            values,
            num_conditions: p,
            functions_per_condition: t,
        })
    }
}

/// Round to nearest, ties toward +inf.
fn nearest_index(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Binary `(n*oversample) x p` stimulus matrix on a grid of spacing
/// `TR / oversample`; each onset is moved to the closest grid row.
pub fn build_stimulus_matrix(events: &EventTable, n: usize, tr: f64, oversample: usize) -> Result<DMatrix<f64>> {
    if oversample == 0 {
        return Err(Error::invalid("oversampling factor must be at least 1"));
    }
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::invalid(format!("TR must be positive, got {tr}")));
    }
    events.check_within(n, tr)?;
    let rows = n * oversample;
    let dt = tr / oversample as f64;
    let mut v = DMatrix::zeros(rows, events.num_conditions());
    for e in events.events() {
        // an onset just below n*TR can round onto the row past the end
        let i = nearest_index(e.onset / dt).min(rows - 1);
        v[(i, e.condition)] = 1.0;
    }
    Ok(v)
}

/// Shift `x` down by `k` places, filling with zeros.
pub fn lower_shift(x: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if k >= n {
        return Err(Error::invalid(format!("shift {k} must be smaller than length {n}")));
    }
    let mut out = vec![0.0; n];
    out[k..].copy_from_slice(&x[..n - k]);
    Ok(out)
}

/// FIR design: column `j*r + k` is stimulus column `j` delayed by `k` scans.
pub fn build_fir_design(v: &DMatrix<f64>, r: usize) -> Result<DesignMatrix> {
    let (n, p) = v.shape();
    if r == 0 || r > n {
        return Err(Error::invalid(format!("FIR length {r} must be in [1, {n}]")));
    }
    let mut x = DMatrix::zeros(n, p * r);
    for j in 0..p {
        for i in (0..n).filter(|&i| v[(i, j)] != 0.0) {
            for k in 0..r.min(n - i) {
                x[(i + k, column_index(j, k, r))] += v[(i, j)];
            }
        }
    }
    DesignMatrix::new(x, p, r)
}

/// Basis-projected design: column `j*t + k` is the convolution of stimulus
/// column `j` with basis function `k`, truncated to `n` rows.
pub fn build_basis_design(v: &DMatrix<f64>, basis: &HrfBasis) -> Result<DesignMatrix> {
    let (n, p) = v.shape();
    let q = basis.samples();
    let (r, t) = q.shape();
    if r > n {
        return Err(Error::invalid(format!("basis duration {r} exceeds session length {n}")));
    }
    let mut x = DMatrix::zeros(n, p * t);
    for j in 0..p {
        for i in (0..n).filter(|&i| v[(i, j)] != 0.0) {
            let amp = v[(i, j)];
            let span = r.min(n - i);
            for k in 0..t {
                let mut col = x.column_mut(column_index(j, k, t));
                for l in 0..span {
                    col[i + l] += amp * q[(l, k)];
                }
            }
        }
    }
    DesignMatrix::new(x, p, t)
}

/// Design for off-grid onsets: each event contributes the basis sampled at
/// its own sub-TR offset, starting at the scan on or before the onset.
/// Contributions of events of one condition add up.
pub fn build_async_design(events: &EventTable, basis: &HrfBasis, n: usize, tr: f64) -> Result<DesignMatrix> {
    if basis.continuous().is_none() {
        return Err(Error::Unsupported(format!(
            "{:?} basis has no continuous form; asynchronous designs need one",
            basis.kind()
        )));
    }
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::invalid(format!("TR must be positive, got {tr}")));
    }
    events.check_within(n, tr)?;
    let r = basis.duration();
    if r > n {
        return Err(Error::invalid(format!("basis duration {r} exceeds session length {n}")));
    }
    let t = basis.num_functions();
    let mut x = DMatrix::zeros(n, events.num_conditions() * t);
    for e in events.events() {
        let (scan, offset) = split_onset(e.onset, tr);
        if scan >= n {
            continue;
        }
        let block = sample_basis_at_offset(basis, offset, r, tr)?;
        let span = r.min(n - scan);
        for k in 0..t {
            let mut col = x.column_mut(column_index(e.condition, k, t));
            for l in 0..span {
                col[scan + l] += block[(l, k)];
            }
        }
    }
    DesignMatrix::new(x, events.num_conditions(), t)
}

/// Base scan and sub-TR offset of an onset; onsets within rounding error of
/// a grid line land exactly on it.
fn split_onset(onset: f64, tr: f64) -> (usize, f64) {
    let pos = onset / tr;
    let nearest = pos.round();
    if (pos - nearest).abs() < GRID_SNAP {
        return (nearest as usize, 0.0);
    }
    let scan = pos.floor();
    let offset = (onset - scan * tr).clamp(0.0, tr * (1.0 - f64::EPSILON));
    (scan as usize, offset)
}

/// Fixed-HRF design `X_h`: each stimulus column convolved with `h` and
/// truncated to `n` rows.
pub fn convolve_design(v: &DMatrix<f64>, h: &[f64]) -> Result<DMatrix<f64>> {
    let (n, p) = v.shape();
    let r = h.len();
    if r == 0 || r > n {
        return Err(Error::invalid(format!("HRF length {r} must be in [1, {n}]")));
    }
    let mut x = DMatrix::zeros(n, p);
    for j in 0..p {
        for i in (0..n).filter(|&i| v[(i, j)] != 0.0) {
            let amp = v[(i, j)];
            for l in 0..r.min(n - i) {
                x[(i + l, j)] += amp * h[l];
            }
        }
    }
    Ok(x)
}

/// Keep every `factor`-th row, mapping a fine-grid design back onto scans.
pub fn decimate_rows(design: &DesignMatrix, factor: usize) -> Result<DesignMatrix> {
    if factor == 0 {
        return Err(Error::invalid("decimation factor must be at least 1"));
    }
    let n = design.nrows().div_ceil(factor);
    let values = DMatrix::from_fn(n, design.values.ncols(), |i, c| design.values[(i * factor, c)]);
    DesignMatrix::new(values, design.num_conditions, design.functions_per_condition)
}

/// Session design for `basis` at scan resolution.
///
/// With `oversample == 1` and a synchronous schedule the events are gridded
/// onto scans; with `oversample > 1` the basis must be sampled at
/// `TR / oversample` and the fine-grid design is decimated back to scans.
/// `asynchronous` uses exact per-event offsets (continuous bases only).
pub fn build_session_design(
    events: &EventTable,
    basis: &HrfBasis,
    n: usize,
    tr: f64,
    oversample: usize,
    asynchronous: bool,
) -> Result<DesignMatrix> {
    if asynchronous {
        return build_async_design(events, basis, n, tr);
    }
    let v = build_stimulus_matrix(events, n, tr, oversample)?;
    let fine = build_basis_design(&v, basis)?;
    if oversample == 1 {
        Ok(fine)
    } else {
        decimate_rows(&fine, oversample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hrf_basis::{canonical_basis, fir_basis, glover_hrf};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(events: &[(f64, usize)], p: usize) -> EventTable {
        EventTable::new(
            events.iter().map(|&(onset, condition)| Event { onset, condition }).collect(),
            p,
            "s",
        )
        .unwrap()
    }

    fn random_stimulus(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| if rng.random::<f64>() < 0.15 { 1.0 } else { 0.0 })
    }

    /// Per-condition convolution written out longhand.
    fn naive_convolution(v: &DMatrix<f64>, h: &[f64]) -> DMatrix<f64> {
        let (n, p) = v.shape();
        DMatrix::from_fn(n, p, |i, j| {
            (0..h.len()).filter(|&l| l <= i).map(|l| h[l] * v[(i - l, j)]).sum()
        })
    }

    #[test]
    fn stimulus_matrix_rounding() {
        let v = build_stimulus_matrix(&table(&[(0.0, 0)], 1), 5, 1.0, 1).unwrap();
        assert_eq!(v.column(0).as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0]);

        let v = build_stimulus_matrix(&table(&[(2.3, 0)], 1), 5, 1.0, 1).unwrap();
        assert_eq!(v[(2, 0)], 1.0);
        assert_eq!(v.sum(), 1.0);

        let v = build_stimulus_matrix(&table(&[(2.3, 0)], 1), 5, 1.0, 3).unwrap();
        assert_eq!(v.nrows(), 15);
        assert_eq!(v[(7, 0)], 1.0);
        assert_eq!(v.sum(), 1.0);

        // ties go up
        let v = build_stimulus_matrix(&table(&[(2.5, 0)], 1), 5, 1.0, 1).unwrap();
        assert_eq!(v[(3, 0)], 1.0);

        // two events on the same row stay binary
        let v = build_stimulus_matrix(&table(&[(1.9, 0), (2.1, 0)], 1), 5, 1.0, 1).unwrap();
        assert_eq!(v[(2, 0)], 1.0);
    }

    #[test]
    fn stimulus_matrix_errors() {
        assert!(matches!(
            build_stimulus_matrix(&table(&[(5.0, 0)], 1), 5, 1.0, 1),
            Err(Error::OutOfRange(_))
        ));
        assert!(EventTable::new(vec![Event { onset: -1.0, condition: 0 }], 1, "s").is_err());
        assert!(EventTable::new(vec![Event { onset: 1.0, condition: 3 }], 2, "s").is_err());
    }

    #[test]
    fn lower_shift_cases() {
        assert_eq!(lower_shift(&[1.0, 2.0, 3.0, 4.0], 0).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(lower_shift(&[1.0, 2.0, 3.0, 4.0], 1).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(lower_shift(&[1.0, 0.0, 0.0, 0.0], 3).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert!(lower_shift(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn fir_design_single_event_layout() {
        let v = build_stimulus_matrix(&table(&[(0.0, 0)], 1), 5, 1.0, 1).unwrap();
        let x = build_fir_design(&v, 3).unwrap();
        let expected = DMatrix::from_row_slice(
            5,
            3,
            &[
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, //
                0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0,
            ],
        );
        assert_eq!(x.values(), &expected);
        assert!(build_fir_design(&v, 6).is_err());
    }

    #[test]
    fn fir_design_columns_are_shifted_stimuli() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_stimulus(&mut rng, 30, 3);
        let x = build_fir_design(&v, 7).unwrap();
        for j in 0..3 {
            let vj: Vec<f64> = v.column(j).iter().copied().collect();
            for k in 0..7 {
                let col: Vec<f64> = x.values().column(column_index(j, k, 7)).iter().copied().collect();
                assert_eq!(col, lower_shift(&vj, k).unwrap());
            }
        }
    }

    #[test]
    fn empty_schedule_gives_zero_design() {
        let v = build_stimulus_matrix(&table(&[], 2), 10, 1.0, 1).unwrap();
        let x = build_fir_design(&v, 4).unwrap();
        assert_eq!(x.values().shape(), (10, 8));
        assert!(x.values().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn factorization_identity_against_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(12..=64);
            let p = rng.random_range(1..=5);
            let r = rng.random_range(1..=12);
            let v = random_stimulus(&mut rng, n, p);
            let h: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
            let beta = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
            let x = build_fir_design(&v, r).unwrap();
            let coef = DVector::from_vec(h.clone()) * beta.transpose();
            let lhs = x.apply(&coef);
            let rhs = naive_convolution(&v, &h) * &beta;
            let scale = rhs.amax().max(1.0);
            assert!((lhs - rhs).amax() <= 1e-12 * scale);
        }
    }

    #[test]
    fn basis_design_equals_fir_times_kron() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(20..=60);
            let p = rng.random_range(1..=4);
            let r = rng.random_range(2..=12);
            let t = rng.random_range(1..=r);
            let v = random_stimulus(&mut rng, n, p);
            let q = DMatrix::from_fn(r, t, |_, _| rng.random_range(-1.0..1.0));
            let basis = HrfBasis::from_samples(q.clone(), 1.0).unwrap();
            let xq = build_basis_design(&v, &basis).unwrap();
            let xf = build_fir_design(&v, r).unwrap();
            // X_fir (I_p (x) Q), assembled block by block
            let mut kron = DMatrix::zeros(p * r, p * t);
            for j in 0..p {
                kron.view_mut((j * r, j * t), (r, t)).copy_from(&q);
            }
            let expected = xf.values() * kron;
            assert!((xq.values() - &expected).amax() <= 1e-12);

            let alpha = DVector::from_fn(t, |_, _| rng.random_range(-1.0..1.0));
            let beta = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let lhs = xq.apply(&(&alpha * beta.transpose()));
            let rhs = xf.apply(&(&q * &alpha * beta.transpose()));
            assert!((lhs - rhs).amax() <= 1e-12);
        }
    }

    #[test]
    fn fir_basis_design_is_fir_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for r in [1, 3, 8] {
            let v = random_stimulus(&mut rng, 25, 3);
            let a = build_basis_design(&v, &fir_basis(r).unwrap()).unwrap();
            let b = build_fir_design(&v, r).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn canonical_only_design_is_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = random_stimulus(&mut rng, 50, 2);
        let basis = canonical_basis(20, 1.0, 0).unwrap();
        let x = build_basis_design(&v, &basis).unwrap();
        let h: Vec<f64> = basis.samples().column(0).iter().copied().collect();
        assert!((x.values() - naive_convolution(&v, &h)).amax() <= 1e-12);
    }

    #[test]
    fn convolve_design_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_stimulus(&mut rng, 40, 3);
        let mut impulse = vec![0.0; 5];
        impulse[0] = 1.0;
        assert_eq!(convolve_design(&v, &impulse).unwrap(), v);

        let single = build_stimulus_matrix(&table(&[(0.0, 0)], 1), 8, 1.0, 1).unwrap();
        let h = [0.5, 1.0, 0.25];
        let xh = convolve_design(&single, &h).unwrap();
        assert_eq!(xh.column(0).as_slice(), &[0.5, 1.0, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let h: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xh = convolve_design(&v, &h).unwrap();
        let xf = build_fir_design(&v, 6).unwrap();
        for j in 0..3 {
            let mut coef = DMatrix::zeros(6, 3);
            coef.column_mut(j).copy_from_slice(&h);
            let col = xf.apply(&coef);
            assert!((col - xh.column(j)).amax() <= 1e-12);
        }
        assert!(convolve_design(&v, &vec![1.0; 41]).is_err());
    }

    #[test]
    fn collapse_matches_convolution_with_basis_hrf() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_stimulus(&mut rng, 60, 4);
        let basis = canonical_basis(16, 1.0, 2).unwrap();
        let alpha = DVector::from_vec(vec![1.0, 0.3, -0.2]);
        let xq = build_basis_design(&v, &basis).unwrap();
        let h: Vec<f64> = basis.hrf(&alpha).iter().copied().collect();
        assert!((xq.collapse(&alpha) - convolve_design(&v, &h).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn async_on_grid_matches_sync() {
        let basis = canonical_basis(12, 2.4, 3).unwrap();
        let events = table(&[(0.0, 0), (7.2, 1), (14.4, 0), (31.2, 2), (50.4, 1)], 3);
        let v = build_stimulus_matrix(&events, 40, 2.4, 1).unwrap();
        let sync = build_basis_design(&v, &basis).unwrap();
        let asynch = build_async_design(&events, &basis, 40, 2.4).unwrap();
        assert!((sync.values() - asynch.values()).amax() <= 1e-12);
    }

    #[test]
    fn async_single_offset_event() {
        let basis = canonical_basis(10, 2.4, 0).unwrap();
        let events = table(&[(1.2, 0)], 1);
        let x = build_async_design(&events, &basis, 20, 2.4).unwrap();
        for i in 0..20 {
            let expected = if i < 10 { glover_hrf(i as f64 * 2.4 - 1.2).unwrap() } else { 0.0 };
            assert!((x.values()[(i, 0)] - expected).abs() < 1e-15, "row {i}");
        }
        assert_eq!(x.values()[(0, 0)], 0.0);
    }

    #[test]
    fn async_overlapping_events_sum() {
        let basis = canonical_basis(14, 2.4, 1).unwrap();
        let both = build_async_design(&table(&[(0.0, 0), (8.0, 0)], 1), &basis, 30, 2.4).unwrap();
        let a = build_async_design(&table(&[(0.0, 0)], 1), &basis, 30, 2.4).unwrap();
        let b = build_async_design(&table(&[(8.0, 0)], 1), &basis, 30, 2.4).unwrap();
        assert!((both.values() - (a.values() + b.values())).amax() < 1e-15);
    }

    #[test]
    fn async_rejects_fir_and_late_events() {
        let events = table(&[(1.0, 0)], 1);
        assert!(matches!(
            build_async_design(&events, &fir_basis(4).unwrap(), 10, 1.0),
            Err(Error::Unsupported(_))
        ));
        let basis = canonical_basis(5, 1.0, 0).unwrap();
        assert!(matches!(
            build_async_design(&table(&[(12.0, 0)], 1), &basis, 10, 1.0),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn oversampled_design_decimates_fine_grid() {
        let fine_basis = canonical_basis(30, 0.8, 0).unwrap();
        let events = table(&[(0.0, 0), (9.6, 0)], 1);
        let d = build_session_design(&events, &fine_basis, 20, 2.4, 3, false).unwrap();
        assert_eq!(d.nrows(), 20);
        for i in 0..20 {
            let t = i as f64 * 2.4;
            let expected: f64 = [0.0, 9.6]
                .iter()
                .map(|&o| if t - o < 30.0 * 0.8 - 1e-9 { glover_hrf(t - o).unwrap() } else { 0.0 })
                .sum();
            assert!((d.values()[(i, 0)] - expected).abs() < 1e-12, "row {i}");
        }
    }
}
