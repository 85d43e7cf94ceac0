//! Synthetic BOLD data with known ground truth:
//! `y = X_h beta + P w + e`, with `e` a stationary AR(1) process.
//!
//! Randomness is drawn from ChaCha20 seeded with `SimSpec::seed`, one stream
//! per purpose, so every number depends only on (seed, session, voxel):
//!
//! * stream `(s + 1) << 32`: event schedule of session `s`
//! * stream `v + 1`: activations of voxel `v` (shared by all sessions)
//! * stream `(s + 1) << 32 | (v + 1)`: drift weights and noise of voxel `v` in session `s`

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::design::{build_async_design, build_stimulus_matrix, convolve_design, Event, EventTable};
use crate::error::{Error, Result};
use crate::hrf_basis::{glover_derivative, ContinuousBasis, HrfBasis};

pub const RNG_DESCRIPTION: &str = "ChaCha20 (rand_chacha), seed_from_u64(seed), stream = (session+1)<<32 | (voxel+1)";

/// Largest supported shift of the canonical HRF, in seconds.
pub const MAX_SHIFT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub enum TrueHrf {
    Canonical,
    /// Canonical HRF advanced by this many seconds (peak earlier when positive).
    Shifted(f64),
    /// Arbitrary HRF sampled at the TR, starting at lag 0.
    Sampled(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    /// Scans per session.
    pub n: usize,
    pub tr: f64,
    /// Number of conditions.
    pub p: usize,
    /// Inter-stimulus interval bounds, seconds.
    pub isi_range: (f64, f64),
    pub true_hrf: TrueHrf,
    /// HRF support in seconds for named HRFs.
    pub hrf_length: f64,
    /// Mean and sd of the per-condition activations.
    pub beta_distribution: (f64, f64),
    /// Highest Legendre order of the drift confounds (0 = intercept only).
    pub drift_order: usize,
    pub rho: f64,
    /// Innovation sd of the AR(1) noise.
    pub sigma: f64,
    /// When set, overrides `sigma` per voxel so that the marginal noise sd is
    /// `std(X_h beta) / snr`.
    pub snr: Option<f64>,
    pub seed: u64,
    pub sessions: usize,
    pub asynchronous: bool,
    pub voxels: usize,
    /// Fixed number of events per condition; `None` fills the session.
    pub events_per_condition: Option<usize>,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n: 300,
            tr: 1.0,
            p: 10,
            isi_range: (3.0, 6.0),
            true_hrf: TrueHrf::Canonical,
            hrf_length: 32.0,
            beta_distribution: (1.0, 0.5),
            drift_order: 3,
            rho: 0.0,
            sigma: 1.0,
            snr: None,
            seed: 0,
            sessions: 1,
            asynchronous: false,
            voxels: 1,
            events_per_condition: None,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.isi_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("isi_range must satisfy 0 < min <= max, got ({lo}, {hi})")));
        }
        if !(self.tr > 0.0 && self.tr.is_finite()) {
            return Err(Error::invalid(format!("TR must be positive, got {}", self.tr)));
        }
        if self.n < 2 || self.p == 0 || self.sessions == 0 || self.voxels == 0 {
            return Err(Error::invalid("n >= 2 and p, sessions, voxels >= 1 are required"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0 && snr.is_finite()) {
                return Err(Error::invalid(format!("snr must be positive, got {snr}")));
            }
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::invalid(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if self.beta_distribution.1 < 0.0 {
            return Err(Error::invalid("activation sd must be >= 0"));
        }
        if self.voxels as u64 >= u32::MAX as u64 || self.sessions as u64 >= u32::MAX as u64 {
            return Err(Error::invalid("voxel and session counts must fit in 32 bits"));
        }
        if self.asynchronous && matches!(self.true_hrf, TrueHrf::Sampled(_)) {
            return Err(Error::Unsupported("asynchronous onsets need a named true HRF".into()));
        }
        let r = self.hrf_samples()?.len();
        if r > self.n {
            return Err(Error::invalid(format!("HRF spans {r} scans, longer than the session ({})", self.n)));
        }
        if let Some(m) = self.events_per_condition {
            let requested = m * self.p;
            let max_feasible = self.max_events();
            if requested > max_feasible {
                return Err(Error::SpecInfeasible { requested, max_feasible });
            }
        }
        Ok(())
    }

    /// Most events that fit in a session even when every ISI is maximal.
    pub fn max_events(&self) -> usize {
        let last = (self.n - 1) as f64 * self.tr;
        (last / self.isi_range.1 + 1e-9).floor() as usize + 1
    }

    /// Number of scans covered by a named HRF.
    fn hrf_scans(&self) -> usize {
        ((self.hrf_length / self.tr).ceil() as usize).max(1)
    }

    /// True HRF sampled at the TR.
    pub fn hrf_samples(&self) -> Result<DVector<f64>> {
        match &self.true_hrf {
            TrueHrf::Canonical => shifted_canonical(0.0, self.hrf_scans(), self.tr),
            TrueHrf::Shifted(d) => shifted_canonical(*d, self.hrf_scans(), self.tr),
            TrueHrf::Sampled(h) => {
                if h.is_empty() || h.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("sampled HRF must be non-empty and finite"));
                }
                Ok(DVector::from_column_slice(h))
            }
        }
    }

    fn shift(&self) -> f64 {
        match self.true_hrf {
            TrueHrf::Shifted(d) => d,
            _ => 0.0,
        }
    }

    /// Parse the `key = value` text format (`#` starts a comment).
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("line {}", lineno + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&loc, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::format(&loc, format!("invalid {what} for `{key}`: `{value}`"));
            let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad("number"));
            let int = |v: &str| v.trim().parse::<usize>().map_err(|_| bad("integer"));
            let pair = |v: &str| -> Result<(f64, f64)> {
                let (a, b) = v.split_once(',').ok_or_else(|| bad("pair"))?;
                Ok((num(a)?, num(b)?))
            };
            match key {
                "n" => spec.n = int(value)?,
                "tr" | "TR" => spec.tr = num(value)?,
                "p" => spec.p = int(value)?,
                "isi_range" => spec.isi_range = pair(value)?,
                "true_hrf" => spec.true_hrf = parse_true_hrf(value).ok_or_else(|| bad("HRF"))?,
                "hrf_length" => spec.hrf_length = num(value)?,
                "beta_distribution" => spec.beta_distribution = pair(value)?,
                "drift_order" => spec.drift_order = int(value)?,
                "rho" => spec.rho = num(value)?,
                "sigma" => spec.sigma = num(value)?,
                "snr" => spec.snr = if value == "none" { None } else { Some(num(value)?) },
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
                "sessions" => spec.sessions = int(value)?,
                "asynchronous" => spec.asynchronous = value.parse().map_err(|_| bad("flag"))?,
                "voxels" => spec.voxels = int(value)?,
                "events_per_condition" => {
                    spec.events_per_condition = if value == "fill" { None } else { Some(int(value)?) }
                }
                _ => return Err(Error::format(&loc, format!("unknown key `{key}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Inverse of [`SimSpec::parse`].
    pub fn to_text(&self) -> String {
        let hrf = match &self.true_hrf {
            TrueHrf::Canonical => "canonical".to_string(),
            TrueHrf::Shifted(d) => format!("shifted:{d:?}"),
            TrueHrf::Sampled(h) => format!("sampled:{}", h.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")),
        };
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "tr = {:?}", self.tr);
        let _ = writeln!(s, "p = {}", self.p);
        let _ = writeln!(s, "isi_range = {:?}, {:?}", self.isi_range.0, self.isi_range.1);
        let _ = writeln!(s, "true_hrf = {hrf}");
        let _ = writeln!(s, "hrf_length = {:?}", self.hrf_length);
        let _ = writeln!(s, "beta_distribution = {:?}, {:?}", self.beta_distribution.0, self.beta_distribution.1);
        let _ = writeln!(s, "drift_order = {}", self.drift_order);
        let _ = writeln!(s, "rho = {:?}", self.rho);
        let _ = writeln!(s, "sigma = {:?}", self.sigma);
        let _ = writeln!(s, "snr = {}", self.snr.map_or("none".into(), |v| format!("{v:?}")));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "sessions = {}", self.sessions);
        let _ = writeln!(s, "asynchronous = {}", self.asynchronous);
        let _ = writeln!(s, "voxels = {}", self.voxels);
        let _ = writeln!(
            s,
            "events_per_condition = {}",
            self.events_per_condition.map_or("fill".into(), |m| m.to_string())
        );
        s
    }
}

fn parse_true_hrf(value: &str) -> Option<TrueHrf> {
    if value == "canonical" {
        return Some(TrueHrf::Canonical);
    }
    if let Some(d) = value.strip_prefix("shifted:") {
        return d.trim().parse().ok().map(TrueHrf::Shifted);
    }
    let samples = value.strip_prefix("sampled:")?;
    samples
        .split(',')
        .map(|v| v.trim().parse().ok())
        .collect::<Option<Vec<f64>>>()
        .map(TrueHrf::Sampled)
}

/// Canonical HRF advanced by `delta` seconds, sampled at `0, dt, ..., (r-1) dt`.
/// Positive `delta` moves the peak earlier. The shifted curve keeps its unit
/// peak value.
pub fn shifted_canonical(delta: f64, r: usize, dt: f64) -> Result<DVector<f64>> {
    if !(delta.abs() < MAX_SHIFT) {
        return Err(Error::invalid(format!("shift must satisfy |delta| < {MAX_SHIFT} s, got {delta}")));
    }
    if r == 0 || !(dt > 0.0) {
        return Err(Error::invalid("need r >= 1 samples at a positive interval"));
    }
    Ok(DVector::from_fn(r, |i, _| glover_derivative(0, i as f64 * dt + delta)))
}

/// Legendre polynomials `P_0..=P_order` evaluated on `n` equispaced points of [-1, 1].
pub fn legendre_drift(n: usize, order: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, order + 1);
    for i in 0..n {
        let x = if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
        let (mut prev, mut cur) = (1.0, x);
        m[(i, 0)] = 1.0;
        if order >= 1 {
            m[(i, 1)] = x;
        }
        for k in 2..=order {
            let next = ((2 * k - 1) as f64 * x * cur - (k - 1) as f64 * prev) / k as f64;
            m[(i, k)] = next;
            prev = cur;
            cur = next;
        }
    }
    m
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn session_stream(session: usize) -> u64 {
    (session as u64 + 1) << 32
}

/// Event schedule of one session: uniform ISIs, conditions cycled in a fresh
/// random order each cycle, onsets on the TR grid unless asynchronous.
pub fn gen_schedule(spec: &SimSpec, session: usize) -> Result<EventTable> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, session_stream(session));
    let (lo, hi) = spec.isi_range;
    let last = (spec.n - 1) as f64 * spec.tr;
    let target = spec.events_per_condition.map(|m| m * spec.p);
    let mut events = Vec::new();
    let mut onset = 0.0;
    let mut cycle: Vec<usize> = (0..spec.p).collect();
    'outer: loop {
        cycle.shuffle(&mut rng);
        for &condition in &cycle {
            if target.is_some_and(|m| events.len() >= m) || onset > last {
                break 'outer;
            }
            let placed = if spec.asynchronous {
                onset
            } else {
                ((onset / spec.tr).round() * spec.tr).min(last)
            };
            events.push(Event { onset: placed, condition });
            onset += if hi > lo { rng.random_range(lo..=hi) } else { lo };
        }
    }
    EventTable::new(events, spec.p, format!("session{session}"))
}

/// Per-condition activations of every voxel, `p x voxels`.
pub fn gen_betas(spec: &SimSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (mean, sd) = spec.beta_distribution;
    let dist = Normal::new(mean, sd).map_err(|e| Error::invalid(e.to_string()))?;
    let cols: Vec<Vec<f64>> = (0..spec.voxels)
        .map(|v| {
            let mut rng = stream_rng(spec.seed, v as u64 + 1);
            (0..spec.p).map(|_| dist.sample(&mut rng)).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(spec.p, spec.voxels, |j, v| cols[v][j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionTruth {
    /// True HRF sampled at the TR.
    pub h: DVector<f64>,
    /// `p x voxels`
    pub beta: DMatrix<f64>,
    /// `q x voxels` drift weights.
    pub w: DMatrix<f64>,
    pub rho: f64,
    /// Innovation sd per voxel.
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSession {
    pub events: EventTable,
    /// `n x voxels`
    pub bold: DMatrix<f64>,
    /// `n x (drift_order + 1)` Legendre drifts.
    pub confounds: DMatrix<f64>,
    pub truth: SessionTruth,
}

/// Noise-free stimulus regressors `X_h` (`n x p`) of one session.
pub fn signal_design(spec: &SimSpec, events: &EventTable) -> Result<DMatrix<f64>> {
    if spec.asynchronous {
        let basis = HrfBasis::from_continuous(ContinuousBasis::shifted_canonical(spec.shift()), spec.hrf_scans(), spec.tr)?;
        Ok(build_async_design(events, &basis, spec.n, spec.tr)?.into_values())
    } else {
        let v = build_stimulus_matrix(events, spec.n, spec.tr, 1)?;
        convolve_design(&v, spec.hrf_samples()?.as_slice())
    }
}

/// One session with activations drawn from `spec.beta_distribution`.
pub fn gen_session(spec: &SimSpec, session: usize) -> Result<SimSession> {
    let beta = gen_betas(spec)?;
    gen_session_with_betas(spec, session, &beta)
}

/// One session with caller-supplied activations (`p x voxels`).
pub fn gen_session_with_betas(spec: &SimSpec, session: usize, beta: &DMatrix<f64>) -> Result<SimSession> {
    spec.validate()?;
    if beta.shape() != (spec.p, spec.voxels) {
        return Err(Error::invalid(format!(
            "activations must be {} x {}, got {:?}",
            spec.p,
            spec.voxels,
            beta.shape()
        )));
    }
    let events = gen_schedule(spec, session)?;
    let x_h = signal_design(spec, &events)?;
    let confounds = legendre_drift(spec.n, spec.drift_order);
    let q = confounds.ncols();
    let n = spec.n;
    let columns: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..spec.voxels)
        .into_par_iter()
        .map(|v| {
            let mut rng = stream_rng(spec.seed, session_stream(session) | (v as u64 + 1));
            let signal = &x_h * beta.column(v);
            let w: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
            let sigma = match spec.snr {
                Some(snr) => {
                    let mean = signal.mean();
                    let sd = (signal.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                    sd / snr * (1.0 - spec.rho * spec.rho).sqrt()
                }
                None => spec.sigma,
            };
            let mut y = signal + &confounds * DVector::from_column_slice(&w);
            if sigma > 0.0 {
                let noise = ar1_noise(&mut rng, n, spec.rho, sigma);
                y += DVector::from_vec(noise);
            }
            (y.as_slice().to_vec(), w, sigma)
        })
        .collect();
    let bold = DMatrix::from_fn(n, spec.voxels, |i, v| columns[v].0[i]);
    let w = DMatrix::from_fn(q, spec.voxels, |k, v| columns[v].1[k]);
    let sigma = columns.iter().map(|c| c.2).collect();
    Ok(SimSession {
        events,
        bold,
        confounds,
        truth: SessionTruth {
            h: spec.hrf_samples()?,
            beta: beta.clone(),
            w,
            rho: spec.rho,
            sigma,
        },
    })
}

/// Stationary AR(1) sample with innovation sd `sigma`.
fn ar1_noise(rng: &mut impl Rng, n: usize, rho: f64, sigma: f64) -> Vec<f64> {
    let mut e = Vec::with_capacity(n);
    let z: f64 = StandardNormal.sample(rng);
    e.push(z * sigma / (1.0 - rho * rho).sqrt());
    for i in 1..n {
        let z: f64 = StandardNormal.sample(rng);
        e.push(rho * e[i - 1] + sigma * z);
    }
    e
}

/// Flat `key = value` description of the ground truth shared by all sessions.
pub fn truth_record(spec: &SimSpec) -> Result<String> {
    let h = spec.hrf_samples()?;
    let mut s = spec.to_text();
    let _ = writeln!(s, "rng = {RNG_DESCRIPTION}");
    let _ = writeln!(s, "hrf_dt = {:?}", spec.tr);
    let _ = writeln!(s, "hrf = {}", h.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
    let _ = writeln!(
        s,
        "hrf_peak_time = {:?}",
        crate::hrf_basis::glover_peak_time() - spec.shift()
    );
    Ok(s)
}
