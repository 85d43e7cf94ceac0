//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Two-loop recursion for the search direction (Nocedal 1980) and the
//! bracketing/zoom line search of Nocedal & Wright, Algorithms 3.5-3.6, with
//! safeguarded cubic interpolation.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub history: usize,
    pub max_iter: usize,
    /// Stop when `|grad|_inf <= tol * max(1, |f|)`.
    pub tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            history: 10,
            max_iter: 500,
            tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// The line search could not find a point with sufficient decrease,
    /// usually because the objective is flat to machine precision.
    LineSearchStalled,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective after each accepted iteration, starting with the initial point.
    /// Non-increasing up to a relative rounding tolerance of 1e-12.
    pub trace: Vec<f64>,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Minimizer of the cubic interpolating `(a, fa, ga)` and `(b, fb, gb)`,
/// clamped to the safe interior of `[a, b]`.
fn cubic_step(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let fallback = 0.5 * (a + b);
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if !(disc >= 0.0) || !d1.is_finite() {
        return fallback;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let step = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    if !step.is_finite() {
        return fallback;
    }
    step.clamp(lo + 0.1 * width, hi - 0.1 * width)
}

/// Largest increase in f treated as rounding noise.
pub(crate) fn flat_tolerance(f: f64) -> f64 {
    FLAT_RELATIVE * f.abs()
}

const FLAT_RELATIVE: f64 = 1e-12;

struct Eval<'a, F> {
    f: &'a mut F,
    count: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Eval<'_, F> {
    fn at(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.count += 1;
        (self.f)(x, g)
    }
}

struct LinePoint {
    f: f64,
    g: Vec<f64>,
    x: Vec<f64>,
}

/// Strong-Wolfe line search along `d` from `x` (objective `f0`, slope `dg0 < 0`).
fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    eval: &mut Eval<'_, F>,
    x: &[f64],
    f0: f64,
    dg0: f64,
    d: &[f64],
    initial_step: f64,
    opts: &LbfgsOptions,
) -> Option<LinePoint> {
    let n = x.len();
    let probe = |step: f64, eval: &mut Eval<'_, F>| {
        let xs: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + step * di).collect();
        let mut g = vec![0.0; n];
        let f = eval.at(&xs, &mut g);
        let slope = dot(&g, d);
        (LinePoint { f, g, x: xs }, slope)
    };

    // Armijo, or the approximate-Wolfe test of Hager & Zhang (2005). The
    // latter lets the search make progress once changes in f are below
    // rounding but the slope is still informative.
    let decreases = |f: f64, step: f64, slope: f64| {
        f <= f0 + opts.c1 * step * dg0 || (f <= f0 + flat_tolerance(f0) && slope <= (2.0 * opts.c1 - 1.0) * dg0)
    };

    let mut prev_step = 0.0;
    let mut prev_f = f0;
    let mut prev_slope = dg0;
    let mut step = initial_step;
    let mut evals = 0;
    let mut best: Option<LinePoint> = None;

    // bracketing phase
    let (mut lo, mut lo_f, mut lo_slope, mut hi, mut hi_f, mut hi_slope);
    loop {
        if evals >= opts.max_line_search {
            return best;
        }
        evals += 1;
        let (pt, slope) = probe(step, eval);
        if !pt.f.is_finite() {
            // overshoot into a non-finite region: shrink toward the last good step
            step = prev_step + 0.1 * (step - prev_step);
            continue;
        }
        if !decreases(pt.f, step, slope) || (evals > 1 && pt.f >= prev_f) {
            lo = prev_step;
            lo_f = prev_f;
            lo_slope = prev_slope;
            hi = step;
            hi_f = pt.f;
            hi_slope = slope;
            break;
        }
        if slope.abs() <= -opts.c2 * dg0 {
            return Some(pt);
        }
        if slope >= 0.0 {
            lo = step;
            lo_f = pt.f;
            lo_slope = slope;
            hi = prev_step;
            hi_f = prev_f;
            hi_slope = prev_slope;
            best = Some(pt);
            break;
        }
        prev_step = step;
        prev_f = pt.f;
        prev_slope = slope;
        best = Some(pt);
        step *= 2.0;
    }

    // zoom phase; `lo` always satisfies sufficient decrease
    loop {
        if evals >= opts.max_line_search || (hi - lo).abs() <= f64::EPSILON * lo.abs().max(1e-300) {
            return best;
        }
        evals += 1;
        let trial = cubic_step(lo, lo_f, lo_slope, hi, hi_f, hi_slope);
        let (pt, slope) = probe(trial, eval);
        if !pt.f.is_finite() || !decreases(pt.f, trial, slope) || pt.f > lo_f {
            hi = trial;
            hi_f = if pt.f.is_finite() { pt.f } else { f64::MAX };
            hi_slope = if slope.is_finite() { slope } else { 0.0 };
            continue;
        }
        if slope.abs() <= -opts.c2 * dg0 {
            return Some(pt);
        }
        if slope * (hi - lo) >= 0.0 {
            hi = lo;
            hi_f = lo_f;
            hi_slope = lo_slope;
        }
        lo = trial;
        lo_f = pt.f;
        lo_slope = slope;
        best = Some(pt);
    }
}

/// Minimize `f` from `x0`. The callback writes the gradient into its second
/// argument and returns the objective.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut eval = Eval { f: &mut f, count: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = eval.at(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            reason: "objective or gradient is not finite at the starting point".into(),
            iteration: 0,
            objective: fx,
            grad_norm: inf_norm(&g),
        });
    }
    let mut trace = vec![fx];
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.history);
    let mut iterations = 0;
    let mut restarted = false;
    // curvature scale of the most recent pair, kept across restarts
    let mut gamma: Option<f64> = None;

    let termination = loop {
        let gnorm = inf_norm(&g);
        if gnorm <= opts.tol * fx.abs().max(1.0) {
            break Termination::Converged;
        }
        if iterations >= opts.max_iter {
            break Termination::MaxIterations;
        }

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for pair in history.iter().rev() {
            let a = pair.rho * dot(&pair.s, &d);
            for (di, yi) in d.iter_mut().zip(&pair.y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some(scale) = gamma {
            d.iter_mut().for_each(|v| *v *= scale);
        }
        for (pair, a) in history.iter().zip(alphas.iter().rev()) {
            let b = pair.rho * dot(&pair.y, &d);
            for (di, si) in d.iter_mut().zip(&pair.s) {
                *di += (a - b) * si;
            }
        }
        let mut dg = dot(&d, &g);
        // reset when the quasi-Newton direction is not clearly downhill
        if !(dg < -1e-10 * dot(&d, &d).sqrt() * dot(&g, &g).sqrt()) {
            history.clear();
            d = g.iter().map(|v| -gamma.unwrap_or(1.0) * v).collect();
            dg = dot(&d, &g);
        }
        let initial_step = if gamma.is_none() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };

        let ls = line_search(&mut eval, &x, fx, dg, &d, initial_step, opts);
        let Some(next) = ls else {
            if restarted || history.is_empty() {
                break Termination::LineSearchStalled;
            }
            history.clear();
            restarted = true;
            continue;
        };
        if !(next.f <= fx + flat_tolerance(fx)) || next.x == x {
            if restarted || history.is_empty() {
                break Termination::LineSearchStalled;
            }
            history.clear();
            restarted = true;
            continue;
        }
        restarted = false;

        let s: Vec<f64> = next.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == opts.history {
                history.pop_front();
            }
            gamma = Some(sy / dot(&y, &y));
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        x = next.x;
        g = next.g;
        fx = next.f;
        iterations += 1;
        trace.push(fx);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                reason: "gradient became non-finite".into(),
                iteration: iterations,
                objective: fx,
                grad_norm: f64::NAN,
            });
        }
    };

    Ok(LbfgsResult {
        grad_norm: inf_norm(&g),
        x,
        f: fx,
        iterations,
        evaluations: eval.count,
        termination,
        trace,
    })
}
