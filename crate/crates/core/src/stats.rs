//! Paired tests on per-voxel score pairs.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Alternative hypothesis about the paired difference `x - y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    TwoSided,
    /// `x` tends to exceed `y`.
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    /// Wilcoxon: sum of positive ranks `W+`. t-test: the t statistic.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of pairs used, after dropping zero differences.
    pub n_effective: usize,
}

/// Largest sample size for which the Wilcoxon null is computed exactly.
pub const WILCOXON_EXACT_MAX: usize = 20;

const WILCOXON_MIN: usize = 5;
const T_TEST_MIN: usize = 8;

fn differences(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("paired samples differ in length ({} vs {})", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("paired samples contain non-finite values"));
    }
    Ok(x.iter().zip(y).map(|(a, b)| a - b).collect())
}

/// Average ranks (1-based) of `values`, with tied values sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn combine(alternative: Alternative, p_greater: f64, p_less: f64) -> f64 {
    let p = match alternative {
        Alternative::Greater => p_greater,
        Alternative::Less => p_less,
        Alternative::TwoSided => 2.0 * p_greater.min(p_less),
    };
    p.clamp(0.0, 1.0)
}

/// How the Wilcoxon null distribution is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WilcoxonMethod {
    /// Exact up to [`WILCOXON_EXACT_MAX`] pairs, normal beyond.
    #[default]
    Auto,
    Exact,
    /// Normal approximation with tie and continuity corrections.
    Normal,
}

/// Wilcoxon signed-rank test on `x - y`. Zero differences are discarded;
/// the null distribution is exact up to [`WILCOXON_EXACT_MAX`] pairs and
/// normal (tie- and continuity-corrected) beyond.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<TestResult> {
    wilcoxon_signed_rank_with(x, y, alternative, WilcoxonMethod::Auto)
}

/// [`wilcoxon_signed_rank`] with an explicit null evaluation. The exact
/// method is limited to 60 nonzero differences.
pub fn wilcoxon_signed_rank_with(
    x: &[f64],
    y: &[f64],
    alternative: Alternative,
    method: WilcoxonMethod,
) -> Result<TestResult> {
    let d: Vec<f64> = differences(x, y)?.into_iter().filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n < WILCOXON_MIN {
        return Err(Error::InsufficientData(format!(
            "Wilcoxon test needs at least {WILCOXON_MIN} nonzero differences, got {n}"
        )));
    }
    let exact = match method {
        WilcoxonMethod::Auto => n <= WILCOXON_EXACT_MAX,
        WilcoxonMethod::Exact if n > 60 => {
            return Err(Error::invalid(format!("exact Wilcoxon null is limited to 60 pairs, got {n}")))
        }
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let magnitudes: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&magnitudes);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();

    let (p_greater, p_less) = if exact {
        exact_tails(&ranks, w_plus)
    } else {
        normal_tails(&ranks, w_plus)
    };
    Ok(TestResult {
        statistic: w_plus,
        p_value: combine(alternative, p_greater, p_less),
        n_effective: n,
    })
}

/// `(P(W+ >= w), P(W+ <= w))` under random signs, by dynamic programming over
/// doubled ranks (average ranks are multiples of 1/2).
fn exact_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0_f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let norm = 2f64.powi(ranks.len() as i32);
    let obs = (2.0 * w_plus).round() as usize;
    let upper: f64 = counts[obs..].iter().sum();
    let lower: f64 = counts[..=obs].iter().sum();
    (upper / norm, lower / norm)
}

fn normal_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let std_normal = Normal::standard();
    if var <= 0.0 {
        return (1.0, 1.0);
    }
    let sd = var.sqrt();
    let z_upper = (w_plus - mean - 0.5) / sd;
    let z_lower = (w_plus - mean + 0.5) / sd;
    (std_normal.sf(z_upper), std_normal.cdf(z_lower))
}

/// Paired t-test on `x - y` with `n - 1` degrees of freedom.
pub fn paired_mean_test(x: &[f64], y: &[f64], alternative: Alternative) -> Result<TestResult> {
    let d = differences(x, y)?;
    let n = d.len();
    if n < T_TEST_MIN {
        return Err(Error::InsufficientData(format!("paired t-test needs at least {T_TEST_MIN} pairs, got {n}")));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var <= 1e-28 * mean * mean || var == 0.0 {
        return Err(Error::DegenerateInput("paired differences have zero variance".into()));
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TestResult {
        statistic: t,
        p_value: combine(alternative, dist.sf(t), dist.cdf(t)),
        n_effective: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Upper-tail probability of W+ by listing all 2^n sign patterns.
    fn enumerate_upper(ranks: &[f64], w_plus: f64) -> (f64, f64) {
        let n = ranks.len();
        let (mut upper, mut lower) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w >= w_plus - 1e-9 {
                upper += 1;
            }
            if w <= w_plus + 1e-9 {
                lower += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (upper as f64 / total, lower as f64 / total)
    }

    fn sample(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                e + shift
            })
            .collect();
        let y = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        (x, y)
    }

    #[test]
    fn all_positive_six() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [0.0; 6];
        let r = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        assert_eq!(r.p_value, 0.015625);
        assert_eq!(r.statistic, 21.0);
        assert_eq!(wilcoxon_signed_rank(&x, &y, Alternative::TwoSided).unwrap().p_value, 0.03125);
        assert_eq!(wilcoxon_signed_rank(&x, &y, Alternative::Less).unwrap().p_value, 1.0);
    }

    #[test]
    fn identical_samples_have_too_few_differences() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x, Alternative::TwoSided),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn exact_distribution_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 5..=12 {
            for tied in [false, true] {
                let (mut x, y) = sample(&mut rng, n, 0.3);
                if tied {
                    // force tied magnitudes
                    x[1] = y[1] + (x[0] - y[0]).abs();
                    x[2] = y[2] - (x[0] - y[0]).abs();
                }
                let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
                let r = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
                let (upper, lower) = enumerate_upper(&ranks, r.statistic);
                assert!((r.p_value - upper).abs() < 1e-14);
                let less = wilcoxon_signed_rank(&x, &y, Alternative::Less).unwrap();
                assert!((less.p_value - lower).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn exact_and_normal_agree_at_twenty() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for shift in [0.0, 0.3, 0.6, 1.0] {
            for _ in 0..5 {
                let (x, y) = sample(&mut rng, 20, shift);
                let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
                let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
                let (eg, el) = exact_tails(&ranks, w);
                let (ag, al) = normal_tails(&ranks, w);
                assert!((eg - ag).abs() < 0.01, "greater: {eg} vs {ag}");
                assert!((el - al).abs() < 0.01, "less: {el} vs {al}");
            }
        }
    }

    #[test]
    fn exact_tails_overlap_by_observed_mass() {
        let x = [3.0, -1.0, 4.0, 1.5, -5.0, 9.0, 2.6, -5.3];
        let y = [0.0; 8];
        let g = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        let l = wilcoxon_signed_rank(&x, &y, Alternative::Less).unwrap();
        let d: Vec<f64> = x.to_vec();
        let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let (upper, lower) = enumerate_upper(&ranks, g.statistic);
        let point = upper + lower - 1.0;
        assert!((g.p_value + l.p_value - 1.0 - point).abs() < 1e-14);
        assert!(point > 0.0);
    }

    #[test]
    fn large_sample_tails_cover_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (x, y) = sample(&mut rng, 60, 0.2);
        let g = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        let l = wilcoxon_signed_rank(&x, &y, Alternative::Less).unwrap();
        assert!(g.p_value + l.p_value >= 1.0);
        let sd = (60.0 * 61.0 * 121.0 / 24.0_f64).sqrt();
        // the overlap is at most the continuity-corrected band
        assert!(g.p_value + l.p_value - 1.0 < 1.0 / sd);
    }

    #[test]
    fn method_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (x, y) = sample(&mut rng, 20, 0.4);
        let with = |m| wilcoxon_signed_rank_with(&x, &y, Alternative::Greater, m).unwrap();
        assert_eq!(with(WilcoxonMethod::Auto), with(WilcoxonMethod::Exact));
        assert_ne!(with(WilcoxonMethod::Auto).p_value, with(WilcoxonMethod::Normal).p_value);

        let (x, y) = sample(&mut rng, 40, 0.1);
        let auto = wilcoxon_signed_rank(&x, &y, Alternative::TwoSided).unwrap();
        assert_eq!(auto, wilcoxon_signed_rank_with(&x, &y, Alternative::TwoSided, WilcoxonMethod::Normal).unwrap());
        let exact = wilcoxon_signed_rank_with(&x, &y, Alternative::TwoSided, WilcoxonMethod::Exact).unwrap();
        assert!((exact.p_value - auto.p_value).abs() < 0.01);

        let (x, y) = sample(&mut rng, 61, 0.0);
        assert!(wilcoxon_signed_rank_with(&x, &y, Alternative::Less, WilcoxonMethod::Exact).is_err());
    }

    /// Upper tail of Student's t by composite Simpson integration of the
    /// density on [t, t + 200].
    fn t_upper_by_quadrature(t: f64, df: f64) -> f64 {
        let ln_c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let steps = 400_000;
        let h = 200.0 / steps as f64;
        let mut acc = pdf(t) + pdf(t + 200.0);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * pdf(t + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn textbook_t_test() {
        // ten differences with mean 0.5 and sample sd 0.5
        let base = [-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 0.0, 0.0];
        let m: f64 = base.iter().map(|v| v * v).sum::<f64>() / 9.0;
        let d: Vec<f64> = base.iter().map(|v| 0.5 + 0.5 * v / m.sqrt()).collect();
        let zeros = [0.0; 10];
        let r = paired_mean_test(&d, &zeros, Alternative::TwoSided).unwrap();
        assert!((r.statistic - 10f64.sqrt()).abs() < 1e-12);
        assert!((r.statistic - 3.162).abs() < 1e-3);
        let oracle = 2.0 * t_upper_by_quadrature(r.statistic, 9.0);
        assert!((r.p_value - oracle).abs() < 1e-9, "{} vs {oracle}", r.p_value);
        assert!((r.p_value - 0.0115).abs() < 1e-4);
        let g = paired_mean_test(&d, &zeros, Alternative::Greater).unwrap();
        assert!((2.0 * g.p_value - r.p_value).abs() < 1e-15);
    }

    #[test]
    fn t_test_rejects_degenerate_and_short() {
        let x = [2.0; 10];
        let y = [1.0; 10];
        assert!(matches!(paired_mean_test(&x, &y, Alternative::TwoSided), Err(Error::DegenerateInput(_))));
        assert!(matches!(
            paired_mean_test(&x[..5], &y[..5], Alternative::TwoSided),
            Err(Error::InsufficientData(_))
        ));
        assert!(paired_mean_test(&x, &y[..9], Alternative::TwoSided).is_err());
    }

    #[test]
    fn t_test_null_calibration() {
        let mut ps: Vec<f64> = (0..100)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let (x, _) = sample(&mut rng, 1000, 0.0);
                paired_mean_test(&x, &[0.0; 1000], Alternative::TwoSided).unwrap().p_value
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        let median = 0.5 * (ps[49] + ps[50]);
        assert!((0.3..=0.7).contains(&median), "median p = {median}");
    }

    proptest! {
        #[test]
        fn common_shift_leaves_tests_unchanged(
            pairs in prop::collection::vec((-100i32..100, -100i32..100), 8..40),
            c in -1000i32..1000,
        ) {
            // integer-valued samples keep x + c exact
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let xs: Vec<f64> = x.iter().map(|v| v + c as f64).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + c as f64).collect();
            for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
                let a = wilcoxon_signed_rank(&x, &y, alt).ok();
                let b = wilcoxon_signed_rank(&xs, &ys, alt).ok();
                prop_assert_eq!(a, b);
                let a = paired_mean_test(&x, &y, alt).ok();
                let b = paired_mean_test(&xs, &ys, alt).ok();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn p_values_are_probabilities(d in prop::collection::vec(-5.0f64..5.0, 5..40)) {
            let zeros = vec![0.0; d.len()];
            for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
                if let Ok(r) = wilcoxon_signed_rank(&d, &zeros, alt) {
                    prop_assert!((0.0..=1.0).contains(&r.p_value));
                }
            }
        }
    }
}
