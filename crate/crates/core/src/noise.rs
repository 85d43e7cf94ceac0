//! AR(1) residual model: whitening, maximum-likelihood estimation of the
//! autocorrelation, and exact Gaussian log-likelihoods.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Largest |rho| considered by the estimator.
pub const RHO_LIMIT: f64 = 0.99;

/// Golden-section stopping width on rho.
pub const RHO_TOLERANCE: f64 = 1e-6;

/// Minimum series length accepted by [`estimate_ar1`].
pub const MIN_AR1_LENGTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Model {
    pub rho: f64,
    pub sigma2: f64,
    pub n: usize,
}

impl Ar1Model {
    pub fn new(rho: f64, sigma2: f64, n: usize) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::invalid(format!("AR(1) coefficient {rho} must satisfy |rho| < 1")));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::invalid(format!("innovation variance {sigma2} must be positive")));
        }
        Ok(Self { rho, sigma2, n })
    }

    /// White noise with variance `sigma2`.
    pub fn white(sigma2: f64, n: usize) -> Result<Self> {
        Self::new(0.0, sigma2, n)
    }
}

/// Apply the AR(1) whitening operator: `out[0] = sqrt(1 - rho^2) x[0]`,
/// `out[i] = x[i] - rho x[i-1]`.
pub fn whiten(x: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(rho.abs() < 1.0) {
        return Err(Error::invalid(format!("cannot whiten with |rho| = {} >= 1", rho.abs())));
    }
    Ok(whiten_unchecked(x, rho))
}

fn whiten_unchecked(x: &[f64], rho: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        out.push((1.0 - rho * rho).sqrt() * first);
    }
    out.extend(x.windows(2).map(|w| w[1] - rho * w[0]));
    out
}

fn whitened_ss(x: &[f64], rho: f64) -> f64 {
    let mut ss = (1.0 - rho * rho) * x[0] * x[0];
    for w in x.windows(2) {
        let e = w[1] - rho * w[0];
        ss += e * e;
    }
    ss
}

/// Profile log-likelihood in rho with sigma^2 maximized out (constants dropped).
fn profile_loglik(x: &[f64], rho: f64) -> f64 {
    let n = x.len() as f64;
    -0.5 * n * (whitened_ss(x, rho) / n).ln() + 0.5 * (1.0 - rho * rho).ln()
}

/// Maximum-likelihood AR(1) fit of a residual series.
///
/// The innovation variance is profiled out, and rho is located by
/// golden-section search on `[-0.99, 0.99]`.
pub fn estimate_ar1(residuals: &[f64]) -> Result<Ar1Model> {
    let n = residuals.len();
    if n < MIN_AR1_LENGTH {
        return Err(Error::InsufficientData(format!(
            "AR(1) estimation needs at least {MIN_AR1_LENGTH} samples, got {n}"
        )));
    }
    if residuals.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("residuals contain non-finite values"));
    }
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let var = residuals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = residuals.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if scale == 0.0 || var <= 1e-20 * scale {
        return Err(Error::DegenerateInput("residuals have zero variance".into()));
    }

    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-RHO_LIMIT, RHO_LIMIT);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (profile_loglik(residuals, c), profile_loglik(residuals, d));
    while b - a > RHO_TOLERANCE {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = profile_loglik(residuals, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = profile_loglik(residuals, d);
        }
    }
    let rho = (0.5 * (a + b)).clamp(-RHO_LIMIT, RHO_LIMIT);
    let sigma2 = whitened_ss(residuals, rho) / n as f64;
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateInput("profiled innovation variance is zero".into()));
    }
    Ar1Model::new(rho, sigma2, n)
}

/// Exact Gaussian AR(1) log-density of `y - fitted`, in nats.
pub fn gaussian_ar1_loglik(y: &[f64], fitted: &[f64], model: &Ar1Model) -> Result<f64> {
    if y.len() != fitted.len() {
        return Err(Error::invalid(format!(
            "observed ({}) and fitted ({}) lengths differ",
            y.len(),
            fitted.len()
        )));
    }
    let resid: Vec<f64> = y.iter().zip(fitted).map(|(a, b)| a - b).collect();
    residual_loglik(&resid, model)
}

pub(crate) fn residual_loglik(resid: &[f64], model: &Ar1Model) -> Result<f64> {
    let n = resid.len() as f64;
    if resid.is_empty() {
        return Err(Error::EmptyData("log-likelihood of an empty series".into()));
    }
    let ss = whitened_ss(resid, model.rho);
    Ok(-0.5 * n * (2.0 * PI * model.sigma2).ln() + 0.5 * (1.0 - model.rho * model.rho).ln()
        - ss / (2.0 * model.sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ar1_series(rho: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n);
        let mut prev: f64 = StandardNormal.sample(&mut rng);
        prev /= (1.0 - rho * rho).sqrt();
        x.push(prev);
        for _ in 1..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            prev = rho * prev + e;
            x.push(prev);
        }
        x
    }

    /// Stationary AR(1) covariance with innovation variance `sigma2`.
    fn dense_covariance(n: usize, rho: f64, sigma2: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            sigma2 * rho.powi((i as i32 - j as i32).abs()) / (1.0 - rho * rho)
        })
    }

    fn dense_loglik(r: &[f64], rho: f64, sigma2: f64) -> f64 {
        let n = r.len();
        let c = dense_covariance(n, rho, sigma2);
        let chol = c.clone().cholesky().unwrap();
        let v = DVector::from_column_slice(r);
        let quad = v.dot(&chol.solve(&v));
        let logdet = c.determinant().ln();
        -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * quad
    }

    #[test]
    fn whiten_examples() {
        let x = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(whiten(&x, 0.0).unwrap(), x.to_vec());

        let c = 2.0;
        let w = whiten(&[c; 5], 0.5).unwrap();
        assert!((w[0] - c * 0.75_f64.sqrt()).abs() < 1e-15);
        for v in &w[1..] {
            assert!((v - 0.5 * c).abs() < 1e-15);
        }
        assert!(whiten(&x, 1.0).is_err());
        assert!(whiten(&x, -1.2).is_err());
    }

    #[test]
    fn whitening_operator_decorrelates_covariance() {
        let (n, rho) = (6, 0.3);
        let c = dense_covariance(n, rho, 1.0);
        let mut w = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            w.column_mut(j).copy_from_slice(&whiten(&e, rho).unwrap());
        }
        let ident = &w * c * w.transpose();
        assert!((ident - DMatrix::identity(n, n)).amax() < 1e-10);
    }

    #[test]
    fn loglik_hand_case() {
        let model = Ar1Model::new(0.5, 1.0, 4).unwrap();
        let r = [1.0, 0.0, 0.0, 0.0];
        let got = residual_loglik(&r, &model).unwrap();
        assert!((got - dense_loglik(&r, 0.5, 1.0)).abs() < 1e-10);
    }

    #[test]
    fn loglik_special_cases() {
        let y = [0.3, -1.2, 0.8, 2.0, -0.1];
        let m = Ar1Model::white(1.7, 5).unwrap();
        let iid: f64 = y
            .iter()
            .map(|v| -0.5 * (2.0 * PI * 1.7).ln() - v * v / (2.0 * 1.7))
            .sum();
        assert!((gaussian_ar1_loglik(&y, &[0.0; 5], &m).unwrap() - iid).abs() < 1e-12);

        let m = Ar1Model::new(0.4, 2.0, 5).unwrap();
        let expect = -2.5 * (2.0 * PI * 2.0).ln() + 0.5 * (1.0 - 0.16_f64).ln();
        assert!((gaussian_ar1_loglik(&y, &y, &m).unwrap() - expect).abs() < 1e-12);

        assert!(gaussian_ar1_loglik(&y, &y[..4], &m).is_err());
    }

    #[test]
    fn loglik_matches_dense_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [2usize, 5, 11, 20, 32] {
            for _ in 0..5 {
                let rho = rand::Rng::random_range(&mut rng, -0.95..0.95);
                let sigma2 = rand::Rng::random_range(&mut rng, 0.2..3.0);
                let r: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let m = Ar1Model::new(rho, sigma2, n).unwrap();
                let fast = residual_loglik(&r, &m).unwrap();
                assert!((fast - dense_loglik(&r, rho, sigma2)).abs() < 1e-8, "n={n} rho={rho}");
            }
        }
    }

    #[test]
    fn estimator_recovers_rho() {
        let white = ar1_series(0.0, 2000, 1);
        assert!(estimate_ar1(&white).unwrap().rho.abs() < 0.1);

        let x = ar1_series(0.5, 2000, 2);
        let m = estimate_ar1(&x).unwrap();
        assert!((0.45..=0.55).contains(&m.rho), "rho = {}", m.rho);
        assert!((m.sigma2 - 1.0).abs() < 0.1);
    }

    #[test]
    fn estimator_median_consistency() {
        for rho in [0.0, 0.3, 0.6] {
            let mut est: Vec<f64> = (0..50)
                .map(|s| estimate_ar1(&ar1_series(rho, 2000, 100 + s)).unwrap().rho)
                .collect();
            est.sort_by(f64::total_cmp);
            let median = 0.5 * (est[24] + est[25]);
            assert!((median - rho).abs() <= 0.05, "rho* = {rho}, median = {median}");
        }
    }

    #[test]
    fn estimator_rejects_degenerate() {
        assert!(matches!(estimate_ar1(&[3.0; 20]), Err(Error::DegenerateInput(_))));
        assert!(matches!(estimate_ar1(&[0.0; 20]), Err(Error::DegenerateInput(_))));
        assert!(matches!(estimate_ar1(&[1.0, 2.0]), Err(Error::InsufficientData(_))));
    }

    proptest! {
        #[test]
        fn whiten_is_linear(
            x in proptest::collection::vec(-10.0..10.0f64, 12),
            y in proptest::collection::vec(-10.0..10.0f64, 12),
            a in -3.0..3.0f64,
            b in -3.0..3.0f64,
            rho in -0.98..0.98f64,
        ) {
            let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let lhs = whiten(&combo, rho).unwrap();
            let wx = whiten(&x, rho).unwrap();
            let wy = whiten(&y, rho).unwrap();
            for i in 0..12 {
                prop_assert!((lhs[i] - (a * wx[i] + b * wy[i])).abs() < 1e-12);
            }
        }
    }
}
