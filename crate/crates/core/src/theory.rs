//! Monte-Carlo checks on synthetic strongly convex environments.
//!
//! Each environment is a quadratic `(λ/2)‖θ − c‖²` with its center drawn
//! uniformly from the radius-`R` ball. Two experiments live here: the
//! probability that a perturbed global solution stays `ε`-close to optimal
//! on every environment, and the error of α-quantile estimates from `m`
//! sampled risks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::quantile::phi_inverse;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEnv {
    pub center: Vec<f64>,
    pub curvature: f64,
    pub radius: f64,
}

impl QuadraticEnv {
    pub fn new(center: Vec<f64>, curvature: f64, radius: f64) -> Result<Self> {
        if !(curvature > 0.0 && curvature.is_finite()) {
            return Err(Error::Invalid(format!("curvature must be positive, got {curvature}")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Invalid(format!("radius must be positive, got {radius}")));
        }
        let norm = center.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > radius * (1.0 + 1e-12) {
            return Err(Error::Invalid(format!("center norm {norm} exceeds radius {radius}")));
        }
        Ok(QuadraticEnv {
            center,
            curvature,
            radius,
        })
    }

    /// Center drawn uniformly from the ball of radius `radius` in `dim`
    /// dimensions.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, curvature: f64, radius: f64) -> Self {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: f64 = rng.random();
        let r = radius * u.powf(1.0 / dim as f64);
        if norm > 0.0 {
            dir.iter_mut().for_each(|x| *x *= r / norm);
        }
        QuadraticEnv {
            center: dir,
            curvature,
            radius,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * self.curvature * sq_dist(theta, &self.center)
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.center)
            .map(|(t, c)| self.curvature * (t - c))
            .collect()
    }

    /// Lipschitz constant of the loss on the radius-`R` ball.
    pub fn lipschitz(&self) -> f64 {
        self.curvature * 2.0 * self.radius
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn total_loss(envs: &[QuadraticEnv], theta: &[f64]) -> f64 {
    envs.iter().map(|e| e.loss(theta)).sum()
}

/// Minimizer of the summed losses: the mean of the centers.
pub fn global_solution(envs: &[QuadraticEnv]) -> Result<Vec<f64>> {
    let first = envs
        .first()
        .ok_or_else(|| Error::Invalid("global solution of an empty environment list".into()))?;
    let dim = first.dim();
    let mut mean = vec![0.0; dim];
    for e in envs {
        if e.dim() != dim {
            return Err(Error::LengthMismatch {
                what: "environment centers",
                left: dim,
                right: e.dim(),
            });
        }
        if e.curvature != first.curvature {
            return Err(Error::Invalid("environments must share one curvature".into()));
        }
        for (m, c) in mean.iter_mut().zip(&e.center) {
            *m += c;
        }
    }
    let n = envs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// A Monte-Carlo proportion or mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub m: usize,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemorizationSetup {
    pub epsilon: f64,
    pub n_trials: usize,
    pub noise_scale: f64,
    pub seed: u64,
    pub dim: usize,
    pub curvature: f64,
    pub radius: f64,
}

impl Default for MemorizationSetup {
    fn default() -> Self {
        MemorizationSetup {
            epsilon: 0.05,
            n_trials: 20_000,
            noise_scale: 0.1,
            seed: 0,
            dim: 2,
            curvature: 1.0,
            radius: 1.0,
        }
    }
}

fn trial_rng(seed: u64, m: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(trial as u64);
    rng
}

/// Fraction of trials in which `θ = θ* + noise` has excess risk at most `ε`
/// on all `m` environments at once.
pub fn memorization_probability(m: usize, setup: &MemorizationSetup) -> Result<Estimate> {
    if m == 0 {
        return Err(Error::Invalid("need at least one environment".into()));
    }
    if setup.n_trials == 0 {
        return Err(Error::Invalid("need at least one trial".into()));
    }
    if setup.dim == 0 {
        return Err(Error::Invalid("dimension must be positive".into()));
    }
    if !(setup.noise_scale >= 0.0 && setup.noise_scale.is_finite()) {
        return Err(Error::Invalid(format!("bad noise scale {}", setup.noise_scale)));
    }
    let mut successes = 0usize;
    for trial in 0..setup.n_trials {
        let mut rng = trial_rng(setup.seed, m, trial);
        let envs: Vec<QuadraticEnv> = (0..m)
            .map(|_| QuadraticEnv::random(&mut rng, setup.dim, setup.curvature, setup.radius))
            .collect();
        let star = global_solution(&envs)?;
        let theta: Vec<f64> = star
            .iter()
            .map(|s| {
                let z: f64 = rng.sample(StandardNormal);
                s + setup.noise_scale * z
            })
            .collect();
        if envs
            .iter()
            .all(|e| e.loss(&theta) - e.loss(&star) <= setup.epsilon)
        {
            successes += 1;
        }
    }
    let n = setup.n_trials as f64;
    let p = successes as f64 / n;
    Ok(Estimate {
        m,
        value: p,
        std_error: (p * (1.0 - p) / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantileEstimator {
    /// Linear interpolation between order statistics.
    #[default]
    Empirical,
    /// `mean + sd · Φ⁻¹(α)` with the unbiased sample deviation.
    Gaussian,
}

impl std::str::FromStr for QuantileEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(QuantileEstimator::Empirical),
            "gaussian" => Ok(QuantileEstimator::Gaussian),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSetup {
    pub alpha: f64,
    pub mu: f64,
    pub sigma: f64,
    pub n_trials: usize,
    pub seed: u64,
    pub estimator: QuantileEstimator,
}

impl Default for QuantileSetup {
    fn default() -> Self {
        QuantileSetup {
            alpha: 0.9,
            mu: 1.0,
            sigma: 0.5,
            n_trials: 1000,
            seed: 0,
            estimator: QuantileEstimator::Empirical,
        }
    }
}

/// Sample quantile by linear interpolation of order statistics
/// (position `α (n − 1)`). `values` is sorted in place.
pub fn empirical_quantile(values: &mut [f64], alpha: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = alpha * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        values[lo]
    } else {
        values[lo] + frac * (values[hi] - values[lo])
    }
}

/// Gaussian quantile estimate. The mean is accumulated as offsets from the
/// first value so identical inputs reproduce that value exactly.
pub fn gaussian_quantile(values: &[f64], z: f64) -> f64 {
    let n = values.len() as f64;
    let x0 = values[0];
    let mean = x0 + values.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    mean + var.sqrt() * z
}

/// Mean absolute deviation between the true α-quantile of `N(μ, σ²)` and
/// its estimate from `m` draws.
pub fn quantile_estimation_error(m: usize, setup: &QuantileSetup) -> Result<Estimate> {
    if m < 2 {
        return Err(Error::TooFewRisks(m));
    }
    if setup.n_trials == 0 {
        return Err(Error::Invalid("need at least one trial".into()));
    }
    if !(setup.sigma >= 0.0 && setup.sigma.is_finite() && setup.mu.is_finite()) {
        return Err(Error::Invalid(format!(
            "risk distribution needs finite mu and sigma >= 0, got ({}, {})",
            setup.mu, setup.sigma
        )));
    }
    let z = phi_inverse(setup.alpha)?;
    let normal = Normal::new(setup.mu, setup.sigma)
        .map_err(|e| Error::Invalid(format!("risk distribution: {e}")))?;
    let truth = setup.mu + setup.sigma * z;
    let mut errors = Vec::with_capacity(setup.n_trials);
    let mut draws = vec![0.0; m];
    for trial in 0..setup.n_trials {
        let mut rng = trial_rng(setup.seed, m, trial);
        draws.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        let est = match setup.estimator {
            QuantileEstimator::Empirical => empirical_quantile(&mut draws, setup.alpha),
            QuantileEstimator::Gaussian => gaussian_quantile(&draws, z),
        };
        errors.push((est - truth).abs());
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let std_error = if errors.len() > 1 {
        (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(Estimate {
        m,
        value: mean,
        std_error,
    })
}

pub const DEFAULT_ENV_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];
pub const DEFAULT_RISK_COUNTS: [usize; 5] = [10, 30, 100, 300, 1000];

pub fn memorization_curve(ms: &[usize], setup: &MemorizationSetup) -> Result<Vec<Estimate>> {
    ms.iter().map(|&m| memorization_probability(m, setup)).collect()
}

pub fn quantile_error_curve(ms: &[usize], setup: &QuantileSetup) -> Result<Vec<Estimate>> {
    ms.iter().map(|&m| quantile_estimation_error(m, setup)).collect()
}

/// Largest violation of "non-increasing", in standard errors of the
/// difference. Zero when the curve never goes up.
pub fn worst_increase_in_se(curve: &[Estimate]) -> f64 {
    curve
        .windows(2)
        .map(|w| {
            let rise = w[1].value - w[0].value;
            let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
            if rise <= 0.0 {
                0.0
            } else if se == 0.0 {
                f64::INFINITY
            } else {
                rise / se
            }
        })
        .fold(0.0, f64::max)
}

/// `m, estimate, std_error` rows with a header.
pub fn curve_csv(curve: &[Estimate]) -> String {
    let mut out = String::from("m,estimate,std_error\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.m, p.value, p.std_error));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env(c: &[f64]) -> QuadraticEnv {
        QuadraticEnv::new(c.to_vec(), 1.0, 10.0).unwrap()
    }

    #[test]
    fn single_env_solution_is_its_center() {
        assert_eq!(global_solution(&[env(&[0.3, -0.2])]).unwrap(), vec![0.3, -0.2]);
    }

    #[test]
    fn symmetric_pair_solves_to_origin() {
        assert_eq!(global_solution(&[env(&[-1.0]), env(&[1.0])]).unwrap(), vec![0.0]);
    }

    #[test]
    fn solution_errors() {
        assert!(global_solution(&[]).is_err());
        let a = env(&[0.0]);
        let b = QuadraticEnv::new(vec![0.0], 2.0, 10.0).unwrap();
        assert!(global_solution(&[a.clone(), b]).is_err());
        assert!(global_solution(&[a, env(&[0.0, 1.0])]).is_err());
        assert!(QuadraticEnv::new(vec![3.0], 1.0, 1.0).is_err());
        assert!(QuadraticEnv::new(vec![0.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn solution_matches_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let envs: Vec<QuadraticEnv> =
            (0..7).map(|_| QuadraticEnv::random(&mut rng, 4, 0.7, 2.0)).collect();
        let mut theta = vec![0.0; 4];
        let lr = 1.0 / (envs.len() as f64 * 0.7);
        for _ in 0..200 {
            let mut g = vec![0.0; 4];
            for e in &envs {
                for (gi, d) in g.iter_mut().zip(e.gradient(&theta)) {
                    *gi += d;
                }
            }
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= 0.5 * lr * gi;
            }
        }
        let closed = global_solution(&envs).unwrap();
        for (a, b) in theta.iter().zip(&closed) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn random_centers_stay_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let e = QuadraticEnv::random(&mut rng, 3, 1.0, 1.5);
            assert!(e.center.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1.5);
        }
    }

    #[test]
    fn no_noise_is_certain() {
        let setup = MemorizationSetup {
            noise_scale: 0.0,
            n_trials: 200,
            ..MemorizationSetup::default()
        };
        for m in DEFAULT_ENV_COUNTS {
            assert_eq!(memorization_probability(m, &setup).unwrap().value, 1.0);
        }
    }

    #[test]
    fn huge_tolerance_is_certain() {
        let setup = MemorizationSetup {
            epsilon: 1e9,
            n_trials: 200,
            ..MemorizationSetup::default()
        };
        assert_eq!(memorization_probability(1, &setup).unwrap().value, 1.0);
    }

    #[test]
    fn memorization_preconditions() {
        let setup = MemorizationSetup::default();
        assert!(memorization_probability(0, &setup).is_err());
        let none = MemorizationSetup {
            n_trials: 0,
            ..setup
        };
        assert!(memorization_probability(1, &none).is_err());
    }

    #[test]
    fn probability_grows_with_tolerance() {
        let base = MemorizationSetup {
            n_trials: 3000,
            ..MemorizationSetup::default()
        };
        let mut last = 0.0;
        for eps in [0.001, 0.01, 0.05, 0.2] {
            let p = memorization_probability(4, &MemorizationSetup {
                epsilon: eps,
                ..base.clone()
            })
            .unwrap()
            .value;
            // Same seeds, so the success sets are nested.
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn empirical_quantile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(empirical_quantile(&mut v, 0.5), 3.0);
        assert_eq!(empirical_quantile(&mut v, 0.0), 1.0);
        assert_eq!(empirical_quantile(&mut v, 1.0), 5.0);
        assert!((empirical_quantile(&mut v, 0.9) - 4.6).abs() < 1e-12);
    }

    #[test]
    fn degenerate_distribution_has_no_error() {
        for estimator in [QuantileEstimator::Empirical, QuantileEstimator::Gaussian] {
            let setup = QuantileSetup {
                mu: 0.37,
                sigma: 0.0,
                n_trials: 50,
                estimator,
                ..QuantileSetup::default()
            };
            for m in [2, 10, 1000] {
                assert_eq!(quantile_estimation_error(m, &setup).unwrap().value, 0.0);
            }
        }
    }

    #[test]
    fn large_sample_median_is_accurate() {
        let setup = QuantileSetup {
            alpha: 0.5,
            sigma: 2.0,
            n_trials: 5,
            ..QuantileSetup::default()
        };
        let e = quantile_estimation_error(100_000, &setup).unwrap();
        assert!(e.value < 0.01 * setup.sigma, "{e:?}");
    }

    #[test]
    fn quantile_preconditions() {
        let setup = QuantileSetup::default();
        assert!(quantile_estimation_error(1, &setup).is_err());
        let bad = QuantileSetup {
            alpha: 1.0,
            ..setup.clone()
        };
        assert!(quantile_estimation_error(10, &bad).is_err());
        let bad = QuantileSetup {
            sigma: -1.0,
            ..setup
        };
        assert!(quantile_estimation_error(10, &bad).is_err());
    }

    #[test]
    fn increase_measure() {
        let p = |m, value, std_error| Estimate { m, value, std_error };
        assert_eq!(worst_increase_in_se(&[p(1, 0.9, 0.01), p(2, 0.8, 0.01)]), 0.0);
        let r = worst_increase_in_se(&[p(1, 0.8, 0.03), p(2, 0.84, 0.04)]);
        assert!((r - 0.8).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn solution_beats_perturbations(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let envs: Vec<QuadraticEnv> =
                (0..5).map(|_| QuadraticEnv::random(&mut rng, 3, 1.3, 1.0)).collect();
            let star = global_solution(&envs).unwrap();
            let best = total_loss(&envs, &star);
            for _ in 0..1000 {
                let scale: f64 = rng.random_range(1e-6..1.0);
                let theta: Vec<f64> = star
                    .iter()
                    .map(|s| s + scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                prop_assert!(best <= total_loss(&envs, &theta));
            }
        }
    }
}
