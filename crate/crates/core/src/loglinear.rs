//! Per-test log-linear multinomial model.
//!
//! Conditioning a Poisson log-linear model `log mu_n = alpha + beta x_n` on
//! the row total gives a multinomial with cell probabilities
//! `p_n(beta) = exp(beta x_n) / sum_j exp(beta x_j)`. Everything here is a
//! pure function of the covariate and one count vector.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{CovariateVector, TestRecord};
use crate::error::{invalid, Error, Result};
use crate::roots::newton_bisect;
use crate::special::{ln_gamma, normal_sf};

/// Effects are searched on `[-EFFECT_BOUND, EFFECT_BOUND]`.
pub const EFFECT_BOUND: f64 = 20.0;

/// Log partition function `A(beta) = log sum_n exp(beta x_n)` and its first
/// two derivatives: the mean and variance of `x` under `p(beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPartition {
    pub value: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn log_partition(beta: f64, x: &CovariateVector) -> LogPartition {
    let xs = x.values();
    let max = xs
        .iter()
        .map(|&v| beta * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    let mut s1 = 0.0;
    for &v in xs {
        let w = (beta * v - max).exp();
        s += w;
        s1 += w * v;
    }
    let mean = s1 / s;
    let mut s2 = 0.0;
    for &v in xs {
        let w = (beta * v - max).exp();
        s2 += w * (v - mean) * (v - mean);
    }
    LogPartition {
        value: max + s.ln(),
        mean,
        variance: s2 / s,
    }
}

/// Cell probabilities `p(beta)`.
pub fn multinomial_probs(beta: f64, x: &CovariateVector) -> Result<Vec<f64>> {
    if !beta.is_finite() {
        return Err(invalid(format!("effect must be finite, got {beta}")));
    }
    let max = x
        .values()
        .iter()
        .map(|&v| beta * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = x.values().iter().map(|&v| (beta * v - max).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// `log(n! / prod y_i!)`.
pub fn log_multinomial_coef(y: &[u32]) -> f64 {
    let n: u64 = y.iter().map(|&c| c as u64).sum();
    ln_gamma(n as f64 + 1.0) - y.iter().map(|&c| ln_gamma(c as f64 + 1.0)).sum::<f64>()
}

/// Sufficient statistic `T = x^T y`.
pub fn sufficient_statistic(y: &[u32], x: &CovariateVector) -> f64 {
    y.iter().zip(x.values()).map(|(&c, &v)| c as f64 * v).sum()
}

fn check_record(rec: &TestRecord, x: &CovariateVector) -> Result<()> {
    if rec.counts().len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: rec.counts().len(),
        });
    }
    if rec.n_total() == 0 {
        return Err(Error::EmptyRow);
    }
    Ok(())
}

/// `log p(y | n; beta)` for one test.
pub fn log_pmf(rec: &TestRecord, beta: f64, x: &CovariateVector) -> Result<f64> {
    check_record(rec, x)?;
    if !beta.is_finite() {
        return Err(invalid(format!("effect must be finite, got {beta}")));
    }
    let a = log_partition(beta, x).value;
    let t = sufficient_statistic(rec.counts(), x);
    Ok(log_multinomial_coef(rec.counts()) + beta * t - rec.n_total() as f64 * a)
}

/// Null mean `x^T p(0)` and null variance `x^T Sigma(0) x` of a single trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullMoments {
    pub mean: f64,
    pub variance: f64,
}

impl NullMoments {
    pub fn new(x: &CovariateVector) -> Self {
        let lp = log_partition(0.0, x);
        Self {
            mean: lp.mean,
            variance: lp.variance,
        }
    }

    pub fn z(&self, t: f64, n: u64) -> f64 {
        let n = n as f64;
        (t - n * self.mean) / (n * self.variance).sqrt()
    }
}

/// Per-test statistics. `p` is two-sided.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestStatistics {
    pub t: f64,
    pub z: f64,
    pub p: f64,
    pub n_total: u64,
}

/// Sufficient statistic and standardized score under `beta = 0`. The
/// p-value is filled in with the standard normal reference; use
/// [`TestStatistics::with_null`] for another reference distribution.
pub fn z_score(rec: &TestRecord, x: &CovariateVector) -> Result<TestStatistics> {
    check_record(rec, x)?;
    let t = sufficient_statistic(rec.counts(), x);
    let z = NullMoments::new(x).z(t, rec.n_total());
    Ok(TestStatistics {
        t,
        z,
        p: p_value(z, &NullDistribution::StandardNormal),
        n_total: rec.n_total(),
    })
}

impl TestStatistics {
    pub fn with_null(mut self, f0: &NullDistribution) -> Self {
        self.p = p_value(self.z, f0);
        self
    }
}

/// Reference distribution of the null Z-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NullDistribution {
    StandardNormal,
    MonteCarloEmpirical {
        /// Sorted ascending.
        samples: Vec<f64>,
        seed: u64,
        n_total: u64,
    },
}

impl NullDistribution {
    pub fn sample_count(&self) -> Option<usize> {
        match self {
            Self::StandardNormal => None,
            Self::MonteCarloEmpirical { samples, .. } => Some(samples.len()),
        }
    }
}

/// Two-sided p-value `2 [1 - F0(|z|)]`. The empirical reference uses the
/// add-one tail estimate so the result is never zero.
pub fn p_value(z: f64, f0: &NullDistribution) -> f64 {
    let az = z.abs();
    let tail = match f0 {
        NullDistribution::StandardNormal => normal_sf(az),
        NullDistribution::MonteCarloEmpirical { samples, .. } => {
            let below = samples.partition_point(|&s| s < az);
            let at_or_above = samples.len() - below;
            (1 + at_or_above) as f64 / (1 + samples.len()) as f64
        }
    };
    (2.0 * tail).min(1.0)
}

/// Draws one multinomial vector by sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(rng: &mut R, n: u64, probs: &[f64], out: &mut [u32]) {
    let mut remaining = n;
    let mut mass = 1.0;
    let last = probs.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            out[i] = 0;
            continue;
        }
        if i == last {
            out[i] = remaining as u32;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, q)
            .expect("probability clamped to [0, 1]")
            .sample(rng);
        out[i] = draw as u32;
        remaining -= draw;
        mass -= p;
    }
}

/// Simulates the exact null distribution of the Z-score at a fixed total by
/// drawing `reps` multinomial vectors with `beta = 0`.
pub fn simulate_null(
    x: &CovariateVector,
    n: u64,
    reps: usize,
    seed: u64,
) -> Result<NullDistribution> {
    if n == 0 {
        return Err(invalid("null simulation needs n >= 1"));
    }
    if reps == 0 {
        return Err(invalid("null simulation needs reps >= 1"));
    }
    let probs = multinomial_probs(0.0, x)?;
    let moments = NullMoments::new(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = vec![0u32; x.len()];
    let mut samples: Vec<f64> = (0..reps)
        .map(|_| {
            sample_multinomial(&mut rng, n, &probs, &mut y);
            moments.z(sufficient_statistic(&y, x), n)
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    Ok(NullDistribution::MonteCarloEmpirical {
        samples,
        seed,
        n_total: n,
    })
}

/// Mean of `Z` given total `n` and effect `gamma`:
/// `sqrt(n) x^T [p(gamma) - p(0)] / sqrt(x^T Sigma(0) x)`.
pub fn conditional_mean(n: u64, gamma: f64, x: &CovariateVector) -> f64 {
    let null = log_partition(0.0, x);
    let alt = log_partition(gamma, x);
    (n as f64).sqrt() * (alt.mean - null.mean) / null.variance.sqrt()
}

/// Variance ratio `x^T Sigma(gamma) x / x^T Sigma(0) x`.
pub fn conditional_variance(gamma: f64, x: &CovariateVector) -> f64 {
    log_partition(gamma, x).variance / log_partition(0.0, x).variance
}

pub fn conditional_sd(gamma: f64, x: &CovariateVector) -> f64 {
    conditional_variance(gamma, x).sqrt()
}

/// Solves `A'(beta) = target` for `target` strictly inside `(x_1, x_N)`;
/// targets at or beyond the ends clamp to `-+EFFECT_BOUND`.
pub fn solve_mean_equation(target: f64, x: &CovariateVector, start: f64) -> f64 {
    let root = newton_bisect(
        |b| {
            let lp = log_partition(b, x);
            (lp.mean - target, lp.variance)
        },
        -EFFECT_BOUND,
        EFFECT_BOUND,
        start,
        1e-14,
        200,
    )
    .expect("fixed finite bracket");
    root.x
}

/// Conditional maximum-likelihood effect for one test.
pub fn conditional_mle(rec: &TestRecord, x: &CovariateVector) -> Result<f64> {
    check_record(rec, x)?;
    let t = sufficient_statistic(rec.counts(), x);
    Ok(solve_mean_equation(t / rec.n_total() as f64, x, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x() -> CovariateVector {
        CovariateVector::wheat_biomass()
    }

    fn round2(v: &[f64]) -> Vec<f64> {
        v.iter().map(|p| (p * 100.0).round() / 100.0).collect()
    }

    #[test]
    fn probs_identity_and_reported_vectors() {
        assert_eq!(multinomial_probs(0.0, &x()).unwrap(), vec![0.2; 5]);
        assert_eq!(
            round2(&multinomial_probs(0.5, &x()).unwrap()),
            vec![0.11, 0.14, 0.18, 0.24, 0.33]
        );
        assert_eq!(
            round2(&multinomial_probs(0.1, &x()).unwrap()),
            vec![0.18, 0.19, 0.20, 0.21, 0.22]
        );
        assert_eq!(
            round2(&multinomial_probs(0.78, &x()).unwrap()),
            vec![0.08, 0.11, 0.16, 0.25, 0.40]
        );
        assert!(multinomial_probs(f64::NAN, &x()).is_err());
        assert!(multinomial_probs(f64::INFINITY, &x()).is_err());
    }

    #[test]
    fn log_pmf_by_hand() {
        let r = TestRecord::new(vec![1, 0, 0, 0, 0]);
        assert!((log_pmf(&r, 0.0, &x()).unwrap() - 0.2f64.ln()).abs() < 1e-14);
        // 7!/(1! 1! 5!) = 42
        let r = TestRecord::new(vec![0, 1, 1, 0, 5]);
        let want = (42.0 * 0.2f64.powi(7)).ln();
        assert!((log_pmf(&r, 0.0, &x()).unwrap() - want).abs() < 1e-12);
        assert_eq!(
            log_pmf(&TestRecord::new(vec![0; 5]), 0.0, &x()),
            Err(Error::EmptyRow)
        );
        assert!(matches!(
            log_pmf(&TestRecord::new(vec![1, 2]), 0.0, &x()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn null_variance_and_z() {
        let m = NullMoments::new(&x());
        let xs = x().values().to_vec();
        let s1: f64 = xs.iter().sum();
        let s2: f64 = xs.iter().map(|v| v * v).sum();
        let by_hand = 0.2 * s2 - (0.2 * s1).powi(2);
        assert!((m.variance - by_hand).abs() < 1e-12);
        assert!((m.variance - 0.566_264).abs() < 1e-9);
        assert!((m.variance.sqrt() - 0.752_505).abs() < 1e-6);
        for c in [1, 3, 50] {
            let s = z_score(&TestRecord::new(vec![c; 5]), &x()).unwrap();
            assert!(s.z.abs() < 1e-12);
        }
        let s = z_score(&TestRecord::new(vec![134, 117, 252, 231, 177]), &x()).unwrap();
        assert!(s.z > 0.0);
        assert_eq!(s.n_total, 911);
        assert!(z_score(&TestRecord::new(vec![0; 5]), &x()).is_err());
    }

    #[test]
    fn p_values() {
        assert_eq!(p_value(0.0, &NullDistribution::StandardNormal), 1.0);
        assert!((p_value(1.96, &NullDistribution::StandardNormal) - 0.05).abs() < 1e-3);
        assert!((p_value(-1.96, &NullDistribution::StandardNormal) - 0.05).abs() < 1e-3);
        let f0 = NullDistribution::MonteCarloEmpirical {
            samples: vec![-1.0, 0.5, 1.0, 3.0],
            seed: 0,
            n_total: 1,
        };
        // one sample >= 2 -> 2 * (1 + 1) / 5
        assert!((p_value(2.0, &f0) - 0.8).abs() < 1e-15);
        assert!((p_value(10.0, &f0) - 0.4).abs() < 1e-15);
        assert_eq!(p_value(0.0, &f0), 1.0);
    }

    #[test]
    fn null_simulation_is_deterministic() {
        let a = simulate_null(&x(), 20, 1, 7).unwrap();
        assert_eq!(a.sample_count(), Some(1));
        let b = simulate_null(&x(), 20, 500, 11).unwrap();
        let c = simulate_null(&x(), 20, 500, 11).unwrap();
        assert_eq!(b, c);
        assert!(simulate_null(&x(), 0, 10, 1).is_err());
        assert!(simulate_null(&x(), 10, 0, 1).is_err());
    }

    #[test]
    fn sampler_preserves_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = multinomial_probs(0.7, &x()).unwrap();
        let mut y = [0u32; 5];
        for n in [0, 1, 2, 17, 911] {
            sample_multinomial(&mut rng, n, &p, &mut y);
            assert_eq!(y.iter().map(|&c| c as u64).sum::<u64>(), n);
        }
    }

    #[test]
    fn conditional_moments_reported_values() {
        assert!((conditional_mean(911, 0.1, &x()) - 2.28).abs() <= 0.01);
        assert!((conditional_mean(911, 0.3, &x()) - 6.86).abs() <= 0.01);
        assert!((conditional_mean(5, 1.0, &x()) - 1.59).abs() <= 0.01);
        assert!((conditional_mean(25, 1.0, &x()) - 3.55).abs() <= 0.01);
        assert_eq!(conditional_mean(100, 0.0, &x()), 0.0);
        assert_eq!(conditional_sd(0.0, &x()), 1.0);
        assert!((conditional_sd(1.0, &x()) - 0.89).abs() <= 0.01);
        for g in [0.5, 1.0, 2.0, -1.0] {
            assert!(conditional_sd(g, &x()) < 1.0);
        }
    }

    #[test]
    fn mle_inverts_mean() {
        let x = x();
        for beta in [-3.0, -0.4, 0.0, 0.25, 1.7] {
            let target = log_partition(beta, &x).mean;
            assert!((solve_mean_equation(target, &x, 0.0) - beta).abs() < 1e-10);
        }
        let r = TestRecord::new(vec![5, 0, 0, 0, 0]);
        assert_eq!(conditional_mle(&r, &x).unwrap(), -EFFECT_BOUND);
        let r = TestRecord::new(vec![0, 0, 0, 0, 3]);
        assert_eq!(conditional_mle(&r, &x).unwrap(), EFFECT_BOUND);
    }
}
