//! Two-group analytics under the normal approximation of the Z-score.
//!
//! Given total `n`, a null test has `Z ~ N(0, 1)` and a non-null test with
//! effect `gamma1` has `Z ~ N(mu(n), sigma^2)`, where `mu(n) = sqrt(n) mu(1)`
//! grows with `n` and `sigma^2 < 1`. The conditional local FDR
//! `clFDR(z, n) = pi0 phi(z) / f(z | n)` is U-shaped in `z`, so its
//! rejection region `{clFDR <= lambda}` is an interval `[a(n), b(n)]` whose
//! left end moves right as `n` grows once `mu(n)^2 > 2 log(sigma k)`,
//! `k = pi0 (1 - lambda) / ((1 - pi0) lambda)`. The marginal local FDR mixes
//! the alternative over a sample-size distribution and has a single
//! threshold for every `n`.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::data::CovariateVector;
use crate::error::{invalid, Error, Result};
use crate::loglinear::{conditional_mean, conditional_variance};
use crate::roots::bisect;
use crate::special::{ln_normal_pdf, log_sum_exp, normal_sf};

/// Sample-size distribution `p(n)` on distinct `n >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u64, f64)>", into = "Vec<(u64, f64)>")]
pub struct SizePmf(Vec<(u64, f64)>);

impl SizePmf {
    pub fn new(mut entries: Vec<(u64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("size pmf is empty"));
        }
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(invalid(format!("size pmf repeats n = {}", w[0].0)));
            }
        }
        for &(n, p) in &entries {
            if n == 0 {
                return Err(invalid("size pmf support must be >= 1"));
            }
            if !(p >= 0.0) || !p.is_finite() {
                return Err(invalid(format!(
                    "size pmf has bad probability {p} at n = {n}"
                )));
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(invalid(format!("size pmf sums to {total}")));
        }
        Ok(Self(entries))
    }

    pub fn point_mass(n: u64) -> Result<Self> {
        Self::new(vec![(n, 1.0)])
    }

    /// Heavy-tailed synthetic sizes: 59% of the mass spread evenly over
    /// `n = 1..=10`, the rest on `n = 11..=911` proportional to `n^-2.5`
    /// (about 3.7% of all mass above `n = 51`).
    pub fn synthetic_default() -> Self {
        let head = 0.59;
        let tail_w: Vec<f64> = (11..=911u64).map(|n| (n as f64).powf(-2.5)).collect();
        let tail_total: f64 = tail_w.iter().sum();
        let mut v: Vec<(u64, f64)> = (1..=10u64).map(|n| (n, head / 10.0)).collect();
        v.extend(
            (11..=911u64)
                .zip(tail_w)
                .map(|(n, w)| (n, (1.0 - head) * w / tail_total)),
        );
        Self(v)
    }

    /// Reads `n,prob` rows. A non-numeric first row is treated as a header.
    pub fn from_csv<R: Read>(source: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(source);
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Io(e.to_string()))?;
            if rec.len() != 2 {
                return Err(Error::RowLength {
                    row: i + 1,
                    expected: 2,
                    found: rec.len(),
                });
            }
            let n = rec[0].parse::<u64>();
            let p = rec[1].parse::<f64>();
            match (n, p) {
                (Ok(n), Ok(p)) => entries.push((n, p)),
                _ if i == 0 => continue,
                (Err(_), _) => {
                    return Err(Error::MalformedCell {
                        row: i + 1,
                        col: 1,
                        cell: rec[0].to_string(),
                    })
                }
                (_, Err(_)) => {
                    return Err(Error::MalformedCell {
                        row: i + 1,
                        col: 2,
                        cell: rec[1].to_string(),
                    })
                }
            }
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(u64, f64)] {
        &self.0
    }

    pub fn support(&self) -> impl Iterator<Item = u64> + '_ {
        self.0.iter().map(|e| e.0)
    }

    /// `P(N <= n)`.
    pub fn cdf(&self, n: u64) -> f64 {
        self.0.iter().filter(|e| e.0 <= n).map(|e| e.1).sum()
    }
}

impl TryFrom<Vec<(u64, f64)>> for SizePmf {
    type Error = Error;
    fn try_from(v: Vec<(u64, f64)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SizePmf> for Vec<(u64, f64)> {
    fn from(p: SizePmf) -> Self {
        p.0
    }
}

/// Two-group model: null with probability `pi0`, effect `gamma1 > 0`
/// otherwise, sizes drawn from `size_pmf`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoGroupModel {
    pi0: f64,
    gamma1: f64,
    covariate: CovariateVector,
    size_pmf: SizePmf,
    mu1: f64,
    sigma2: f64,
}

impl TwoGroupModel {
    pub fn new(
        pi0: f64,
        gamma1: f64,
        covariate: CovariateVector,
        size_pmf: SizePmf,
    ) -> Result<Self> {
        if !(pi0 > 0.0 && pi0 < 1.0) {
            return Err(invalid(format!("pi0 must lie in (0, 1), got {pi0}")));
        }
        if !(gamma1 > 0.0) || !gamma1.is_finite() {
            return Err(invalid(format!(
                "the two-group model needs an effect gamma1 > 0, got {gamma1}"
            )));
        }
        let mu1 = conditional_mean(1, gamma1, &covariate);
        let sigma2 = conditional_variance(gamma1, &covariate);
        Ok(Self {
            pi0,
            gamma1,
            covariate,
            size_pmf,
            mu1,
            sigma2,
        })
    }

    pub fn pi0(&self) -> f64 {
        self.pi0
    }

    pub fn pi1(&self) -> f64 {
        1.0 - self.pi0
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn covariate(&self) -> &CovariateVector {
        &self.covariate
    }

    pub fn size_pmf(&self) -> &SizePmf {
        &self.size_pmf
    }

    /// `mu(n, gamma1)`.
    pub fn mu(&self, n: u64) -> f64 {
        (n as f64).sqrt() * self.mu1
    }

    /// `sigma^2(gamma1)`.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// `k = pi0 (1 - lambda) / ((1 - pi0) lambda)`.
    pub fn odds_factor(&self, lambda: f64) -> f64 {
        self.pi0 * (1.0 - lambda) / ((1.0 - self.pi0) * lambda)
    }
}

fn logistic_null(log_alt_over_null: f64) -> f64 {
    // 1 / (1 + e^r)
    if log_alt_over_null > 0.0 {
        let e = (-log_alt_over_null).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + log_alt_over_null.exp())
    }
}

/// `pi0 phi(z; 0, 1) / f(z | n)`.
pub fn clfdr_zn(z: f64, n: u64, model: &TwoGroupModel) -> f64 {
    let r = model.pi1().ln() + ln_normal_pdf(z, model.mu(n), model.sigma2)
        - model.pi0.ln()
        - ln_normal_pdf(z, 0.0, 1.0);
    logistic_null(r)
}

/// Marginal `pi0 phi(z; 0, 1) / f(z)` with the alternative mixed over
/// the size pmf.
pub fn lfdr_z(z: f64, model: &TwoGroupModel) -> f64 {
    let terms: Vec<f64> = model
        .size_pmf
        .entries()
        .iter()
        .filter(|e| e.1 > 0.0)
        .map(|&(n, p)| p.ln() + ln_normal_pdf(z, model.mu(n), model.sigma2))
        .collect();
    let r = model.pi1().ln() + log_sum_exp(&terms) - model.pi0.ln() - ln_normal_pdf(z, 0.0, 1.0);
    logistic_null(r)
}

/// `{z : clFDR(z, n) <= lambda} = [a, b]`. `b` is infinite in the
/// unit-variance case, where the region is one-sided.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionBoundary {
    pub n: u64,
    pub a: f64,
    pub b: f64,
    pub exists: bool,
}

/// Variances this close to 1 use the linear boundary.
pub const UNIT_VARIANCE_TOL: f64 = 1e-12;

/// Roots of `z^2 (sigma^2 - 1) + 2 z mu - 2 sigma^2 log(sigma k) - mu^2 = 0`.
pub fn rejection_boundary(n: u64, model: &TwoGroupModel, lambda: f64) -> Result<RejectionBoundary> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    let mu = model.mu(n);
    let s2 = model.sigma2;
    let k = model.odds_factor(lambda);
    if (s2 - 1.0).abs() <= UNIT_VARIANCE_TOL {
        // 2 z mu - 2 log k - mu^2 = 0
        return Ok(RejectionBoundary {
            n,
            a: (mu * mu + 2.0 * k.ln()) / (2.0 * mu),
            b: f64::INFINITY,
            exists: true,
        });
    }
    if s2 > 1.0 {
        return Err(invalid(
            "alternative variance exceeds 1; the rejection region is not an interval",
        ));
    }
    let log_sk = (s2.sqrt() * k).ln();
    let disc = mu * mu * s2 - 2.0 * (1.0 - s2) * s2 * log_sk;
    if disc < 0.0 {
        return Ok(RejectionBoundary {
            n,
            a: f64::NAN,
            b: f64::NAN,
            exists: false,
        });
    }
    let root = disc.sqrt();
    // (mu - root) / (1 - s2) rewritten to avoid cancellation.
    let a = (mu * mu + 2.0 * s2 * log_sk) / (mu + root);
    let b = (mu + root) / (1.0 - s2);
    Ok(RejectionBoundary {
        n,
        a,
        b,
        exists: true,
    })
}

/// Smallest `n <= n_max` with `mu(n, gamma1)^2 > 2 log(sigma k)`, after
/// which `a(n)` increases with `n`. `None` if no such `n`.
pub fn monotone_from_n(model: &TwoGroupModel, lambda: f64, n_max: u64) -> Option<u64> {
    let rhs = 2.0 * (model.sigma() * model.odds_factor(lambda)).ln();
    (1..=n_max).find(|&n| {
        let mu = model.mu(n);
        mu * mu > rhs
    })
}

/// `1 - Phi(threshold; mu(n), sigma^2)`.
pub fn power_at_threshold(threshold: f64, n: u64, model: &TwoGroupModel) -> f64 {
    normal_sf((threshold - model.mu(n)) / model.sigma())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Negative,
    Zero,
    Positive,
}

/// Analytic `d clFDR(z, n) / dz`.
pub fn clfdr_derivative(z: f64, n: u64, model: &TwoGroupModel) -> f64 {
    let mu = model.mu(n);
    let s2 = model.sigma2;
    let c = clfdr_zn(z, n, model);
    // pi0 pi1 phi0 phi1 / f^2 = c (1 - c)
    c * (1.0 - c) * (z * (1.0 - s2) - mu) / s2
}

/// Sign of the derivative from its `z (1 - sigma^2) - mu(n)` factor, which
/// vanishes at `z = mu(n) / (1 - sigma^2)`.
pub fn clfdr_derivative_sign(z: f64, n: u64, model: &TwoGroupModel) -> Sign {
    let mu = model.mu(n);
    let factor = z * (1.0 - model.sigma2) - mu;
    let scale = 1e-12 * mu.abs().max(z.abs()).max(1.0);
    if factor.abs() <= scale {
        Sign::Zero
    } else if factor < 0.0 {
        Sign::Negative
    } else {
        Sign::Positive
    }
}

/// Location of the minimum of `clFDR(., n)`.
pub fn clfdr_turning_point(n: u64, model: &TwoGroupModel) -> f64 {
    model.mu(n) / (1.0 - model.sigma2)
}

/// Grid step used to locate the first marginal threshold crossing before
/// bisection refines it.
pub const LFDR_SCAN_STEP: f64 = 0.01;

/// Smallest `z` in `[0, 50]` with `lFDR(z) <= lambda`, refined by
/// bisection to 1e-8. The marginal lFDR is not monotone over the whole
/// range, so the crossing is bracketed by a forward scan first.
pub fn lfdr_threshold(model: &TwoGroupModel, lambda: f64) -> Option<f64> {
    let f = |z: f64| lfdr_z(z, model) - lambda;
    if f(0.0) <= 0.0 {
        return Some(0.0);
    }
    let steps = (50.0 / LFDR_SCAN_STEP).round() as usize;
    let mut prev = 0.0;
    for i in 1..=steps {
        let z = i as f64 * LFDR_SCAN_STEP;
        if f(z) <= 0.0 {
            return bisect(f, prev, z, 1e-8);
        }
        prev = z;
    }
    None
}

/// One row of the power comparison: correct-rejection probabilities of the
/// conditional and marginal thresholds, each read as a one-sided region
/// `[threshold, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub n: u64,
    pub mu: f64,
    pub clfdr_threshold: f64,
    pub lfdr_threshold: f64,
    pub power_clfdr: f64,
    pub power_lfdr: f64,
    pub difference: f64,
}

pub fn power_table(model: &TwoGroupModel, lambda: f64, ns: &[u64]) -> Result<Vec<PowerRow>> {
    let c = lfdr_threshold(model, lambda)
        .ok_or_else(|| invalid("marginal lFDR never reaches lambda on [0, 50]"))?;
    ns.iter()
        .map(|&n| {
            let bd = rejection_boundary(n, model, lambda)?;
            let (thr, pc) = if bd.exists {
                (bd.a, power_at_threshold(bd.a, n, model))
            } else {
                (f64::NAN, 0.0)
            };
            let pl = power_at_threshold(c, n, model);
            Ok(PowerRow {
                n,
                mu: model.mu(n),
                clfdr_threshold: thr,
                lfdr_threshold: c,
                power_clfdr: pc,
                power_lfdr: pl,
                difference: pc - pl,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub lambda: f64,
    pub pi0: f64,
    pub gamma1: f64,
    pub min_n: Option<u64>,
}

/// Smallest `n` satisfying the threshold-monotonicity inequality over a grid
/// of `(lambda, pi0, gamma1)`.
pub fn frontier_table(
    covariate: &CovariateVector,
    settings: &[(f64, f64)],
    gammas: &[f64],
    n_max: u64,
) -> Result<Vec<FrontierRow>> {
    let mut out = Vec::with_capacity(settings.len() * gammas.len());
    for &(lambda, pi0) in settings {
        for &g in gammas {
            let m = TwoGroupModel::new(pi0, g, covariate.clone(), SizePmf::point_mass(1)?)?;
            out.push(FrontierRow {
                lambda,
                pi0,
                gamma1: g,
                min_n: monotone_from_n(&m, lambda, n_max),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(pi0: f64, gamma1: f64) -> TwoGroupModel {
        TwoGroupModel::new(
            pi0,
            gamma1,
            CovariateVector::wheat_biomass(),
            SizePmf::synthetic_default(),
        )
        .unwrap()
    }

    #[test]
    fn size_pmf_validation() {
        assert!(SizePmf::new(vec![]).is_err());
        assert!(SizePmf::new(vec![(0, 1.0)]).is_err());
        assert!(SizePmf::new(vec![(3, 0.5), (3, 0.5)]).is_err());
        assert!(SizePmf::new(vec![(3, 0.5), (4, 0.4)]).is_err());
        assert!(SizePmf::new(vec![(3, 1.5), (4, -0.5)]).is_err());
        let p = SizePmf::from_csv("n,prob\n5,0.25\n1,0.75\n".as_bytes()).unwrap();
        assert_eq!(p.entries(), &[(1, 0.75), (5, 0.25)]);
        assert!(SizePmf::from_csv("5,0.25\n1,x\n".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_default_shape() {
        let p = SizePmf::synthetic_default();
        assert!((p.cdf(10) - 0.59).abs() < 1e-12);
        assert!((p.cdf(911) - 1.0).abs() < 1e-12);
        let above_51 = 1.0 - p.cdf(51);
        assert!(above_51 > 0.02 && above_51 < 0.05, "{above_51}");
        assert!(SizePmf::new(p.entries().to_vec()).is_ok());
    }

    #[test]
    fn gamma_must_be_positive() {
        let x = CovariateVector::wheat_biomass();
        assert!(TwoGroupModel::new(0.5, 0.0, x.clone(), SizePmf::point_mass(5).unwrap()).is_err());
        assert!(TwoGroupModel::new(0.5, -1.0, x.clone(), SizePmf::point_mass(5).unwrap()).is_err());
        assert!(TwoGroupModel::new(1.0, 1.0, x, SizePmf::point_mass(5).unwrap()).is_err());
    }

    #[test]
    fn clfdr_tends_to_one_on_the_left() {
        let m = model(0.5, 1.0);
        for n in [5, 25, 100] {
            for z in [-10.0, -20.0, -40.0] {
                assert!(clfdr_zn(z, n, &m) > 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn boundary_reported_thresholds() {
        let m = model(0.5, 1.0);
        let a5 = rejection_boundary(5, &m, 0.2).unwrap();
        let a25 = rejection_boundary(25, &m, 0.2).unwrap();
        assert!((a5.a - 1.59).abs() <= 0.02, "{a5:?}");
        assert!((a25.a - 2.20).abs() <= 0.02, "{a25:?}");
        for b in [a5, a25] {
            assert!((clfdr_zn(b.a, b.n, &m) - 0.2).abs() < 1e-8);
            assert!((clfdr_zn(b.b, b.n, &m) - 0.2).abs() < 1e-8);
            assert!(b.a <= b.b);
        }
    }

    #[test]
    fn boundary_rejects_bad_lambda() {
        let m = model(0.5, 1.0);
        assert!(rejection_boundary(5, &m, 0.0).is_err());
        assert!(rejection_boundary(5, &m, 1.0).is_err());
        assert!(rejection_boundary(0, &m, 0.2).is_err());
    }

    #[test]
    fn empty_region_when_discriminant_negative() {
        // Very high pi0 and tiny lambda at n = 1: the alternative never
        // dominates enough.
        let m = model(0.99, 0.5);
        let b = rejection_boundary(1, &m, 0.001).unwrap();
        assert!(!b.exists);
        let grid_hit = (-400..=400).any(|i| clfdr_zn(i as f64 * 0.05, 1, &m) <= 0.001);
        assert!(!grid_hit);
    }

    #[test]
    fn monotone_from_examples() {
        let m = model(0.5, 1.0);
        let n = monotone_from_n(&m, 0.2, 1000).unwrap();
        assert!(n <= 10);
        assert_eq!(n, 6);
        let m = model(0.5, 0.5);
        assert!(monotone_from_n(&m, 0.2, 1000).unwrap() <= 25);
        // sigma k < 1: every n qualifies.
        let m = model(0.1, 1.0);
        assert!(m.sigma() * m.odds_factor(0.5) < 1.0);
        assert_eq!(monotone_from_n(&m, 0.5, 1000), Some(1));
        let m = model(0.5, 0.01);
        assert_eq!(monotone_from_n(&m, 0.2, 3), None);
    }

    #[test]
    fn power_reported_values() {
        let m = model(0.5, 1.0);
        assert!((power_at_threshold(1.98, 5, &m) - 0.33).abs() <= 0.01);
        assert!((power_at_threshold(1.98, 25, &m) - 0.96).abs() <= 0.01);
        assert!((power_at_threshold(1.98, 100, &m) - 1.00).abs() <= 0.005);
    }

    #[test]
    fn derivative_sign() {
        let m = model(0.5, 1.0);
        for n in [5, 25, 100] {
            let tp = clfdr_turning_point(n, &m);
            assert_eq!(clfdr_derivative_sign(tp, n, &m), Sign::Zero);
            assert_eq!(clfdr_derivative_sign(tp - 0.5, n, &m), Sign::Negative);
            assert_eq!(clfdr_derivative_sign(tp + 0.5, n, &m), Sign::Positive);
        }
    }

    #[test]
    fn lfdr_point_mass_equals_clfdr() {
        let x = CovariateVector::wheat_biomass();
        for n in [3, 25, 400] {
            let m =
                TwoGroupModel::new(0.7, 0.8, x.clone(), SizePmf::point_mass(n).unwrap()).unwrap();
            for i in -40..=80 {
                let z = i as f64 * 0.1;
                let a = lfdr_z(z, &m);
                let b = clfdr_zn(z, n, &m);
                assert!((a - b).abs() <= 1e-15, "z {z}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lfdr_far_alternative() {
        let x = CovariateVector::wheat_biomass();
        let pmf = SizePmf::new(vec![(100, 0.5), (200, 0.5)]).unwrap();
        let m = TwoGroupModel::new(0.5, 1.0, x, pmf).unwrap();
        assert!(m.mu(100) >= 5.0);
        assert!(lfdr_z(0.0, &m) > 0.999_999);
    }

    #[test]
    fn lfdr_threshold_with_default_pmf() {
        let m = model(0.5, 1.0);
        let c = lfdr_threshold(&m, 0.2).unwrap();
        assert!((lfdr_z(c, &m) - 0.2).abs() < 1e-6);
        // Same regime as the conditional thresholds at n = 5 and n = 25.
        assert!(c > 1.59 && c < 2.2 + 0.3, "{c}");
    }
}
