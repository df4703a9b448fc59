//! Monte Carlo harness: draw datasets from a known multinomial mixture, run
//! the decision procedures on each, and tally FDR, MDR, and rejections by
//! sample size.
//!
//! Every test in every replicate draws from its own ChaCha stream position
//! (stream = replicate, word offset = test index), so results do not depend
//! on how replicates are scheduled across threads.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CountDataset, CovariateVector};
use crate::error::{invalid, Result};
use crate::fdr::{
    bh_procedure, confusion_counts, fdr_mdr_estimates, lfdr_stepup_all, DecisionResult, ErrorCounts,
};
use crate::loglinear::{
    conditional_mean, conditional_variance, multinomial_probs, p_value, sample_multinomial,
    NullDistribution, NullMoments,
};
use crate::mixture::{
    clfdr_prepared, fit_em_prepared, EmInit, EmOptions, MixtureParams, PreparedData, RowSummary,
};
use crate::normal_mixture::{fit_normal_mixture, lfdr_stats, NormalEmOptions};
use crate::special::{ln_normal_pdf, log_sum_exp};
use crate::threshold::SizePmf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Procedure {
    /// Benjamini-Hochberg on analytic normal p-values.
    Bh,
    /// Step-up on marginal lFDR from a normal mixture fitted to the Z-scores.
    LfdrNormal,
    /// Step-up on exact clFDR under the true mixture.
    ClfdrOracle,
    /// Step-up on clFDR under an EM fit with the true number of components.
    ClfdrAdaptive,
    /// Step-up on clFDR from the normal approximation of `Z | n` under the
    /// true mixture.
    ClfdrApprox,
    /// Step-up on marginal lFDR from the normal approximation of `Z` under
    /// the true mixture and the true size distribution.
    LfdrOracle,
}

impl Procedure {
    pub fn name(self) -> &'static str {
        match self {
            Procedure::Bh => "bh",
            Procedure::LfdrNormal => "lfdr-normal",
            Procedure::ClfdrOracle => "clfdr-oracle",
            Procedure::ClfdrAdaptive => "clfdr-adaptive",
            Procedure::ClfdrApprox => "clfdr-approx",
            Procedure::LfdrOracle => "lfdr-oracle",
        }
    }
}

fn truth_params<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<MixtureParams, D::Error> {
    #[derive(Deserialize)]
    struct Raw {
        gammas: Vec<f64>,
        pis: Vec<f64>,
    }
    let r = Raw::deserialize(d)?;
    MixtureParams::with_boundary_weights(r.gammas, r.pis).map_err(serde::de::Error::custom)
}

fn default_normal_components() -> usize {
    3
}

fn default_em_restarts() -> usize {
    3
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub m: usize,
    /// Truth. Proportions of exactly 0 or 1 are allowed here.
    #[serde(deserialize_with = "truth_params")]
    pub params: MixtureParams,
    pub covariate: CovariateVector,
    /// `None` uses [`SizePmf::synthetic_default`].
    #[serde(default)]
    pub size_pmf: Option<SizePmf>,
    pub alpha: f64,
    pub reps: usize,
    pub seed: u64,
    pub procedures: Vec<Procedure>,
    /// Total components (null included) of the normal mixture fitted for
    /// `lfdr-normal`.
    #[serde(default = "default_normal_components")]
    pub normal_components: usize,
    /// Restarts for the per-replicate EM fits.
    #[serde(default = "default_em_restarts")]
    pub em_restarts: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl SimConfig {
    pub fn new(
        m: usize,
        params: MixtureParams,
        alpha: f64,
        reps: usize,
        seed: u64,
        procedures: Vec<Procedure>,
    ) -> Self {
        Self {
            m,
            params,
            covariate: CovariateVector::wheat_biomass(),
            size_pmf: None,
            alpha,
            reps,
            seed,
            procedures,
            normal_components: default_normal_components(),
            em_restarts: default_em_restarts(),
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid("M must be >= 1"));
        }
        if self.reps == 0 {
            return Err(invalid("reps must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.procedures.is_empty() {
            return Err(invalid("no procedures requested"));
        }
        if self.procedures.contains(&Procedure::LfdrNormal) && self.normal_components < 2 {
            return Err(invalid("lfdr-normal needs at least 2 normal components"));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(invalid("tol must be positive and max_iter >= 1"));
        }
        Ok(())
    }

    pub fn sizes(&self) -> SizePmf {
        self.size_pmf
            .clone()
            .unwrap_or_else(SizePmf::synthetic_default)
    }
}

/// Precomputed sampling distributions for a config.
struct Sampler {
    component: WeightedIndex<f64>,
    size: WeightedIndex<f64>,
    sizes: Vec<u64>,
    probs: Vec<Vec<f64>>,
}

impl Sampler {
    fn new(config: &SimConfig) -> Result<Self> {
        let pmf = config.sizes();
        let component = WeightedIndex::new(config.params.pis())
            .map_err(|e| invalid(format!("mixing weights: {e}")))?;
        let size = WeightedIndex::new(pmf.entries().iter().map(|e| e.1))
            .map_err(|e| invalid(format!("size pmf: {e}")))?;
        let probs = config
            .params
            .gammas()
            .iter()
            .map(|&g| multinomial_probs(g, &config.covariate))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            component,
            size,
            sizes: pmf.support().collect(),
            probs,
        })
    }
}

fn test_rng(seed: u64, rep: u64, m: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng.set_word_pos((m as u128) << 32);
    rng
}

fn rep_seed(seed: u64, rep: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = seed ^ rep.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_with(
    config: &SimConfig,
    sampler: &Sampler,
    rep: u64,
) -> (Vec<Vec<u32>>, Vec<bool>, Vec<u64>) {
    let n_groups = config.covariate.len();
    let mut rows = Vec::with_capacity(config.m);
    let mut truth = Vec::with_capacity(config.m);
    let mut totals = Vec::with_capacity(config.m);
    for m in 0..config.m {
        let mut rng = test_rng(config.seed, rep, m);
        let k = sampler.component.sample(&mut rng);
        let n = sampler.sizes[sampler.size.sample(&mut rng)];
        let mut y = vec![0u32; n_groups];
        sample_multinomial(&mut rng, n, &sampler.probs[k], &mut y);
        rows.push(y);
        truth.push(k != 0);
        totals.push(n);
    }
    (rows, truth, totals)
}

/// Draws replicate `rep_index`: component from the mixing proportions,
/// total from the size pmf, counts from the component's multinomial.
/// `truth[m]` is true for non-null tests.
pub fn sample_dataset(config: &SimConfig, rep_index: u64) -> Result<(CountDataset, Vec<bool>)> {
    config.validate()?;
    let sampler = Sampler::new(config)?;
    let (rows, truth, _) = sample_with(config, &sampler, rep_index);
    Ok((
        CountDataset::new(config.covariate.clone(), rows, None)?,
        truth,
    ))
}

/// Conditional normal-approximation density terms `log pi_k phi(z; mu(n,
/// gamma_k), sigma^2(gamma_k))`.
struct NormalApprox {
    log_pis: Vec<f64>,
    mu1: Vec<f64>,
    var: Vec<f64>,
}

impl NormalApprox {
    fn new(params: &MixtureParams, x: &CovariateVector) -> Self {
        Self {
            log_pis: params.pis().iter().map(|p| p.ln()).collect(),
            mu1: params
                .gammas()
                .iter()
                .map(|&g| conditional_mean(1, g, x))
                .collect(),
            var: params
                .gammas()
                .iter()
                .map(|&g| conditional_variance(g, x))
                .collect(),
        }
    }

    fn clfdr(&self, z: f64, n: u64) -> f64 {
        let sn = (n as f64).sqrt();
        let t: Vec<f64> = (0..self.log_pis.len())
            .map(|k| self.log_pis[k] + ln_normal_pdf(z, sn * self.mu1[k], self.var[k]))
            .collect();
        (t[0] - log_sum_exp(&t)).exp().min(1.0)
    }

    fn lfdr(&self, z: f64, pmf: &SizePmf) -> f64 {
        let null = self.log_pis[0] + ln_normal_pdf(z, 0.0, 1.0);
        let mut t = vec![null];
        for &(n, p) in pmf.entries() {
            if p <= 0.0 {
                continue;
            }
            let sn = (n as f64).sqrt();
            for k in 1..self.log_pis.len() {
                t.push(p.ln() + self.log_pis[k] + ln_normal_pdf(z, sn * self.mu1[k], self.var[k]));
            }
        }
        (null - log_sum_exp(&t)).exp().min(1.0)
    }
}

/// Per-size tallies summed over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SizeBin {
    pub n: u64,
    pub tests: u64,
    pub alternatives: u64,
    pub rejections: u64,
    pub true_rejections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureReport {
    pub procedure: Procedure,
    pub fdr_hat: f64,
    pub mdr_hat: f64,
    pub mean_r: f64,
    /// Binomial standard error `sqrt(fdr (1 - fdr) / reps)` of `fdr_hat`.
    pub mc_error: f64,
    /// Standard error of the mean false discovery proportion.
    pub fdp_se: f64,
    pub reps_used: usize,
    /// Replicates dropped because a fit did not converge.
    pub reps_failed: usize,
    pub rejections_by_n: Vec<SizeBin>,
}

impl ProcedureReport {
    /// Summed rejections over bins with `lo <= n <= hi`.
    pub fn rejections_in(&self, lo: u64, hi: u64) -> u64 {
        self.rejections_by_n
            .iter()
            .filter(|b| b.n >= lo && b.n <= hi)
            .map(|b| b.rejections)
            .sum()
    }

    pub fn true_rejections_in(&self, lo: u64, hi: u64) -> u64 {
        self.rejections_by_n
            .iter()
            .filter(|b| b.n >= lo && b.n <= hi)
            .map(|b| b.true_rejections)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub m: usize,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub procedures: Vec<ProcedureReport>,
}

impl SimReport {
    pub fn get(&self, p: Procedure) -> Option<&ProcedureReport> {
        self.procedures.iter().find(|r| r.procedure == p)
    }

    /// Plot-ready `procedure,n,tests,alternatives,rejections,true_rejections`.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("procedure,n,tests,alternatives,rejections,true_rejections\n");
        for r in &self.procedures {
            for b in &r.rejections_by_n {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.procedure.name(),
                    b.n,
                    b.tests,
                    b.alternatives,
                    b.rejections,
                    b.true_rejections
                ));
            }
        }
        s
    }
}

struct ProcOutcome {
    counts: Option<ErrorCounts>,
    decision: Option<DecisionResult>,
}

struct RepOutcome {
    truth: Vec<bool>,
    totals: Vec<u64>,
    per_proc: Vec<ProcOutcome>,
}

fn run_rep(
    config: &SimConfig,
    sampler: &Sampler,
    approx: &NormalApprox,
    pmf: &SizePmf,
    rep: u64,
) -> Result<RepOutcome> {
    let (rows, truth, totals) = sample_with(config, sampler, rep);
    let x = &config.covariate;
    let summaries: Vec<RowSummary> = rows.iter().map(|y| RowSummary::new(y, x)).collect();
    let data = PreparedData::from_summaries(x.clone(), summaries);
    let moments = NullMoments::new(x);
    let z: Vec<f64> = data
        .rows()
        .iter()
        .map(|r| moments.z(r.t, r.n as u64))
        .collect();
    let alpha = config.alpha;
    let mut per_proc = Vec::with_capacity(config.procedures.len());
    for &p in &config.procedures {
        let stats: Option<Vec<f64>> = match p {
            Procedure::Bh => None,
            Procedure::ClfdrOracle => Some(clfdr_prepared(&data, &config.params)),
            Procedure::ClfdrApprox => Some(
                z.iter()
                    .zip(&totals)
                    .map(|(&v, &n)| approx.clfdr(v, n))
                    .collect(),
            ),
            Procedure::LfdrOracle => Some(z.iter().map(|&v| approx.lfdr(v, pmf)).collect()),
            Procedure::ClfdrAdaptive => {
                let opts = EmOptions {
                    tol: config.tol,
                    max_iter: config.max_iter,
                    restarts: config.em_restarts,
                    seed: rep_seed(config.seed, rep),
                };
                let fit = fit_em_prepared(&data, config.params.k(), &EmInit::Default, &opts)?;
                fit.converged.then(|| clfdr_prepared(&data, &fit.params))
            }
            Procedure::LfdrNormal => {
                let opts = NormalEmOptions {
                    tol: config.tol,
                    max_iter: config.max_iter,
                    restarts: config.em_restarts,
                    seed: rep_seed(config.seed ^ 0x5EED, rep),
                };
                let fit = fit_normal_mixture(&z, config.normal_components, &opts)?;
                fit.converged.then(|| lfdr_stats(&z, &fit.params))
            }
        };
        let decision = match (p, stats) {
            (Procedure::Bh, _) => {
                let pv: Vec<f64> = z
                    .iter()
                    .map(|&v| p_value(v, &NullDistribution::StandardNormal))
                    .collect();
                Some(bh_procedure(&pv, alpha)?)
            }
            (_, Some(s)) => Some(lfdr_stepup_all(&s, alpha)?),
            (_, None) => None,
        };
        let counts = decision
            .as_ref()
            .map(|d| confusion_counts(d, &truth))
            .transpose()?;
        per_proc.push(ProcOutcome { counts, decision });
    }
    Ok(RepOutcome {
        truth,
        totals,
        per_proc,
    })
}

/// Runs every replicate (in parallel) and aggregates in replicate order.
pub fn run_simulation(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let sampler = Sampler::new(config)?;
    let approx = NormalApprox::new(&config.params, &config.covariate);
    let pmf = config.sizes();
    let outcomes: Vec<RepOutcome> = (0..config.reps as u64)
        .into_par_iter()
        .map(|rep| run_rep(config, &sampler, &approx, &pmf, rep))
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::with_capacity(config.procedures.len());
    for (j, &p) in config.procedures.iter().enumerate() {
        let mut batches = Vec::with_capacity(outcomes.len());
        let mut bins: BTreeMap<u64, SizeBin> = BTreeMap::new();
        let mut failed = 0;
        for o in &outcomes {
            let po = &o.per_proc[j];
            let (Some(c), Some(d)) = (po.counts, po.decision.as_ref()) else {
                failed += 1;
                continue;
            };
            batches.push(c);
            for (m, &n) in o.totals.iter().enumerate() {
                let b = bins.entry(n).or_insert(SizeBin {
                    n,
                    ..Default::default()
                });
                b.tests += 1;
                let alt = o.truth[m];
                b.alternatives += u64::from(alt);
                if d.delta[m].is_reject() {
                    b.rejections += 1;
                    b.true_rejections += u64::from(alt);
                }
            }
        }
        let (fdr_hat, mdr_hat) = fdr_mdr_estimates(&batches);
        let used = batches.len();
        let mean_r = if used == 0 {
            0.0
        } else {
            batches.iter().map(|b| b.r as f64).sum::<f64>() / used as f64
        };
        let mc_error = if used == 0 {
            0.0
        } else {
            (fdr_hat * (1.0 - fdr_hat) / used as f64).sqrt()
        };
        let fdp_se = if used < 2 {
            0.0
        } else {
            let var = batches
                .iter()
                .map(|b| (b.fdp() - fdr_hat).powi(2))
                .sum::<f64>()
                / (used - 1) as f64;
            (var / used as f64).sqrt()
        };
        reports.push(ProcedureReport {
            procedure: p,
            fdr_hat,
            mdr_hat,
            mean_r,
            mc_error,
            fdp_se,
            reps_used: used,
            reps_failed: failed,
            rejections_by_n: bins.into_values().collect(),
        });
    }
    Ok(SimReport {
        m: config.m,
        reps: config.reps,
        alpha: config.alpha,
        seed: config.seed,
        procedures: reports,
    })
}

/// Uniform draw helper kept for callers building their own replicate seeds.
pub fn replicate_seed(seed: u64, rep: u64) -> u64 {
    rep_seed(seed, rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(params: MixtureParams, procs: Vec<Procedure>) -> SimConfig {
        SimConfig::new(200, params, 0.1, 4, 17, procs)
    }

    #[test]
    fn all_null_truth() {
        // pi = (1, 0) is not a valid MixtureParams; use a vanishing
        // alternative weight and check the sampler never picks it with a
        // zero weight by going through WeightedIndex directly.
        let w = WeightedIndex::new([1.0, 0.0]).unwrap();
        let mut rng = test_rng(1, 0, 0);
        assert!((0..1000).all(|_| w.sample(&mut rng) == 0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = cfg(
            MixtureParams::two_group(0.7, 1.0).unwrap(),
            vec![Procedure::ClfdrOracle],
        );
        let a = sample_dataset(&c, 3).unwrap();
        let b = sample_dataset(&c, 3).unwrap();
        assert_eq!(a, b);
        let d = sample_dataset(&c, 4).unwrap();
        assert_ne!(a.0, d.0);
    }

    #[test]
    fn config_validation() {
        let p = MixtureParams::two_group(0.7, 1.0).unwrap();
        let mut c = cfg(p.clone(), vec![Procedure::Bh]);
        c.reps = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(p.clone(), vec![]);
        assert!(c.validate().is_err());
        c.procedures = vec![Procedure::Bh];
        c.alpha = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg(p, vec![Procedure::LfdrNormal]);
        c.normal_components = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json() {
        let json = r#"{
            "m": 50, "params": {"gammas": [0.0, 1.0], "pis": [0.8, 0.2]},
            "covariate": [0.86, 1.34, 1.81, 2.37, 3.0],
            "alpha": 0.1, "reps": 2, "seed": 5,
            "procedures": ["bh", "clfdr-oracle", "lfdr-normal", "clfdr-adaptive", "clfdr-approx", "lfdr-oracle"]
        }"#;
        let c: SimConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.normal_components, 3);
        assert!(c.size_pmf.is_none());
        let bad = json.replace("[0.8, 0.2]", "[0.8, 0.3]");
        assert!(serde_json::from_str::<SimConfig>(&bad).is_err());
        let r = run_simulation(&c).unwrap();
        assert_eq!(r.procedures.len(), 6);
        for p in &r.procedures {
            assert!((0.0..=1.0).contains(&p.fdr_hat));
            assert!((0.0..=1.0).contains(&p.mdr_hat));
            let tests: u64 = p.rejections_by_n.iter().map(|b| b.tests).sum();
            assert_eq!(tests as usize, 50 * p.reps_used);
        }
    }

    #[test]
    fn seeds_differ() {
        assert_ne!(rep_seed(1, 0), rep_seed(1, 1));
        assert_ne!(rep_seed(1, 0), rep_seed(2, 0));
    }

    #[test]
    fn per_test_streams_do_not_overlap() {
        let mut a = test_rng(9, 0, 0);
        let mut b = test_rng(9, 0, 1);
        let mut c = test_rng(9, 1, 0);
        let va: u64 = a.random();
        assert_ne!(va, b.random::<u64>());
        assert_ne!(va, c.random::<u64>());
    }
}
