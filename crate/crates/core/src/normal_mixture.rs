//! Marginal two-group machinery for Z-scores: a normal mixture whose first
//! component is pinned to `N(0, 1)`, fit by EM, and the resulting local FDR.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{floor_proportions, PI_FLOOR};
use crate::special::{ln_normal_pdf, log_sum_exp, pairwise_sum};

/// Smallest variance a free component may take.
pub const VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalComponent {
    pub pi: f64,
    pub mu: f64,
    pub sigma2: f64,
}

/// `pi0 N(0, 1) + sum_k pi_k N(mu_k, sigma2_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMixtureParams {
    pub pi0: f64,
    pub components: Vec<NormalComponent>,
}

impl NormalMixtureParams {
    pub fn new(pi0: f64, components: Vec<NormalComponent>) -> Result<Self> {
        if !(0.0..=1.0).contains(&pi0) {
            return Err(Error::InvalidMixture(format!("pi0 = {pi0} outside [0, 1]")));
        }
        let total = pi0 + components.iter().map(|c| c.pi).sum::<f64>();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidMixture(format!("proportions sum to {total}")));
        }
        for c in &components {
            if !(c.pi >= 0.0)
                || !c.mu.is_finite()
                || !(c.sigma2 >= VARIANCE_FLOOR)
                || !c.sigma2.is_finite()
            {
                return Err(Error::InvalidMixture(format!("bad component {c:?}")));
            }
        }
        Ok(Self { pi0, components })
    }

    /// Total number of components including the null.
    pub fn n_components(&self) -> usize {
        self.components.len() + 1
    }

    fn log_terms(&self, z: f64, out: &mut [f64]) {
        out[0] = self.pi0.ln() + ln_normal_pdf(z, 0.0, 1.0);
        for (o, c) in out[1..].iter_mut().zip(&self.components) {
            *o = c.pi.ln() + ln_normal_pdf(z, c.mu, c.sigma2);
        }
    }
}

/// Mixture density `f(z)`.
pub fn normal_mixture_density(z: f64, params: &NormalMixtureParams) -> f64 {
    let mut t = vec![0.0; params.n_components()];
    params.log_terms(z, &mut t);
    log_sum_exp(&t).exp()
}

/// `pi0 phi(z) / f(z)` for each score, capped at 1.
pub fn lfdr_stats(z: &[f64], params: &NormalMixtureParams) -> Vec<f64> {
    let mut t = vec![0.0; params.n_components()];
    z.iter()
        .map(|&v| {
            params.log_terms(v, &mut t);
            if t[0] == f64::NEG_INFINITY {
                return 0.0;
            }
            (t[0] - log_sum_exp(&t)).exp().min(1.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalEmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for NormalEmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMixtureFit {
    pub params: NormalMixtureParams,
    /// Log-likelihood per iteration since the last component re-seed.
    pub loglik_trace: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub aic: f64,
    pub bic: f64,
    /// Free parameter count behind AIC/BIC: `3(K - 1)`.
    pub n_params: usize,
    /// A component hit the variance floor, was re-seeded, and hit it again.
    pub collapsed: bool,
    pub reseeded: bool,
}

/// JSON layout: `{pi0, components: [{pi, mu, sigma2}], aic, bic, ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalFitSummary {
    pub pi0: f64,
    pub components: Vec<NormalComponent>,
    pub aic: f64,
    pub bic: f64,
    pub loglik: f64,
    pub n_params: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl NormalMixtureFit {
    pub fn summary(&self) -> NormalFitSummary {
        NormalFitSummary {
            pi0: self.params.pi0,
            components: self.params.components.clone(),
            aic: self.aic,
            bic: self.bic,
            loglik: self.loglik,
            n_params: self.n_params,
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

/// AIC/BIC parameter count for `k_total` components, one of them the fixed
/// null: each free component has a mean and a variance, and the `k_total`
/// proportions have `k_total - 1` degrees of freedom.
pub fn normal_mixture_n_params(k_total: usize) -> usize {
    3 * (k_total - 1)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn init_params(sorted: &[f64], levels: &[f64]) -> NormalMixtureParams {
    let k = levels.len() + 1;
    let share = 1.0 / k as f64;
    NormalMixtureParams {
        pi0: share,
        components: levels
            .iter()
            .map(|&q| NormalComponent {
                pi: share,
                mu: quantile(sorted, q),
                sigma2: 1.0,
            })
            .collect(),
    }
}

struct Run {
    params: NormalMixtureParams,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    collapsed: bool,
    reseeded: bool,
}

/// Per-component `log pi_k - log sqrt(2 pi sigma2_k)` and `1 / (2 sigma2_k)`.
fn component_constants(params: &NormalMixtureParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut c = vec![params.pi0.ln() + ln_normal_pdf(0.0, 0.0, 1.0)];
    let mut mu = vec![0.0];
    let mut half_prec = vec![0.5];
    for comp in &params.components {
        c.push(comp.pi.ln() + ln_normal_pdf(comp.mu, comp.mu, comp.sigma2));
        mu.push(comp.mu);
        half_prec.push(0.5 / comp.sigma2);
    }
    (c, mu, half_prec)
}

fn e_step(z: &[f64], params: &NormalMixtureParams, resp: &mut [f64], ll: &mut [f64]) -> f64 {
    let kc = params.n_components();
    let (c, mu, half_prec) = component_constants(params);
    for (m, &v) in z.iter().enumerate() {
        let col = &mut resp[m * kc..(m + 1) * kc];
        for k in 0..kc {
            let d = v - mu[k];
            col[k] = c[k] - half_prec[k] * d * d;
        }
        let lse = log_sum_exp(col);
        for t in col.iter_mut() {
            *t = (*t - lse).exp();
        }
        ll[m] = lse;
    }
    pairwise_sum(ll)
}

fn column_sum(buf: &mut [f64], f: impl Fn(usize) -> f64) -> f64 {
    for (i, b) in buf.iter_mut().enumerate() {
        *b = f(i);
    }
    pairwise_sum(buf)
}

fn run_em(
    z: &[f64],
    init: NormalMixtureParams,
    opts: &NormalEmOptions,
    rng: &mut ChaCha8Rng,
) -> Run {
    let kc = init.n_components();
    let m = z.len();
    let mut params = init;
    let mut resp = vec![0.0; m * kc];
    let mut buf = vec![0.0; m];
    let mut ll = e_step(z, &params, &mut resp, &mut buf);
    let mut trace = vec![ll];
    let mut reseeded = false;
    let mut collapsed = false;
    let mut converged = false;
    let mut iterations = 0;
    // A re-seed starts a fresh iteration budget.
    let mut budget = opts.max_iter;
    while budget > 0 {
        budget -= 1;
        iterations += 1;
        let weights: Vec<f64> = (0..kc)
            .map(|k| column_sum(&mut buf, |i| resp[i * kc + k]))
            .collect();
        let pis = floor_proportions(
            &weights.iter().map(|w| w / m as f64).collect::<Vec<_>>(),
            PI_FLOOR,
        );
        let mut reset = false;
        let mut comps = Vec::with_capacity(kc - 1);
        for k in 1..kc {
            let old = params.components[k - 1];
            let w = weights[k];
            let (mut mu, mut s2) = (old.mu, old.sigma2);
            if w > 1e-12 {
                mu = column_sum(&mut buf, |i| resp[i * kc + k] * z[i]) / w;
                let centre = mu;
                s2 = column_sum(&mut buf, |i| {
                    resp[i * kc + k] * (z[i] - centre) * (z[i] - centre)
                }) / w;
            }
            if s2 < VARIANCE_FLOOR {
                if !reseeded {
                    reseeded = true;
                    reset = true;
                    mu = z[rng.random_range(0..m)];
                    s2 = 1.0;
                } else {
                    collapsed = true;
                    s2 = VARIANCE_FLOOR;
                }
            }
            comps.push(NormalComponent {
                pi: pis[k],
                mu,
                sigma2: s2,
            });
        }
        params = NormalMixtureParams {
            pi0: pis[0],
            components: comps,
        };
        let next = e_step(z, &params, &mut resp, &mut buf);
        if reset {
            trace.clear();
            trace.push(next);
            ll = next;
            budget = opts.max_iter;
            continue;
        }
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain < opts.tol {
            converged = true;
            break;
        }
    }
    Run {
        params,
        trace,
        iterations,
        converged,
        collapsed,
        reseeded,
    }
}

/// Fits a `k_total`-component normal mixture to Z-scores, the first
/// component frozen at `N(0, 1)`. Starts from quantile-spread means with unit
/// variances and equal proportions, then `restarts - 1` random quantile
/// spreads. Converged runs are preferred; among those the best final
/// log-likelihood wins.
pub fn fit_normal_mixture(
    z: &[f64],
    k_total: usize,
    opts: &NormalEmOptions,
) -> Result<NormalMixtureFit> {
    if k_total < 2 {
        return Err(invalid("normal mixture needs at least 2 components"));
    }
    if z.len() < k_total {
        return Err(invalid(format!(
            "{} scores for {k_total} components",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(invalid("Z-scores must be finite"));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(invalid("tolerance must be positive and max_iter >= 1"));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let free = k_total - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<Run> = None;
    for r in 0..opts.restarts.max(1) {
        let levels: Vec<f64> = if r == 0 {
            (1..=free).map(|i| i as f64 / k_total as f64).collect()
        } else {
            let mut l: Vec<f64> = (0..free).map(|_| rng.random_range(0.02..0.98)).collect();
            l.sort_by(f64::total_cmp);
            l
        };
        let run = run_em(z, init_params(&sorted, &levels), opts, &mut rng);
        if best.as_ref().map_or(true, |b| {
            (run.converged, run.trace.last()) > (b.converged, b.trace.last())
        }) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");
    let loglik = *run.trace.last().expect("non-empty trace");
    let q = normal_mixture_n_params(k_total);
    Ok(NormalMixtureFit {
        params: run.params,
        loglik_trace: run.trace,
        loglik,
        iterations: run.iterations,
        converged: run.converged,
        aic: -2.0 * loglik + 2.0 * q as f64,
        bic: -2.0 * loglik + q as f64 * (z.len() as f64).ln(),
        n_params: q,
        collapsed: run.collapsed,
        reseeded: run.reseeded,
    })
}
