//! Finite mixture of log-linear multinomials, its EM estimator, and the
//! conditional local FDR statistics.
//!
//! Component `k` has effect `gamma_k` with `gamma_0 = 0` (the null). For a
//! test with counts `y`, total `n` and sufficient statistic `t = x^T y`,
//!
//! ```text
//! log p(y | n; gamma) = log(n! / prod y_i!) + gamma t - n A(gamma)
//! ```
//!
//! so the EM only needs `(n, t, log coefficient)` per row. The conditional
//! local FDR of a test is the posterior probability of the null component,
//! which is exactly the first row of the E-step responsibilities.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CountDataset, CovariateVector, TestRecord};
use crate::error::{Error, Result};
use crate::loglinear::{
    log_multinomial_coef, log_partition, solve_mean_equation, sufficient_statistic, EFFECT_BOUND,
};
use crate::special::{log_sum_exp, pairwise_sum};

/// Lower bound applied to every mixing proportion in the M-step.
pub const PI_FLOOR: f64 = 1e-6;
/// Below this total weight a component's effect is left unchanged.
pub const EMPTY_WEIGHT: f64 = 1e-12;
/// Rows with fewer counts are not used to seed effects.
pub const INIT_MIN_TOTAL: u64 = 5;
/// Conditional MLEs this close to zero are not used to seed effects.
pub const INIT_NULL_BAND: f64 = 0.1;

/// Effects `(gamma_0 = 0, gamma_1, .., gamma_K)` and proportions
/// `(pi_0, .., pi_K)`. Non-null effects are kept in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixtureParams")]
pub struct MixtureParams {
    gammas: Vec<f64>,
    pis: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMixtureParams {
    gammas: Vec<f64>,
    pis: Vec<f64>,
}

impl TryFrom<RawMixtureParams> for MixtureParams {
    type Error = Error;
    fn try_from(r: RawMixtureParams) -> Result<Self> {
        Self::new(r.gammas, r.pis)
    }
}

impl MixtureParams {
    pub fn new(gammas: Vec<f64>, pis: Vec<f64>) -> Result<Self> {
        Self::checked(gammas, pis, false)
    }

    /// Like [`MixtureParams::new`] but proportions may be exactly 0 or 1.
    /// Only meaningful as a data-generating truth; fits never produce these.
    pub fn with_boundary_weights(gammas: Vec<f64>, pis: Vec<f64>) -> Result<Self> {
        Self::checked(gammas, pis, true)
    }

    fn checked(gammas: Vec<f64>, pis: Vec<f64>, closed: bool) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidMixture(m));
        if gammas.len() < 2 {
            return bad("need at least one non-null component".into());
        }
        if gammas.len() != pis.len() {
            return bad(format!(
                "{} effects but {} proportions",
                gammas.len(),
                pis.len()
            ));
        }
        if gammas[0] != 0.0 {
            return bad(format!("null effect must be 0, got {}", gammas[0]));
        }
        if gammas.iter().any(|g| !g.is_finite()) {
            return bad("effects must be finite".into());
        }
        for w in gammas[1..].windows(2) {
            if w[0] >= w[1] {
                return bad("non-null effects must be distinct and ascending".into());
            }
        }
        if gammas[1..].contains(&0.0) {
            return bad("non-null effects must differ from 0".into());
        }
        if closed {
            if pis.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return bad("proportions must lie in [0, 1]".into());
            }
        } else if pis.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return bad("proportions must lie in (0, 1)".into());
        }
        let total: f64 = pis.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return bad(format!("proportions sum to {total}"));
        }
        Ok(Self { gammas, pis })
    }

    /// Two-group model `(0, gamma1)` with null proportion `pi0`.
    pub fn two_group(pi0: f64, gamma1: f64) -> Result<Self> {
        Self::new(vec![0.0, gamma1], vec![pi0, 1.0 - pi0])
    }

    /// Sorts non-null components by effect. Used on EM output, which may not
    /// preserve the ordering.
    pub(crate) fn canonical(mut gammas: Vec<f64>, mut pis: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (1..gammas.len()).collect();
        order.sort_by(|&a, &b| gammas[a].total_cmp(&gammas[b]));
        let g: Vec<f64> = std::iter::once(0.0)
            .chain(order.iter().map(|&i| gammas[i]))
            .collect();
        let p: Vec<f64> = std::iter::once(pis[0])
            .chain(order.iter().map(|&i| pis[i]))
            .collect();
        gammas = g;
        pis = p;
        Self { gammas, pis }
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn pis(&self) -> &[f64] {
        &self.pis
    }

    pub fn pi0(&self) -> f64 {
        self.pis[0]
    }

    /// Number of non-null components `K`.
    pub fn k(&self) -> usize {
        self.gammas.len() - 1
    }

    pub fn n_components(&self) -> usize {
        self.gammas.len()
    }
}

/// Per-test quantities the mixture likelihood depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSummary {
    pub n: f64,
    pub t: f64,
    pub log_coef: f64,
}

impl RowSummary {
    pub fn new(y: &[u32], x: &CovariateVector) -> Self {
        Self {
            n: y.iter().map(|&c| c as f64).sum(),
            t: sufficient_statistic(y, x),
            log_coef: log_multinomial_coef(y),
        }
    }
}

/// Usable rows (positive total) of a dataset, summarized.
#[derive(Debug, Clone)]
pub struct PreparedData {
    covariate: CovariateVector,
    rows: Vec<RowSummary>,
    index: Vec<usize>,
    n_rows: usize,
}

impl PreparedData {
    pub fn new(ds: &CountDataset) -> Self {
        let x = ds.covariate();
        let mut rows = Vec::with_capacity(ds.n_tests());
        let mut index = Vec::with_capacity(ds.n_tests());
        for (m, y) in ds.rows().enumerate() {
            if y.iter().any(|&c| c > 0) {
                rows.push(RowSummary::new(y, x));
                index.push(m);
            }
        }
        Self {
            covariate: x.clone(),
            rows,
            index,
            n_rows: ds.n_tests(),
        }
    }

    pub fn from_summaries(covariate: CovariateVector, rows: Vec<RowSummary>) -> Self {
        let n = rows.len();
        Self {
            covariate,
            rows,
            index: (0..n).collect(),
            n_rows: n,
        }
    }

    pub fn covariate(&self) -> &CovariateVector {
        &self.covariate
    }

    pub fn rows(&self) -> &[RowSummary] {
        &self.rows
    }

    /// Dataset row of each usable row.
    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn n_usable(&self) -> usize {
        self.rows.len()
    }

    fn require_rows(&self) -> Result<()> {
        if self.rows.is_empty() {
            Err(Error::NoUsableRows)
        } else {
            Ok(())
        }
    }

    /// Spreads per-usable-row values back over all dataset rows.
    pub fn scatter(&self, values: &[f64]) -> Vec<Option<f64>> {
        let mut out = vec![None; self.n_rows];
        for (&m, &v) in self.index.iter().zip(values) {
            out[m] = Some(v);
        }
        out
    }
}

/// Log of each component's weighted pmf for one row.
fn component_log_terms(
    row: &RowSummary,
    gammas: &[f64],
    log_part: &[f64],
    log_pis: &[f64],
    out: &mut [f64],
) {
    for k in 0..gammas.len() {
        out[k] = log_pis[k] + row.log_coef + gammas[k] * row.t - row.n * log_part[k];
    }
}

fn log_partitions(gammas: &[f64], x: &CovariateVector) -> Vec<f64> {
    gammas.iter().map(|&g| log_partition(g, x).value).collect()
}

/// `log sum_k pi_k p(y | n; gamma_k)`.
pub fn mixture_log_pmf(
    rec: &TestRecord,
    params: &MixtureParams,
    x: &CovariateVector,
) -> Result<f64> {
    if rec.counts().len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: rec.counts().len(),
        });
    }
    if rec.n_total() == 0 {
        return Err(Error::EmptyRow);
    }
    let row = RowSummary::new(rec.counts(), x);
    let lp = log_partitions(&params.gammas, x);
    let log_pis: Vec<f64> = params.pis.iter().map(|p| p.ln()).collect();
    let mut terms = vec![0.0; params.n_components()];
    component_log_terms(&row, &params.gammas, &lp, &log_pis, &mut terms);
    Ok(log_sum_exp(&terms))
}

/// Posterior component probabilities, one column of `K + 1` values per
/// usable test.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n_components: usize,
    z_hat: Vec<f64>,
    rows: Vec<usize>,
}

impl Responsibilities {
    /// Builds responsibilities from explicit columns. Each column must have
    /// `n_components` entries in `[0, 1]` summing to 1 within 1e-10.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n_components = columns
            .first()
            .map(|c| c.len())
            .ok_or(Error::NoUsableRows)?;
        let mut z_hat = Vec::with_capacity(columns.len() * n_components);
        for c in columns {
            if c.len() != n_components {
                return Err(Error::InvalidMixture(
                    "ragged responsibility columns".into(),
                ));
            }
            let s: f64 = c.iter().sum();
            if (s - 1.0).abs() > 1e-10 || c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidMixture(
                    "responsibility column is not a distribution".into(),
                ));
            }
            z_hat.extend_from_slice(c);
        }
        Ok(Self {
            n_components,
            z_hat,
            rows: (0..columns.len()).collect(),
        })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_tests(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, k: usize, m: usize) -> f64 {
        self.z_hat[m * self.n_components + k]
    }

    pub fn column(&self, m: usize) -> &[f64] {
        &self.z_hat[m * self.n_components..(m + 1) * self.n_components]
    }

    /// Dataset row index of each column.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Responsibilities of component `k` across tests.
    pub fn component(&self, k: usize) -> Vec<f64> {
        (0..self.n_tests()).map(|m| self.get(k, m)).collect()
    }
}

/// E-step on prepared rows. Also returns the observed-data log-likelihood,
/// which falls out of the same log-sum-exp.
pub fn e_step_prepared(data: &PreparedData, params: &MixtureParams) -> (Responsibilities, f64) {
    let kc = params.n_components();
    let lp = log_partitions(&params.gammas, &data.covariate);
    let log_pis: Vec<f64> = params.pis.iter().map(|p| p.ln()).collect();
    let mut z_hat = vec![0.0; data.rows.len() * kc];
    let mut row_ll = Vec::with_capacity(data.rows.len());
    for (m, row) in data.rows.iter().enumerate() {
        let col = &mut z_hat[m * kc..(m + 1) * kc];
        component_log_terms(row, &params.gammas, &lp, &log_pis, col);
        let lse = log_sum_exp(col);
        for v in col.iter_mut() {
            *v = (*v - lse).exp();
        }
        row_ll.push(lse);
    }
    (
        Responsibilities {
            n_components: kc,
            z_hat,
            rows: data.index.clone(),
        },
        pairwise_sum(&row_ll),
    )
}

/// `z_hat[k][m] = pi_k p(y_m | gamma_k) / sum_j pi_j p(y_m | gamma_j)` over
/// rows with positive total.
pub fn e_step(ds: &CountDataset, params: &MixtureParams) -> Result<Responsibilities> {
    check_covariate(ds, params)?;
    Ok(e_step_prepared(&PreparedData::new(ds), params).0)
}

fn check_covariate(_ds: &CountDataset, params: &MixtureParams) -> Result<()> {
    if params.gammas.len() != params.pis.len() {
        return Err(Error::InvalidMixture("length mismatch".into()));
    }
    Ok(())
}

pub fn log_likelihood_prepared(data: &PreparedData, params: &MixtureParams) -> Result<f64> {
    data.require_rows()?;
    Ok(e_step_prepared(data, params).1)
}

/// Observed-data log-likelihood summed over rows with positive total.
pub fn log_likelihood(ds: &CountDataset, params: &MixtureParams) -> Result<f64> {
    log_likelihood_prepared(&PreparedData::new(ds), params)
}

/// Unconstrained proportion update: the mean responsibility per component.
pub fn m_step_pi(resp: &Responsibilities) -> Vec<f64> {
    let m = resp.n_tests() as f64;
    (0..resp.n_components())
        .map(|k| pairwise_sum(&resp.component(k)) / m)
        .collect()
}

/// Maximizes `sum_k w_k log pi_k` over the simplex with `pi_k >= floor`.
/// Components whose share falls below the floor are pinned to it and the
/// rest share the remaining mass in proportion to their weight.
pub fn floor_proportions(weights: &[f64], floor: f64) -> Vec<f64> {
    let k = weights.len();
    let mut pinned = vec![false; k];
    loop {
        let free_mass = 1.0 - floor * pinned.iter().filter(|&&p| p).count() as f64;
        let free_weight: f64 = weights
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(w, _)| w)
            .sum();
        let mut changed = false;
        let out: Vec<f64> = (0..k)
            .map(|i| {
                if pinned[i] {
                    floor
                } else if free_weight > 0.0 {
                    weights[i] * free_mass / free_weight
                } else {
                    free_mass / pinned.iter().filter(|&&p| !p).count() as f64
                }
            })
            .collect();
        for i in 0..k {
            if !pinned[i] && out[i] < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return out;
        }
    }
}

/// The objective for one non-null effect,
/// `g_k(gamma) = sum_m z_km [gamma t_m - n_m A(gamma)]`, with its first and
/// second derivatives.
pub fn gamma_objective(
    data: &PreparedData,
    resp: &Responsibilities,
    k: usize,
    gamma: f64,
) -> (f64, f64, f64) {
    let (st, sn) = weighted_totals(data, resp, k);
    let lp = log_partition(gamma, &data.covariate);
    (
        gamma * st - sn * lp.value,
        st - sn * lp.mean,
        -sn * lp.variance,
    )
}

fn weighted_totals(data: &PreparedData, resp: &Responsibilities, k: usize) -> (f64, f64) {
    let wt: Vec<f64> = data
        .rows
        .iter()
        .enumerate()
        .map(|(m, r)| resp.get(k, m) * r.t)
        .collect();
    let wn: Vec<f64> = data
        .rows
        .iter()
        .enumerate()
        .map(|(m, r)| resp.get(k, m) * r.n)
        .collect();
    (pairwise_sum(&wt), pairwise_sum(&wn))
}

/// Result of the effect update.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaUpdate {
    pub gammas: Vec<f64>,
    /// Components whose total weight was below [`EMPTY_WEIGHT`]; their
    /// effect was carried over unchanged.
    pub empty: Vec<usize>,
}

pub fn m_step_gamma_prepared(
    data: &PreparedData,
    resp: &Responsibilities,
    current: &[f64],
) -> GammaUpdate {
    let mut gammas = Vec::with_capacity(current.len());
    gammas.push(0.0);
    let mut empty = Vec::new();
    for (k, &start) in current.iter().enumerate().skip(1) {
        let (st, sn) = weighted_totals(data, resp, k);
        if sn < EMPTY_WEIGHT {
            empty.push(k);
            gammas.push(start);
            continue;
        }
        // g_k' = sn (st / sn - A'(gamma)); A' is increasing, so the root of
        // the mean equation is the unique maximizer.
        gammas.push(solve_mean_equation(
            st / sn,
            &data.covariate,
            start.clamp(-EFFECT_BOUND, EFFECT_BOUND),
        ));
    }
    GammaUpdate { gammas, empty }
}

/// Maximizes each `g_k` separately; `gamma_0` stays at 0.
pub fn m_step_gamma(
    ds: &CountDataset,
    resp: &Responsibilities,
    x: &CovariateVector,
    current: &[f64],
) -> Result<GammaUpdate> {
    if x != ds.covariate() {
        return Err(crate::error::invalid("covariate does not match dataset"));
    }
    if current.len() < 2 || current.len() != resp.n_components() {
        return Err(crate::error::invalid(
            "effect vector does not match responsibilities",
        ));
    }
    let data = PreparedData::new(ds);
    if data.n_usable() != resp.n_tests() {
        return Err(crate::error::invalid(
            "responsibilities do not match dataset",
        ));
    }
    Ok(m_step_gamma_prepared(&data, resp, current))
}

/// How EM is started.
#[derive(Debug, Clone, PartialEq)]
pub enum EmInit {
    /// Quantile seeding from per-test conditional MLEs, then seeded random
    /// restarts.
    Default,
    /// A single run from the given parameters.
    Params(MixtureParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: MixtureParams,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    /// Free parameter count used for AIC and BIC (`2K`).
    pub n_params: usize,
    pub n_used: usize,
    /// Components that were empty in the final M-step.
    pub empty_components: Vec<usize>,
}

/// JSON layout of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub gammas: Vec<f64>,
    pub pis: Vec<f64>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn summary(&self) -> FitSummary {
        FitSummary {
            gammas: self.params.gammas.clone(),
            pis: self.params.pis.clone(),
            loglik: self.loglik,
            aic: self.aic,
            bic: self.bic,
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Finite conditional MLEs of rows with enough counts, outside the band
/// around zero, sorted.
fn seed_pool(data: &PreparedData) -> Vec<f64> {
    let x = &data.covariate;
    let mut pool: Vec<f64> = data
        .rows
        .iter()
        .filter(|r| r.n >= INIT_MIN_TOTAL as f64)
        .map(|r| solve_mean_equation(r.t / r.n, x, 0.0))
        .filter(|b| b.abs() >= INIT_NULL_BAND && b.abs() < EFFECT_BOUND)
        .collect();
    pool.sort_by(f64::total_cmp);
    pool
}

/// Makes effects distinct, nonzero, and ascending.
fn tidy_effects(mut g: Vec<f64>) -> Vec<f64> {
    g.sort_by(f64::total_cmp);
    for i in 0..g.len() {
        if g[i].abs() < INIT_NULL_BAND {
            g[i] = if g[i] < 0.0 {
                -INIT_NULL_BAND
            } else {
                INIT_NULL_BAND
            };
        }
        if i > 0 && g[i] <= g[i - 1] + 1e-3 {
            g[i] = g[i - 1] + 0.05;
            if g[i].abs() < INIT_NULL_BAND {
                g[i] = INIT_NULL_BAND;
            }
        }
    }
    g
}

fn fallback_effects(k: usize) -> Vec<f64> {
    // 0.5, -0.5, 1.0, -1.0, ...
    (0..k)
        .map(|i| {
            let mag = 0.5 * (i / 2 + 1) as f64;
            if i % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn quantile_init(pool: &[f64], k: usize) -> MixtureParams {
    let effects = if pool.len() >= k {
        (1..=k)
            .map(|i| quantile_sorted(pool, i as f64 / (k + 1) as f64))
            .collect()
    } else {
        fallback_effects(k)
    };
    let gammas: Vec<f64> = std::iter::once(0.0).chain(tidy_effects(effects)).collect();
    MixtureParams {
        gammas,
        pis: vec![1.0 / (k + 1) as f64; k + 1],
    }
}

fn random_init(pool: &[f64], k: usize, rng: &mut ChaCha8Rng) -> MixtureParams {
    let effects: Vec<f64> = if pool.len() >= k {
        sample_indices(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i] + rng.random_range(-0.05..0.05))
            .collect()
    } else {
        (0..k)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..2.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect()
    };
    let raw: Vec<f64> = (0..=k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    let pis = floor_proportions(&raw.iter().map(|r| r / s).collect::<Vec<_>>(), 0.01);
    let gammas = std::iter::once(0.0).chain(tidy_effects(effects)).collect();
    MixtureParams { gammas, pis }
}

struct Run {
    params: MixtureParams,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    empty: Vec<usize>,
}

fn run_em(data: &PreparedData, init: MixtureParams, tol: f64, max_iter: usize) -> Run {
    let mut params = init;
    let (mut resp, mut ll) = e_step_prepared(data, &params);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut empty = Vec::new();
    for it in 1..=max_iter {
        let pis = floor_proportions(&m_step_pi(&resp), PI_FLOOR);
        let update = m_step_gamma_prepared(data, &resp, &params.gammas);
        empty = update.empty;
        params = MixtureParams {
            gammas: update.gammas,
            pis,
        };
        let (next_resp, next_ll) = e_step_prepared(data, &params);
        resp = next_resp;
        trace.push(next_ll);
        iterations = it;
        let gain = next_ll - ll;
        ll = next_ll;
        if gain < tol {
            converged = true;
            break;
        }
    }
    Run {
        params: MixtureParams::canonical(params.gammas, params.pis),
        trace,
        iterations,
        converged,
        empty,
    }
}

pub fn fit_em_prepared(
    data: &PreparedData,
    k: usize,
    init: &EmInit,
    opts: &EmOptions,
) -> Result<FitResult> {
    data.require_rows()?;
    if k == 0 {
        return Err(crate::error::invalid("need K >= 1 non-null components"));
    }
    if !(opts.tol > 0.0) {
        return Err(crate::error::invalid("tolerance must be positive"));
    }
    if opts.max_iter == 0 {
        return Err(crate::error::invalid("max_iter must be >= 1"));
    }
    let starts: Vec<MixtureParams> = match init {
        EmInit::Params(p) => {
            if p.k() != k {
                return Err(crate::error::invalid(format!(
                    "initial params have K = {}, expected {k}",
                    p.k()
                )));
            }
            // Re-validate in case the caller built params by deserializing.
            vec![MixtureParams::new(p.gammas.clone(), p.pis.clone())?]
        }
        EmInit::Default => {
            let pool = seed_pool(data);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut v = vec![quantile_init(&pool, k)];
            for _ in 1..opts.restarts.max(1) {
                v.push(random_init(&pool, k, &mut rng));
            }
            v
        }
    };
    let mut best: Option<Run> = None;
    for start in starts {
        let run = run_em(data, start, opts.tol, opts.max_iter);
        if best.as_ref().map_or(true, |b| {
            (run.converged, run.trace.last()) > (b.converged, b.trace.last())
        }) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one start");
    let loglik = *run.trace.last().expect("trace is never empty");
    let n_params = 2 * k;
    let n_used = data.n_usable();
    Ok(FitResult {
        params: run.params,
        loglik_trace: run.trace,
        iterations: run.iterations,
        converged: run.converged,
        loglik,
        aic: -2.0 * loglik + 2.0 * n_params as f64,
        bic: -2.0 * loglik + n_params as f64 * (n_used as f64).ln(),
        n_params,
        n_used,
        empty_components: run.empty,
    })
}

/// Fits a `K + 1` component mixture by EM. Iterates until the
/// log-likelihood gain drops below `tol` or `max_iter` is reached, keeping
/// the best converged restart (or the best overall if none converged).
pub fn fit_em(ds: &CountDataset, k: usize, init: &EmInit, opts: &EmOptions) -> Result<FitResult> {
    fit_em_prepared(&PreparedData::new(ds), k, init, opts)
}

/// Posterior null probability of each usable row.
pub fn clfdr_prepared(data: &PreparedData, params: &MixtureParams) -> Vec<f64> {
    e_step_prepared(data, params).0.component(0)
}

/// Conditional local FDR per dataset row; `None` for rows with zero total.
pub fn clfdr_stats(ds: &CountDataset, params: &MixtureParams) -> Result<Vec<Option<f64>>> {
    let data = PreparedData::new(ds);
    Ok(data.scatter(&clfdr_prepared(&data, params)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x() -> CovariateVector {
        CovariateVector::wheat_biomass()
    }

    fn ds(rows: Vec<Vec<u32>>) -> CountDataset {
        CountDataset::new(x(), rows, None).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(MixtureParams::new(vec![0.0, -1.13, 0.78], vec![0.69, 0.16, 0.15]).is_ok());
        assert!(MixtureParams::new(vec![0.1, 1.0], vec![0.5, 0.5]).is_err());
        assert!(MixtureParams::new(vec![0.0, 1.0, 1.0], vec![0.4, 0.3, 0.3]).is_err());
        assert!(MixtureParams::new(vec![0.0, 1.0, -1.0], vec![0.4, 0.3, 0.3]).is_err());
        assert!(MixtureParams::new(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(MixtureParams::new(vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(MixtureParams::with_boundary_weights(vec![0.0, 1.0], vec![1.0, 0.0]).is_ok());
        assert!(MixtureParams::with_boundary_weights(vec![0.0, 1.0], vec![1.1, -0.1]).is_err());
        assert!(MixtureParams::new(vec![0.0], vec![1.0]).is_err());
        assert!(MixtureParams::new(vec![0.0, 0.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn canonical_sorts_non_null() {
        let p = MixtureParams::canonical(vec![0.0, 0.78, -1.13], vec![0.69, 0.15, 0.16]);
        assert_eq!(p.gammas(), &[0.0, -1.13, 0.78]);
        assert_eq!(p.pis(), &[0.69, 0.16, 0.15]);
    }

    #[test]
    fn two_component_identity() {
        let rec = TestRecord::new(vec![0, 1, 1, 0, 5]);
        let g = 0.8;
        let p = MixtureParams::two_group(0.5, g).unwrap();
        let l0 = crate::loglinear::log_pmf(&rec, 0.0, &x()).unwrap();
        let l1 = crate::loglinear::log_pmf(&rec, g, &x()).unwrap();
        let want = 0.5f64.ln() + log_sum_exp(&[l0, l1]);
        assert!((mixture_log_pmf(&rec, &p, &x()).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn near_degenerate_mixture() {
        let rec = TestRecord::new(vec![3, 1, 4, 1, 5]);
        let single = crate::loglinear::log_pmf(&rec, 0.0, &x()).unwrap();
        for eps in [1e-3, 1e-6, 1e-9] {
            let p = MixtureParams::two_group(1.0 - eps, 1.5).unwrap();
            let v = mixture_log_pmf(&rec, &p, &x()).unwrap();
            assert!(
                (v - single).abs() < 10.0 * eps,
                "eps {eps}: {v} vs {single}"
            );
        }
        assert_eq!(
            mixture_log_pmf(
                &TestRecord::new(vec![0; 5]),
                &MixtureParams::two_group(0.5, 1.0).unwrap(),
                &x()
            ),
            Err(Error::EmptyRow)
        );
    }

    #[test]
    fn loglik_one_row_and_duplication() {
        let p = MixtureParams::new(vec![0.0, -1.0, 0.7], vec![0.6, 0.2, 0.2]).unwrap();
        let one = ds(vec![vec![2, 0, 3, 1, 4]]);
        let direct = mixture_log_pmf(&one.record(0), &p, &x()).unwrap();
        assert_eq!(log_likelihood(&one, &p).unwrap(), direct);

        let rows = vec![
            vec![2, 0, 3, 1, 4],
            vec![9, 2, 0, 0, 3],
            vec![16, 10, 29, 18, 13],
            vec![1, 0, 0, 0, 0],
        ];
        let single = log_likelihood(&ds(rows.clone()), &p).unwrap();
        let doubled: Vec<Vec<u32>> = rows.iter().chain(rows.iter()).cloned().collect();
        let twice = log_likelihood(&ds(doubled), &p).unwrap();
        assert!((twice - 2.0 * single).abs() <= 1e-12 * single.abs());

        assert_eq!(
            log_likelihood(&ds(vec![vec![0; 5]]), &p),
            Err(Error::NoUsableRows)
        );
    }

    #[test]
    fn e_step_symmetry_and_direction() {
        // Uniform proportions and a row whose likelihood is the same under
        // both effects: t chosen so that gamma t - n A(gamma) matches.
        let p = MixtureParams::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let up = ds(vec![vec![0, 0, 1, 3, 8]]);
        let r = e_step(
            &up,
            &MixtureParams::new(vec![0.0, 2.0], vec![0.5, 0.5]).unwrap(),
        )
        .unwrap();
        assert!(r.get(1, 0) > r.get(0, 0));
        let r = e_step(&ds(vec![vec![1, 1, 1, 1, 1], vec![5, 0, 0, 0, 0]]), &p).unwrap();
        for m in 0..r.n_tests() {
            let s: f64 = r.column(m).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // All components identical in likelihood: identical effects are
        // only reachable through the unchecked constructor.
        let same = MixtureParams {
            gammas: vec![0.0, 0.0, 0.0],
            pis: vec![1.0 / 3.0; 3],
        };
        let r = e_step(&ds(vec![vec![1, 2, 3, 4, 5]]), &same).unwrap();
        for k in 0..3 {
            assert!((r.get(k, 0) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pi_update() {
        let r = Responsibilities::from_columns(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m_step_pi(&r), vec![1.0, 0.0]);
        let r = Responsibilities::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(m_step_pi(&r), vec![0.5, 0.5]);
        assert!(Responsibilities::from_columns(&[vec![0.7, 0.7]]).is_err());
    }

    #[test]
    fn floor_is_water_filling() {
        let p = floor_proportions(&[1.0, 0.0, 0.0], 1e-6);
        assert_eq!(p[1], 1e-6);
        assert_eq!(p[2], 1e-6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let p = floor_proportions(&[0.5, 0.3, 0.2], 1e-6);
        assert_eq!(p, vec![0.5, 0.3, 0.2]);
        let p = floor_proportions(&[0.0, 0.0], 1e-6);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_counts_give_zero_effect() {
        let d = ds(vec![vec![4, 4, 4, 4, 4]]);
        let data = PreparedData::new(&d);
        let r = Responsibilities::from_columns(&[vec![0.3, 0.7]]).unwrap();
        let up = m_step_gamma(&d, &r, &x(), &[0.0, 1.3]).unwrap();
        assert!(up.gammas[1].abs() < 1e-12);
        let (_, d1, d2) = gamma_objective(&data, &r, 1, up.gammas[1]);
        assert!(d1.abs() <= 1e-10);
        assert!(d2 < 0.0);
    }

    #[test]
    fn empty_component_is_flagged() {
        let d = ds(vec![vec![4, 1, 4, 0, 4]]);
        let r = Responsibilities::from_columns(&[vec![1.0, 0.0]]).unwrap();
        let up = m_step_gamma(&d, &r, &x(), &[0.0, 1.3]).unwrap();
        assert_eq!(up.empty, vec![1]);
        assert_eq!(up.gammas, vec![0.0, 1.3]);
    }

    #[test]
    fn clfdr_is_null_responsibility() {
        let d = ds(vec![
            vec![0, 1, 1, 0, 5],
            vec![0; 5],
            vec![16, 10, 29, 18, 13],
        ]);
        let p = MixtureParams::new(vec![0.0, -1.13, 0.78], vec![0.69, 0.16, 0.15]).unwrap();
        let c = clfdr_stats(&d, &p).unwrap();
        let r = e_step(&d, &p).unwrap();
        assert_eq!(c[0], Some(r.get(0, 0)));
        assert_eq!(c[1], None);
        assert_eq!(c[2], Some(r.get(0, 1)));
        assert_eq!(r.rows(), &[0, 2]);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let d = ds(vec![vec![0; 5]]);
        assert_eq!(
            fit_em(&d, 1, &EmInit::Default, &EmOptions::default()),
            Err(Error::NoUsableRows)
        );
        let d = ds(vec![vec![1, 2, 3, 4, 5]]);
        assert!(fit_em(&d, 0, &EmInit::Default, &EmOptions::default()).is_err());
        let bad = EmOptions {
            tol: 0.0,
            ..EmOptions::default()
        };
        assert!(fit_em(&d, 1, &EmInit::Default, &bad).is_err());
        let dup = MixtureParams {
            gammas: vec![0.0, 1.0, 1.0],
            pis: vec![0.4, 0.3, 0.3],
        };
        assert!(matches!(
            fit_em(&d, 2, &EmInit::Params(dup), &EmOptions::default()),
            Err(Error::InvalidMixture(_))
        ));
    }

    #[test]
    fn tidy_effects_makes_distinct() {
        let g = tidy_effects(vec![0.5, 0.5, 0.02, -0.01]);
        for w in g.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(g.iter().all(|v| v.abs() >= INIT_NULL_BAND));
    }
}
