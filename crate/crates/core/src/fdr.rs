//! Step-up decision rules and the error bookkeeping used by simulations.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Reject,
    Retain,
    /// The test carried no data (zero total) and took no part in the rule.
    Skipped,
}

impl Decision {
    pub fn is_reject(self) -> bool {
        self == Decision::Reject
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Reject => "reject",
            Decision::Retain => "retain",
            Decision::Skipped => "skipped",
        }
    }
}

/// Outcome of a step-up rule: `k` rejections at threshold `lambda`, the
/// `k`-th smallest admitted statistic (0 when nothing is rejected).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResult {
    pub delta: Vec<Decision>,
    pub k: usize,
    pub lambda: f64,
}

impl DecisionResult {
    pub fn rejected(&self) -> impl Iterator<Item = usize> + '_ {
        self.delta
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_reject())
            .map(|(i, _)| i)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

/// Admitted entries sorted by (statistic, original index).
fn admitted_order(stats: &[Option<f64>]) -> Vec<(f64, usize)> {
    let mut v: Vec<(f64, usize)> = stats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (s, i)))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v
}

fn build(stats: &[Option<f64>], order: &[(f64, usize)], k: usize) -> DecisionResult {
    let mut delta: Vec<Decision> = stats
        .iter()
        .map(|s| {
            if s.is_some() {
                Decision::Retain
            } else {
                Decision::Skipped
            }
        })
        .collect();
    for &(_, i) in &order[..k] {
        delta[i] = Decision::Reject;
    }
    DecisionResult {
        delta,
        k,
        lambda: if k == 0 { 0.0 } else { order[k - 1].0 },
    }
}

/// Benjamini-Hochberg on p-values with missing entries treated as skipped:
/// rejects the `k` smallest, `k = max{m : P_(m) <= alpha m / M}`, where `M`
/// counts admitted tests only.
pub fn bh_procedure_masked(p: &[Option<f64>], alpha: f64) -> Result<DecisionResult> {
    check_alpha(alpha)?;
    if p.is_empty() {
        return Err(invalid("no p-values"));
    }
    if p.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("p-values must lie in [0, 1]"));
    }
    let order = admitted_order(p);
    if order.is_empty() {
        return Err(invalid("every test was skipped"));
    }
    let m_total = order.len() as f64;
    let k = order
        .iter()
        .enumerate()
        .rev()
        .find(|(i, (pv, _))| *pv <= alpha * (i + 1) as f64 / m_total)
        .map_or(0, |(i, _)| i + 1);
    Ok(build(p, &order, k))
}

pub fn bh_procedure(p: &[f64], alpha: f64) -> Result<DecisionResult> {
    let masked: Vec<Option<f64>> = p.iter().map(|&v| Some(v)).collect();
    bh_procedure_masked(&masked, alpha)
}

/// `sum - m alpha <= 0`, evaluated with a compensated running sum and an
/// exact product so that boundary cases are decided on the exact values.
fn running_sum_ok(sum: f64, comp: f64, m: usize, alpha: f64) -> bool {
    let prod = m as f64 * alpha;
    let prod_err = (m as f64).mul_add(alpha, -prod);
    (sum - prod) + (comp - prod_err) <= 0.0
}

/// Cumulative-average step-up rule for local FDR statistics (marginal or
/// conditional): rejects the `k` smallest, `k = max{m : sum_{i<=m} s_(i) <=
/// m alpha}`. Tied statistics are rejected together or not at all.
pub fn lfdr_stepup(stats: &[Option<f64>], alpha: f64) -> Result<DecisionResult> {
    check_alpha(alpha)?;
    if stats.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("local FDR statistics must lie in [0, 1]"));
    }
    let order = admitted_order(stats);
    if order.is_empty() {
        return Err(invalid("every test was skipped"));
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut k = 0;
    for (i, &(s, _)) in order.iter().enumerate() {
        // Neumaier summation.
        let t = sum + s;
        if sum.abs() >= s.abs() {
            comp += (sum - t) + s;
        } else {
            comp += (s - t) + sum;
        }
        sum = t;
        let m = i + 1;
        let group_end = m == order.len() || order[m].0 != s;
        if group_end && running_sum_ok(sum, comp, m, alpha) {
            k = m;
        }
    }
    Ok(build(stats, &order, k))
}

/// Convenience wrapper for fully observed statistics.
pub fn lfdr_stepup_all(stats: &[f64], alpha: f64) -> Result<DecisionResult> {
    let masked: Vec<Option<f64>> = stats.iter().map(|&v| Some(v)).collect();
    lfdr_stepup(&masked, alpha)
}

/// False discoveries `v`, discoveries `r`, and missed alternatives `s` over
/// the `m` admitted tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub v: usize,
    pub r: usize,
    pub s: usize,
    pub m: usize,
}

impl ErrorCounts {
    /// False discovery proportion, 0 when nothing was rejected.
    pub fn fdp(&self) -> f64 {
        if self.r == 0 {
            0.0
        } else {
            self.v as f64 / self.r as f64
        }
    }
}

/// `truth[m]` is true when test `m` is non-null.
pub fn confusion_counts(result: &DecisionResult, truth: &[bool]) -> Result<ErrorCounts> {
    if result.delta.len() != truth.len() {
        return Err(invalid(format!(
            "{} decisions but {} truth labels",
            result.delta.len(),
            truth.len()
        )));
    }
    let mut c = ErrorCounts::default();
    for (d, &alt) in result.delta.iter().zip(truth) {
        match d {
            Decision::Skipped => continue,
            Decision::Reject => {
                c.r += 1;
                if !alt {
                    c.v += 1;
                }
            }
            Decision::Retain => {
                if alt {
                    c.s += 1;
                }
            }
        }
        c.m += 1;
    }
    Ok(c)
}

/// Empirical FDR (mean false discovery proportion, 0 when `R = 0`) and MDR
/// (`sum S / sum (M - R)`).
pub fn fdr_mdr_estimates(batches: &[ErrorCounts]) -> (f64, f64) {
    if batches.is_empty() {
        return (0.0, 0.0);
    }
    let fdr = batches.iter().map(ErrorCounts::fdp).sum::<f64>() / batches.len() as f64;
    let missed: usize = batches.iter().map(|b| b.s).sum();
    let retained: usize = batches.iter().map(|b| b.m - b.r).sum();
    let mdr = if retained == 0 {
        0.0
    } else {
        missed as f64 / retained as f64
    };
    (fdr, mdr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rejected(r: &DecisionResult) -> Vec<usize> {
        r.rejected().collect()
    }

    #[test]
    fn bh_examples() {
        let r = bh_procedure(&[1.0, 1.0, 1.0], 0.05).unwrap();
        assert_eq!(r.k, 0);
        assert_eq!(r.lambda, 0.0);
        let r = bh_procedure(&[0.01, 0.02, 0.04, 0.90], 0.05).unwrap();
        assert_eq!(r.k, 2);
        assert_eq!(rejected(&r), vec![0, 1]);
        let r = bh_procedure(&[0.012, 0.025, 0.037, 0.04], 0.05).unwrap();
        assert_eq!(r.k, 4);
        assert!(bh_procedure(&[], 0.05).is_err());
        assert!(bh_procedure(&[0.5], 0.0).is_err());
        assert!(bh_procedure(&[1.5], 0.05).is_err());
    }

    #[test]
    fn bh_skips_missing() {
        let r = bh_procedure_masked(&[Some(0.01), None, Some(0.04)], 0.05).unwrap();
        // M = 2: thresholds 0.025, 0.05
        assert_eq!(r.k, 2);
        assert_eq!(
            r.delta,
            vec![Decision::Reject, Decision::Skipped, Decision::Reject]
        );
    }

    #[test]
    fn stepup_examples() {
        let r = lfdr_stepup_all(&[0.01, 0.04, 0.10, 0.50], 0.05).unwrap();
        assert_eq!(r.k, 3);
        assert_eq!(r.lambda, 0.10);
        let r = lfdr_stepup_all(&[0.2; 4], 0.05).unwrap();
        assert_eq!((r.k, r.lambda), (0, 0.0));
        assert!(lfdr_stepup(&[None, None], 0.05).is_err());
        assert!(lfdr_stepup(&[Some(1.2)], 0.05).is_err());
    }

    #[test]
    fn stepup_tie_groups_all_or_none() {
        // Sorted: 0.0, 0.1, 0.1. Prefix of 2 has mean 0.05 but would split
        // the tie; the full group has mean 0.0667 > 0.05.
        let r = lfdr_stepup_all(&[0.1, 0.0, 0.1], 0.05).unwrap();
        assert_eq!(r.k, 1);
        assert_eq!(rejected(&r), vec![1]);
        let r = lfdr_stepup_all(&[0.1, 0.0, 0.1], 0.07).unwrap();
        assert_eq!(r.k, 3);
    }

    #[test]
    fn skipped_entries() {
        let r = lfdr_stepup(&[Some(0.01), None, Some(0.5)], 0.05).unwrap();
        assert_eq!(
            r.delta,
            vec![Decision::Reject, Decision::Skipped, Decision::Retain]
        );
        let c = confusion_counts(&r, &[true, true, false]).unwrap();
        assert_eq!(
            c,
            ErrorCounts {
                v: 0,
                r: 1,
                s: 0,
                m: 2
            }
        );
    }

    #[test]
    fn confusion_examples() {
        let none = DecisionResult {
            delta: vec![Decision::Retain; 3],
            k: 0,
            lambda: 0.0,
        };
        assert_eq!(
            confusion_counts(&none, &[false; 3]).unwrap(),
            ErrorCounts {
                v: 0,
                r: 0,
                s: 0,
                m: 3
            }
        );
        let all = DecisionResult {
            delta: vec![Decision::Reject; 3],
            k: 3,
            lambda: 0.1,
        };
        assert_eq!(
            confusion_counts(&all, &[false; 3]).unwrap(),
            ErrorCounts {
                v: 3,
                r: 3,
                s: 0,
                m: 3
            }
        );
        let mixed = DecisionResult {
            delta: vec![Decision::Reject, Decision::Retain, Decision::Reject],
            k: 2,
            lambda: 0.1,
        };
        assert_eq!(
            confusion_counts(&mixed, &[false, true, true]).unwrap(),
            ErrorCounts {
                v: 1,
                r: 2,
                s: 1,
                m: 3
            }
        );
        assert!(confusion_counts(&mixed, &[true]).is_err());
    }

    #[test]
    fn estimate_examples() {
        let (f, _) = fdr_mdr_estimates(&[ErrorCounts {
            v: 0,
            r: 3,
            s: 0,
            m: 10,
        }]);
        assert_eq!(f, 0.0);
        let (f, _) = fdr_mdr_estimates(&[
            ErrorCounts {
                v: 1,
                r: 4,
                s: 0,
                m: 10,
            },
            ErrorCounts {
                v: 0,
                r: 0,
                s: 0,
                m: 10,
            },
        ]);
        assert_eq!(f, 0.125);
        let (_, mdr) = fdr_mdr_estimates(&[
            ErrorCounts {
                v: 0,
                r: 0,
                s: 2,
                m: 10,
            },
            ErrorCounts {
                v: 0,
                r: 0,
                s: 0,
                m: 10,
            },
        ]);
        assert_eq!(mdr, 0.1);
    }
}
