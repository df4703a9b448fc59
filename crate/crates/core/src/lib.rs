//! Conditional local false discovery rate for multiple testing with
//! heterogeneous multinomial count data.
//!
//! Each test is a vector of counts over `N` ordered groups with covariate
//! values `x`. Under the log-linear model the group probabilities are
//! `exp(beta x_n) / sum_j exp(beta x_j)`, and the null is `beta = 0`. The
//! conditional local FDR of a test is the posterior probability of the null
//! component of a mixture of these multinomials, given the counts and their
//! total. Stepping up on it controls the FDR while adapting to each test's
//! sample size.
//!
//! ```
//! use clfdr_core::data::{CountDataset, CovariateVector};
//! use clfdr_core::mixture::{clfdr_stats, MixtureParams};
//! use clfdr_core::fdr::lfdr_stepup;
//!
//! let x = CovariateVector::wheat_biomass();
//! let ds = CountDataset::new(x, vec![vec![0, 0, 1, 3, 9], vec![2, 3, 2, 3, 2]], None).unwrap();
//! let params = MixtureParams::two_group(0.8, 1.0).unwrap();
//! let stats = clfdr_stats(&ds, &params).unwrap();
//! let decision = lfdr_stepup(&stats, 0.1).unwrap();
//! assert!(decision.delta[0].is_reject());
//! ```

// `!(v > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod fdr;
pub mod loglinear;
pub mod mixture;
pub mod normal_mixture;
pub mod roots;
pub mod sim;
pub mod special;
pub mod threshold;

pub use error::{Error, Result};
