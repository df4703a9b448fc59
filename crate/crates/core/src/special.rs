//! Scalar numerics shared by every module: normal density and distribution
//! functions, log-gamma, log-sum-exp, and an order-fixed summation.

/// Documented absolute error bound of [`normal_cdf`]. Golden tests assert
/// against this value.
pub const NORMAL_CDF_ABS_ERROR: f64 = 1e-12;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Phi(z)`, accurate far into the right tail.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Log density of `N(mean, var)` at `z`.
pub fn ln_normal_pdf(z: f64, mean: f64, var: f64) -> f64 {
    let d = z - mean;
    -LN_SQRT_2PI - 0.5 * var.ln() - 0.5 * d * d / var
}

/// Density of `N(mean, var)` at `z`.
pub fn normal_pdf(z: f64, mean: f64, var: f64) -> f64 {
    ln_normal_pdf(z, mean, var).exp()
}

/// `Phi(z; mean, var)`.
pub fn normal_cdf_with(z: f64, mean: f64, var: f64) -> f64 {
    normal_cdf((z - mean) / var.sqrt())
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// `log(sum(exp(v)))` with max subtraction. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Pairwise summation. The reduction tree depends only on the slice length,
/// so the result is reproducible no matter how the terms were produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if v.len() <= LEAF {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}
