//! One-dimensional root finding: Newton steps kept inside a shrinking
//! bracket, with bisection whenever a step would leave it or fails to halve
//! the residual.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub residual: f64,
    pub iterations: usize,
    /// True when the bracket endpoints had the same sign and `x` is the
    /// endpoint with the smaller residual.
    pub clamped: bool,
}

/// Solves `f(x) = 0` on `[lo, hi]` for a function supplied as `x -> (f, f')`.
/// `f` must be monotone on the bracket. If it does not change sign, the
/// endpoint closest to a root is returned with `clamped` set.
pub fn newton_bisect<F>(
    mut f: F,
    lo: f64,
    hi: f64,
    x0: f64,
    xtol: f64,
    max_iter: usize,
) -> Result<Root>
where
    F: FnMut(f64) -> (f64, f64),
{
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(invalid(format!("bad bracket [{lo}, {hi}]")));
    }
    let (flo, _) = f(lo);
    let (fhi, _) = f(hi);
    if flo == 0.0 {
        return Ok(Root {
            x: lo,
            residual: 0.0,
            iterations: 0,
            clamped: false,
        });
    }
    if fhi == 0.0 {
        return Ok(Root {
            x: hi,
            residual: 0.0,
            iterations: 0,
            clamped: false,
        });
    }
    if flo.signum() == fhi.signum() {
        let (x, r) = if flo.abs() <= fhi.abs() {
            (lo, flo)
        } else {
            (hi, fhi)
        };
        return Ok(Root {
            x,
            residual: r,
            iterations: 0,
            clamped: true,
        });
    }
    // Orient so that f(neg) < 0 < f(pos).
    let (mut neg, mut pos) = if flo < 0.0 { (lo, hi) } else { (hi, lo) };
    let mut x = if x0 > lo && x0 < hi {
        x0
    } else {
        0.5 * (lo + hi)
    };
    let mut dx_old = (hi - lo).abs();
    let mut dx = dx_old;
    let (mut fx, mut dfx) = f(x);
    for it in 1..=max_iter {
        if fx == 0.0 {
            return Ok(Root {
                x,
                residual: 0.0,
                iterations: it,
                clamped: false,
            });
        }
        let newton_leaves = ((x - pos) * dfx - fx) * ((x - neg) * dfx - fx) > 0.0;
        let too_slow = (2.0 * fx).abs() > (dx_old * dfx).abs();
        dx_old = dx;
        if newton_leaves || too_slow || dfx == 0.0 || !dfx.is_finite() {
            dx = 0.5 * (pos - neg);
            x = neg + dx;
        } else {
            dx = fx / dfx;
            let prev = x;
            x -= dx;
            if x == prev {
                return Ok(Root {
                    x,
                    residual: fx,
                    iterations: it,
                    clamped: false,
                });
            }
        }
        (fx, dfx) = f(x);
        if fx < 0.0 {
            neg = x;
        } else {
            pos = x;
        }
        if dx.abs() < xtol || (pos - neg).abs() < xtol {
            return Ok(Root {
                x,
                residual: fx,
                iterations: it,
                clamped: false,
            });
        }
    }
    Ok(Root {
        x,
        residual: fx,
        iterations: max_iter,
        clamped: false,
    })
}

/// Bisection on a sign change of `f` in `[lo, hi]`.
pub fn bisect<F>(mut f: F, mut lo: f64, mut hi: f64, xtol: f64) -> Option<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    while hi - lo > xtol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}
