//! C interface to `clfdr_core`.
//!
//! Every function returns a [`ClfdrStatus`]. On failure a message is kept
//! per thread and can be read with [`clfdr_last_error`]. Handles are opaque
//! and must be released with their `_free` function. Skipped tests (zero
//! total count) come back as NaN statistics and are passed in the same way.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use clfdr_core::data::{load_counts, CountDataset, CovariateVector};
use clfdr_core::fdr::{bh_procedure, lfdr_stepup, DecisionResult};
use clfdr_core::mixture::{fit_em, EmInit, EmOptions, FitResult};
use clfdr_core::threshold::{lfdr_threshold, rejection_boundary, SizePmf, TwoGroupModel};
use clfdr_core::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClfdrStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Malformed data or an out-of-range parameter.
    InvalidInput = 2,
    /// A file could not be read.
    Io = 3,
    /// The computation finished but did not converge.
    NotConverged = 4,
    /// An output buffer is too small.
    BufferTooSmall = 5,
    /// Internal failure. Please report it.
    Panic = 6,
}

/// Count table with its covariate vector.
pub struct ClfdrDataset(CountDataset);

/// Fitted multinomial mixture.
pub struct ClfdrFit(FitResult);

/// Rejection interval `[a, b]` of the two-group model at one size.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClfdrBoundary {
    pub n: u64,
    /// Standardized mean of the alternative at this size.
    pub mu: f64,
    pub a: f64,
    /// Infinite when the alternative variance equals the null variance.
    pub b: f64,
    /// 0 when no z reaches the threshold.
    pub exists: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ClfdrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => ClfdrStatus::Io,
            _ => ClfdrStatus::InvalidInput,
        };
        Failure(code, e.to_string())
    }
}

fn fail(code: ClfdrStatus, msg: impl Into<String>) -> Failure {
    Failure(code, msg.into())
}

fn set_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).unwrap_or_default());
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ClfdrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            ClfdrStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(Some(msg));
            code
        }
        Err(_) => {
            set_error(Some("internal panic".into()));
            ClfdrStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(ClfdrStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be valid for `len` reads unless `len` is 0.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be valid for `len` writes unless `len` is 0.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn covariate(x: &[f64]) -> Result<CovariateVector, Failure> {
    Ok(CovariateVector::new(x.to_vec())?)
}

fn write_decisions(d: &DecisionResult, reject: &mut [u8], k: *mut usize, lambda: *mut f64) {
    for (r, dec) in reject.iter_mut().zip(&d.delta) {
        *r = u8::from(dec.is_reject());
    }
    // SAFETY: optional outputs, checked for null.
    unsafe {
        if !k.is_null() {
            *k = d.k;
        }
        if !lambda.is_null() {
            *lambda = d.lambda;
        }
    }
}

/// Message for the last failed call on this thread, or null after a
/// successful one. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn clfdr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn clfdr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn store<T>(out: *mut *mut T, value: T) {
    // SAFETY: `out` was checked for null by the caller.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Reads a count CSV (covariate header row, optional label column).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clfdr_dataset_load_path(
    path: *const c_char,
    out: *mut *mut ClfdrDataset,
) -> ClfdrStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(ClfdrStatus::InvalidInput, "path is not UTF-8"))?;
        let file =
            std::fs::File::open(path).map_err(|e| fail(ClfdrStatus::Io, format!("{path}: {e}")))?;
        store(
            out,
            ClfdrDataset(load_counts(std::io::BufReader::new(file))?),
        );
        Ok(())
    })
}

/// Parses a count CSV held in memory.
///
/// # Safety
/// `data` must be valid for `len` bytes and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clfdr_dataset_load_buffer(
    data: *const u8,
    len: usize,
    out: *mut *mut ClfdrDataset,
) -> ClfdrStatus {
    guard(|| {
        let bytes = slice(data, len, "data")?;
        non_null(out, "out")?;
        store(out, ClfdrDataset(load_counts(bytes)?));
        Ok(())
    })
}

/// Builds a dataset from a row-major `n_tests x n_groups` count matrix.
///
/// # Safety
/// `x` must hold `n_groups` values, `counts` `n_tests * n_groups` values.
#[no_mangle]
pub unsafe extern "C" fn clfdr_dataset_from_counts(
    x: *const f64,
    n_groups: usize,
    counts: *const u32,
    n_tests: usize,
    out: *mut *mut ClfdrDataset,
) -> ClfdrStatus {
    guard(|| {
        let x = covariate(slice(x, n_groups, "x")?)?;
        let cells = n_tests
            .checked_mul(n_groups)
            .ok_or_else(|| fail(ClfdrStatus::InvalidInput, "table size overflows"))?;
        let counts = slice(counts, cells, "counts")?;
        non_null(out, "out")?;
        let rows = counts.chunks(n_groups).map(<[u32]>::to_vec).collect();
        store(out, ClfdrDataset(CountDataset::new(x, rows, None)?));
        Ok(())
    })
}

/// Number of tests (rows), or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn clfdr_dataset_n_tests(ds: *const ClfdrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_tests())
}

/// Number of groups (columns), or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn clfdr_dataset_n_groups(ds: *const ClfdrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_groups())
}

/// # Safety
/// `ds` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn clfdr_dataset_free(ds: *mut ClfdrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits a mixture with `k` non-null components by EM. A fit that stops at
/// `max_iter` is still returned, with status `NotConverged`.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clfdr_fit_em(
    ds: *const ClfdrDataset,
    k: usize,
    tol: f64,
    max_iter: usize,
    restarts: usize,
    seed: u64,
    out: *mut *mut ClfdrFit,
) -> ClfdrStatus {
    guard(|| {
        non_null(ds, "dataset")?;
        non_null(out, "out")?;
        let opts = EmOptions {
            tol,
            max_iter,
            restarts,
            seed,
        };
        let fit = fit_em(&(*ds).0, k, &EmInit::Default, &opts)?;
        let converged = fit.converged;
        store(out, ClfdrFit(fit));
        if converged {
            Ok(())
        } else {
            Err(fail(
                ClfdrStatus::NotConverged,
                format!("EM did not converge in {max_iter} iterations"),
            ))
        }
    })
}

/// Number of non-null components, or 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn clfdr_fit_k(fit: *const ClfdrFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.params.k())
}

/// Copies effects and proportions (null first, `k + 1` each) and the final
/// log-likelihood. Any output may be null.
///
/// # Safety
/// `gammas` and `pis` must hold `len` values; `len` must be at least `k + 1`.
#[no_mangle]
pub unsafe extern "C" fn clfdr_fit_params(
    fit: *const ClfdrFit,
    gammas: *mut f64,
    pis: *mut f64,
    len: usize,
    loglik: *mut f64,
) -> ClfdrStatus {
    guard(|| {
        non_null(fit, "fit")?;
        let p = &(*fit).0.params;
        if len < p.gammas().len() {
            return Err(fail(
                ClfdrStatus::BufferTooSmall,
                format!("need {} slots, got {len}", p.gammas().len()),
            ));
        }
        if !gammas.is_null() {
            slice_mut(gammas, p.gammas().len(), "gammas")?.copy_from_slice(p.gammas());
        }
        if !pis.is_null() {
            slice_mut(pis, p.pis().len(), "pis")?.copy_from_slice(p.pis());
        }
        if !loglik.is_null() {
            *loglik = (*fit).0.loglik;
        }
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn clfdr_fit_free(fit: *mut ClfdrFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// clFDR of every test of `ds` under `fit`. Skipped tests get NaN.
///
/// # Safety
/// `out` must hold `len >= n_tests` values.
#[no_mangle]
pub unsafe extern "C" fn clfdr_stats(
    fit: *const ClfdrFit,
    ds: *const ClfdrDataset,
    out: *mut f64,
    len: usize,
) -> ClfdrStatus {
    guard(|| {
        non_null(fit, "fit")?;
        non_null(ds, "dataset")?;
        let ds = &(*ds).0;
        if len < ds.n_tests() {
            return Err(fail(
                ClfdrStatus::BufferTooSmall,
                format!("need {} slots, got {len}", ds.n_tests()),
            ));
        }
        let stats = clfdr_core::mixture::clfdr_stats(ds, &(*fit).0.params)?;
        let out = slice_mut(out, stats.len(), "out")?;
        for (o, s) in out.iter_mut().zip(stats) {
            *o = s.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Benjamini-Hochberg at level `alpha`. `reject[i]` is set to 1 or 0;
/// `k` and `threshold` (the largest rejected p-value) may be null.
///
/// # Safety
/// `p` and `reject` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn clfdr_bh(
    p: *const f64,
    len: usize,
    alpha: f64,
    reject: *mut u8,
    k: *mut usize,
    threshold: *mut f64,
) -> ClfdrStatus {
    guard(|| {
        let p = slice(p, len, "p")?;
        let reject = slice_mut(reject, len, "reject")?;
        write_decisions(&bh_procedure(p, alpha)?, reject, k, threshold);
        Ok(())
    })
}

/// Step-up on (conditional) local FDR values: rejects the largest set
/// whose mean statistic stays at or below `alpha`. NaN entries are skipped.
///
/// # Safety
/// `stats` and `reject` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn clfdr_stepup(
    stats: *const f64,
    len: usize,
    alpha: f64,
    reject: *mut u8,
    k: *mut usize,
    lambda: *mut f64,
) -> ClfdrStatus {
    guard(|| {
        let stats: Vec<Option<f64>> = slice(stats, len, "stats")?
            .iter()
            .map(|&s| (!s.is_nan()).then_some(s))
            .collect();
        let reject = slice_mut(reject, len, "reject")?;
        write_decisions(&lfdr_stepup(&stats, alpha)?, reject, k, lambda);
        Ok(())
    })
}

/// Rejection interval of the two-group model `(pi0, gamma1)` at size `n`
/// and clFDR threshold `lambda`.
///
/// # Safety
/// `x` must hold `n_groups` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clfdr_rejection_boundary(
    pi0: f64,
    gamma1: f64,
    lambda: f64,
    n: u64,
    x: *const f64,
    n_groups: usize,
    out: *mut ClfdrBoundary,
) -> ClfdrStatus {
    guard(|| {
        let x = covariate(slice(x, n_groups, "x")?)?;
        non_null(out, "out")?;
        let model = TwoGroupModel::new(pi0, gamma1, x, SizePmf::point_mass(n.max(1))?)?;
        let b = rejection_boundary(n, &model, lambda)?;
        *out = ClfdrBoundary {
            n,
            mu: model.mu(n),
            a: b.a,
            b: b.b,
            exists: u8::from(b.exists),
        };
        Ok(())
    })
}

/// Smallest `z` in `[0, 50]` where the marginal lFDR of the two-group model
/// reaches `lambda`, with sizes drawn from `(sizes[i], probs[i])`. Writes
/// NaN when there is none.
///
/// # Safety
/// `x` must hold `n_groups` values, `sizes` and `probs` `n_sizes` values.
#[no_mangle]
pub unsafe extern "C" fn clfdr_lfdr_threshold(
    pi0: f64,
    gamma1: f64,
    lambda: f64,
    x: *const f64,
    n_groups: usize,
    sizes: *const u64,
    probs: *const f64,
    n_sizes: usize,
    out: *mut f64,
) -> ClfdrStatus {
    guard(|| {
        let x = covariate(slice(x, n_groups, "x")?)?;
        let sizes = slice(sizes, n_sizes, "sizes")?;
        let probs = slice(probs, n_sizes, "probs")?;
        non_null(out, "out")?;
        let pmf = SizePmf::new(sizes.iter().copied().zip(probs.iter().copied()).collect())?;
        let model = TwoGroupModel::new(pi0, gamma1, x, pmf)?;
        *out = lfdr_threshold(&model, lambda).unwrap_or(f64::NAN);
        Ok(())
    })
}
