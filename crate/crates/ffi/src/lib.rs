//! C ABI over `poisson_chaos`.
//!
//! Objects are opaque heap handles created by `pc_*_new`/`pc_*_read` and
//! released by the matching `pc_*_free`. Fallible calls return a `PcStatus`
//! and write results through out-pointers; on failure `pc_last_error` gives a
//! message for the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use poisson_chaos::algebra::{contraction_norm, star_contract, symmetrize};
use poisson_chaos::bounds::{assemble_d2, assemble_d3, AssembleOptions, BoundReport, CovMatrix, Mode};
use poisson_chaos::chaos::ChaosExpansion;
use poisson_chaos::oulevy::{cov_exact, cov_limit, OUConfig, Which};
use poisson_chaos::simulate::simulate_functionals;
use poisson_chaos::{DiscreteSpace, Error, Kernel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotSymmetric = 3,
    SpaceMismatch = 4,
    NotPositiveDefinite = 5,
    /// A work or memory budget would be exceeded.
    Guard = 6,
    File = 7,
    /// The requested quantity is not defined for this input (d2 for singular C).
    Undefined = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcMode {
    Analytic = 0,
    MonteCarlo = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcWhich {
    A = 0,
    Q = 1,
    Qh = 2,
}

pub struct PcSpace {
    inner: Arc<DiscreteSpace>,
}

pub struct PcKernel {
    inner: Kernel,
}

pub struct PcExpansion {
    inner: ChaosExpansion,
}

pub struct PcCov {
    inner: CovMatrix,
}

pub struct PcReport {
    inner: BoundReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> PcStatus {
    match e {
        Error::NotSymmetric => PcStatus::NotSymmetric,
        Error::SpaceMismatch => PcStatus::SpaceMismatch,
        Error::NotPositiveDefinite => PcStatus::NotPositiveDefinite,
        Error::Guard(_) => PcStatus::Guard,
        Error::File { .. } => PcStatus::File,
        _ => PcStatus::InvalidArgument,
    }
}

struct Fail(PcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any failure for `pc_last_error` and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PcStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_last_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {msg}"));
            PcStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_box<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    put(out, Box::into_raw(Box::new(value)))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail(PcStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next `pc_*` call on the same thread.
#[no_mangle]
pub extern "C" fn pc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `weights` points to `m` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_space_new(weights: *const f64, m: usize, out: *mut *mut PcSpace) -> PcStatus {
    guard(|| {
        let w = slice(weights, m, "weights")?.to_vec();
        put_box(out, PcSpace { inner: DiscreteSpace::new(w)? })
    })
}

/// # Safety
/// `space` is null or came from `pc_space_new` and was not freed.
#[no_mangle]
pub unsafe extern "C" fn pc_space_free(space: *mut PcSpace) {
    free(space)
}

/// Number of cells, or 0 for a null handle.
///
/// # Safety
/// `space` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_space_len(space: *const PcSpace) -> usize {
    space.as_ref().map_or(0, |s| s.inner.len())
}

/// Row-major values of length m^order.
///
/// # Safety
/// `space` is live, `values` points to `len` doubles, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_kernel_new(
    space: *const PcSpace,
    order: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut PcKernel,
) -> PcStatus {
    guard(|| {
        let s = handle(space, "space")?;
        let v = slice(values, len, "values")?.to_vec();
        put_box(out, PcKernel { inner: Kernel::new(s.inner.clone(), order, v)? })
    })
}

/// Reads a kernel TOML file; it gets its own space.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_kernel_read(file: *const c_char, out: *mut *mut PcKernel) -> PcStatus {
    guard(|| put_box(out, PcKernel { inner: Kernel::read(path(file)?, None)? }))
}

/// # Safety
/// `kernel` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_kernel_free(kernel: *mut PcKernel) {
    free(kernel)
}

/// # Safety
/// `kernel` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_kernel_order(kernel: *const PcKernel) -> usize {
    kernel.as_ref().map_or(0, |k| k.inner.order())
}

/// Number of stored values (m^order), or 0 for a null handle.
///
/// # Safety
/// `kernel` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_kernel_len(kernel: *const PcKernel) -> usize {
    kernel.as_ref().map_or(0, |k| k.inner.values().len())
}

/// Copies the values into `buf`, which must hold exactly `pc_kernel_len` doubles.
///
/// # Safety
/// `kernel` is live and `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pc_kernel_values(kernel: *const PcKernel, buf: *mut f64, len: usize) -> PcStatus {
    guard(|| {
        let k = handle(kernel, "kernel")?;
        if len != k.inner.values().len() {
            return Err(Fail(
                PcStatus::InvalidArgument,
                format!("buffer holds {len} values, kernel has {}", k.inner.values().len()),
            ));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(k.inner.values());
        Ok(())
    })
}

/// L2(μ^p) norm, or NaN for a null handle.
///
/// # Safety
/// `kernel` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_kernel_norm(kernel: *const PcKernel) -> f64 {
    kernel.as_ref().map_or(f64::NAN, |k| k.inner.norm())
}

/// # Safety
/// `kernel` is live and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_symmetrize(kernel: *const PcKernel, out: *mut *mut PcKernel) -> PcStatus {
    guard(|| {
        let k = handle(kernel, "kernel")?;
        put_box(out, PcKernel { inner: symmetrize(&k.inner)? })
    })
}

/// The star contraction of `f` and `g` identifying `r` variables and integrating out `l`.
///
/// # Safety
/// `f`, `g` are live and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_star_contract(
    f: *const PcKernel,
    g: *const PcKernel,
    r: usize,
    l: usize,
    out: *mut *mut PcKernel,
) -> PcStatus {
    guard(|| {
        let (f, g) = (handle(f, "f")?, handle(g, "g")?);
        put_box(out, PcKernel { inner: star_contract(&f.inner, &g.inner, r, l)? })
    })
}

/// # Safety
/// `f`, `g` are live and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_contraction_norm(
    f: *const PcKernel,
    g: *const PcKernel,
    r: usize,
    l: usize,
    out: *mut f64,
) -> PcStatus {
    guard(|| {
        let (f, g) = (handle(f, "f")?, handle(g, "g")?);
        put(out, contraction_norm(&f.inner, &g.inner, r, l)?)
    })
}

/// mean + Σ I_k(f_k). The kernels are copied; orders must be distinct and at least 1.
///
/// # Safety
/// `space` is live, `kernels` points to `n` live handles, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_expansion_new(
    space: *const PcSpace,
    mean: f64,
    kernels: *const *const PcKernel,
    n: usize,
    out: *mut *mut PcExpansion,
) -> PcStatus {
    guard(|| {
        let s = handle(space, "space")?;
        let terms = slice(kernels, n, "kernels")?
            .iter()
            .map(|k| handle(*k, "kernel").map(|k| k.inner.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        put_box(out, PcExpansion { inner: ChaosExpansion::new(s.inner.clone(), mean, terms)? })
    })
}

/// Reads a chaos expansion TOML file (kernel paths relative to it).
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_expansion_read(file: *const c_char, out: *mut *mut PcExpansion) -> PcStatus {
    guard(|| put_box(out, PcExpansion { inner: ChaosExpansion::read(path(file)?)? }))
}

/// # Safety
/// `e` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_expansion_free(e: *mut PcExpansion) {
    free(e)
}

/// Var F, or NaN for a null handle.
///
/// # Safety
/// `e` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_expansion_variance(e: *const PcExpansion) -> f64 {
    e.as_ref().map_or(f64::NAN, |e| e.inner.variance())
}

/// Symmetric d x d matrix from row-major entries.
///
/// # Safety
/// `entries` points to `d * d` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_cov_new(d: usize, entries: *const f64, out: *mut *mut PcCov) -> PcStatus {
    guard(|| {
        let n = d.checked_mul(d).ok_or_else(|| Fail(PcStatus::InvalidArgument, "d * d overflows".into()))?;
        let v = slice(entries, n, "entries")?.to_vec();
        put_box(out, PcCov { inner: CovMatrix::from_row_major(d, v)? })
    })
}

/// # Safety
/// `c` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_cov_free(c: *mut PcCov) {
    free(c)
}

unsafe fn bound_inputs(list: *const *const PcExpansion, n: usize) -> Result<Vec<ChaosExpansion>, Fail> {
    slice(list, n, "list")?
        .iter()
        .map(|e| handle(*e, "expansion").map(|e| e.inner.clone()))
        .collect()
}

fn mode(mode: PcMode, reps: usize, seed: u64) -> Mode {
    match mode {
        PcMode::Analytic => Mode::Analytic,
        PcMode::MonteCarlo => Mode::MonteCarlo { reps, seed },
    }
}

/// Interpolation (d3) bound for the vector of `n` centered expansions against N(0, C).
/// `reps` and `seed` are used only in Monte Carlo mode.
///
/// # Safety
/// `list` points to `n` live handles, `cov` is live, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_bound_d3(
    list: *const *const PcExpansion,
    n: usize,
    cov: *const PcCov,
    how: PcMode,
    reps: usize,
    seed: u64,
    out: *mut *mut PcReport,
) -> PcStatus {
    guard(|| {
        let l = bound_inputs(list, n)?;
        let c = handle(cov, "cov")?;
        let r = assemble_d3(&l, &c.inner, mode(how, reps, seed), &AssembleOptions::default())?;
        put_box(out, PcReport { inner: r })
    })
}

/// Malliavin-Stein (d2) bound; needs C positive definite.
///
/// # Safety
/// As for `pc_bound_d3`.
#[no_mangle]
pub unsafe extern "C" fn pc_bound_d2(
    list: *const *const PcExpansion,
    n: usize,
    cov: *const PcCov,
    how: PcMode,
    reps: usize,
    seed: u64,
    out: *mut *mut PcReport,
) -> PcStatus {
    guard(|| {
        let l = bound_inputs(list, n)?;
        let c = handle(cov, "cov")?;
        let r = assemble_d2(&l, &c.inner, mode(how, reps, seed), &AssembleOptions::default())?;
        put_box(out, PcReport { inner: r })
    })
}

/// # Safety
/// `r` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_report_free(r: *mut PcReport) {
    free(r)
}

/// # Safety
/// `r` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_report_d3(r: *const PcReport) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.inner.d3_bound)
}

/// Writes the d2 bound, or returns `Undefined` when C is singular.
///
/// # Safety
/// `r` is live and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_report_d2(r: *const PcReport, out: *mut f64) -> PcStatus {
    guard(|| {
        let r = handle(r, "report")?;
        let d2 = r
            .inner
            .d2_bound
            .ok_or_else(|| Fail(PcStatus::Undefined, "C is singular, d2 bound undefined".into()))?;
        put(out, d2)
    })
}

/// Σ E[(C(i,j) - ⟨DF_i, -DL⁻¹F_j⟩)²].
///
/// # Safety
/// `r` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_report_term_sq_sum(r: *const PcReport) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.inner.term_sq_sum)
}

/// # Safety
/// `r` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pc_report_cubic_term(r: *const PcReport) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.inner.cubic_term)
}

/// Replications of `n` expansions on one space, row-major into `buf` (n x reps).
///
/// # Safety
/// `list` points to `n` live handles and `buf` to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pc_simulate(
    list: *const *const PcExpansion,
    n: usize,
    reps: usize,
    seed: u64,
    buf: *mut f64,
    len: usize,
) -> PcStatus {
    guard(|| {
        let l = bound_inputs(list, n)?;
        if n.checked_mul(reps) != Some(len) {
            return Err(Fail(PcStatus::InvalidArgument, format!("buffer holds {len} values, need {n} x {reps}")));
        }
        let s = simulate_functionals(&l, reps, seed)?;
        let out = slice_mut(buf, len, "buf")?;
        for (row, v) in out.chunks_mut(reps.max(1)).zip(&s.values) {
            row.copy_from_slice(v);
        }
        Ok(())
    })
}

unsafe fn ou_config(lambdas: *const f64, n: usize, t: f64, h: f64) -> Result<OUConfig, Fail> {
    let mut cfg = OUConfig::new(slice(lambdas, n, "lambdas")?.to_vec(), t);
    cfg.h = h;
    cfg.validate()?;
    Ok(cfg)
}

fn which(w: PcWhich) -> Which {
    match w {
        PcWhich::A => Which::A,
        PcWhich::Q => Which::Q,
        PcWhich::Qh => Which::Qh,
    }
}

/// Closed-form covariance of the OU functionals i and j at horizon `t`
/// (Rademacher marks; `h` is used by Qh only).
///
/// # Safety
/// `lambdas` points to `n` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pc_ou_cov_exact(
    lambdas: *const f64,
    n: usize,
    t: f64,
    h: f64,
    w: PcWhich,
    i: usize,
    j: usize,
    out: *mut f64,
) -> PcStatus {
    guard(|| {
        let cfg = ou_config(lambdas, n, t, h)?;
        if i >= n || j >= n {
            return Err(Fail(PcStatus::InvalidArgument, format!("index ({i}, {j}) out of range for {n} rates")));
        }
        put(out, cov_exact(&cfg, which(w), i, j)?)
    })
}

/// Large-T limit covariance, row-major into `buf` of length n * n.
///
/// # Safety
/// `lambdas` points to `n` doubles and `buf` to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pc_ou_cov_limit(
    lambdas: *const f64,
    n: usize,
    h: f64,
    w: PcWhich,
    buf: *mut f64,
    len: usize,
) -> PcStatus {
    guard(|| {
        let cfg = ou_config(lambdas, n, 1.0, h)?;
        if n.checked_mul(n) != Some(len) {
            return Err(Fail(PcStatus::InvalidArgument, format!("buffer holds {len} values, need {n} x {n}")));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(cov_limit(&cfg, which(w))?.entries());
        Ok(())
    })
}
