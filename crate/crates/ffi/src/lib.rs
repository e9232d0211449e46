//! C ABI over `conceptor-steer`.
//!
//! Objects are opaque heap handles released with the matching `*_free`. Every
//! fallible call returns a [`CsStatus`]; on failure a message is available
//! from [`cs_last_error`] on the same thread until the next failing call.
//! Panics are caught at the boundary and reported as `CS_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use conceptor_steer::boolean::{and_conceptor, and_not, not_conceptor, or_conceptor, AnyConceptor, ConceptorLike};
use conceptor_steer::conceptor::fit_bundle;
use conceptor_steer::conceptor_file::{load_conceptor, save_conceptor};
use conceptor_steer::evaluation::{degeneracy_flag, win_ratio, ScoredPair};
use conceptor_steer::steering::{apply_plan_f32, load_plan, save_plan, SteeringPlan};
use conceptor_steer::store::{load_bundle, save_bundle, ActivationBundle};
use conceptor_steer::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Dimension = 4,
    Data = 5,
    Numeric = 6,
    Io = 7,
    Panic = 8,
}

/// Activation bundle handle.
pub struct CsBundle(ActivationBundle);

/// Fitted or composed conceptor handle.
pub struct CsConceptor(AnyConceptor);

/// Steering plan handle.
pub struct CsPlan(SteeringPlan);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> CsStatus {
    match e {
        Error::InvalidArgument(_) => CsStatus::InvalidArgument,
        Error::Format { .. } | Error::Parse { .. } | Error::NonFinite { .. } => CsStatus::Format,
        Error::DimensionMismatch { .. } => CsStatus::Dimension,
        Error::EmptySelection(_) | Error::Degenerate(_) => CsStatus::Data,
        Error::Numeric(_) => CsStatus::Numeric,
        Error::Io { .. } => CsStatus::Io,
    }
}

impl From<Error> for CsStatus {
    fn from(e: Error) -> Self {
        set_error(e.to_string());
        status_of(&e)
    }
}

fn null(what: &str) -> CsStatus {
    set_error(format!("null pointer: {what}"));
    CsStatus::NullPointer
}

fn guard(f: impl FnOnce() -> Result<(), CsStatus>) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside conceptor-steer");
            CsStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, CsStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("path is not valid UTF-8");
        CsStatus::InvalidArgument
    })
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, CsStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, CsStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], CsStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], CsStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn check_len(expected: usize, found: usize, what: &str) -> Result<(), CsStatus> {
    if expected != found {
        set_error(format!("{what}: expected {expected} elements, got {found}"));
        return Err(CsStatus::Dimension);
    }
    Ok(())
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn cs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn cs_bundle_load(path: *const c_char, out: *mut *mut CsBundle) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(CsBundle(load_bundle(path_arg(path)?)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_bundle_save(bundle: *const CsBundle, path: *const c_char) -> CsStatus {
    guard(|| {
        save_bundle(&handle(bundle, "bundle")?.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Row count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn cs_bundle_rows(bundle: *const CsBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.rows())
}

/// Hidden width, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn cs_bundle_dim(bundle: *const CsBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.dim())
}

/// Copies the row-major `rows × dim` payload into `out` (`len` floats).
#[no_mangle]
pub unsafe extern "C" fn cs_bundle_copy_data(bundle: *const CsBundle, out: *mut f32, len: usize) -> CsStatus {
    guard(|| {
        let b = &handle(bundle, "bundle")?.0;
        check_len(b.data().len(), len, "bundle buffer")?;
        slice_out(out, len, "out")?.copy_from_slice(b.data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_bundle_free(bundle: *mut CsBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Fits a conceptor on every row of the bundle.
#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_fit(
    bundle: *const CsBundle,
    alpha: f64,
    out: *mut *mut CsConceptor,
) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let c = fit_bundle(&handle(bundle, "bundle")?.0, alpha)?;
        *out = boxed(CsConceptor(AnyConceptor::Fitted(c)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_load(path: *const c_char, out: *mut *mut CsConceptor) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(CsConceptor(load_conceptor(path_arg(path)?)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_save(c: *const CsConceptor, path: *const c_char) -> CsStatus {
    guard(|| {
        save_conceptor(&handle(c, "conceptor")?.0, path_arg(path)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_dim(c: *const CsConceptor) -> usize {
    c.as_ref().map_or(0, |c| c.0.dim())
}

/// `tr(C) / d`.
#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_quota(c: *const CsConceptor, out: *mut f64) -> CsStatus {
    guard(|| {
        let c = &handle(c, "conceptor")?.0;
        *out_ptr(out, "out")? = c.trace() / c.dim() as f64;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_trace(c: *const CsConceptor, out: *mut f64) -> CsStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(c, "conceptor")?.0.trace();
        Ok(())
    })
}

/// Re-gates a fitted conceptor at a new aperture. Composed conceptors have
/// no aperture and yield `CS_STATUS_INVALID_ARGUMENT`.
#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_regate(
    c: *const CsConceptor,
    alpha: f64,
    out: *mut *mut CsConceptor,
) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        match &handle(c, "conceptor")?.0 {
            AnyConceptor::Fitted(f) => {
                *out = boxed(CsConceptor(AnyConceptor::Fitted(f.regate(alpha)?)));
                Ok(())
            }
            AnyConceptor::Composed(_) => {
                Err(Error::InvalidArgument("composed conceptors cannot be re-gated".into()).into())
            }
        }
    })
}

/// Copies the dense `d × d` matrix, row-major, into `out` (`len = d·d`).
#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_copy_matrix(c: *const CsConceptor, out: *mut f64, len: usize) -> CsStatus {
    guard(|| {
        let c = &handle(c, "conceptor")?.0;
        let d = c.dim();
        check_len(d * d, len, "matrix buffer")?;
        let dst = slice_out(out, len, "out")?;
        let m = c.matrix();
        for r in 0..d {
            for col in 0..d {
                dst[r * d + col] = m[(r, col)];
            }
        }
        Ok(())
    })
}

/// Copies the Boolean expression text, NUL-terminated, into `out` of
/// capacity `len`. `needed` receives the required capacity including NUL.
#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_expression(
    c: *const CsConceptor,
    out: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CsStatus {
    guard(|| {
        let text = handle(c, "conceptor")?.0.expression().to_string();
        let bytes = text.as_bytes();
        if let Some(n) = needed.as_mut() {
            *n = bytes.len() + 1;
        }
        if len < bytes.len() + 1 {
            set_error(format!("expression needs {} bytes", bytes.len() + 1));
            return Err(CsStatus::Dimension);
        }
        let dst = slice_out(out.cast::<u8>(), len, "out")?;
        dst[..bytes.len()].copy_from_slice(bytes);
        dst[bytes.len()] = 0;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_free(c: *mut CsConceptor) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// `I − C`.
#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_not(c: *const CsConceptor, out: *mut *mut CsConceptor) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(CsConceptor(AnyConceptor::Composed(not_conceptor(&handle(c, "conceptor")?.0))));
        Ok(())
    })
}

unsafe fn binary(
    a: *const CsConceptor,
    b: *const CsConceptor,
    out: *mut *mut CsConceptor,
    op: fn(&AnyConceptor, &AnyConceptor) -> conceptor_steer::Result<conceptor_steer::boolean::MatrixConceptor>,
) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let r = op(&handle(a, "a")?.0, &handle(b, "b")?.0)?;
        *out = boxed(CsConceptor(AnyConceptor::Composed(r)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_and(
    a: *const CsConceptor,
    b: *const CsConceptor,
    out: *mut *mut CsConceptor,
) -> CsStatus {
    binary(a, b, out, and_conceptor)
}

#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_or(
    a: *const CsConceptor,
    b: *const CsConceptor,
    out: *mut *mut CsConceptor,
) -> CsStatus {
    binary(a, b, out, or_conceptor)
}

/// `a ∧ ¬b`.
#[no_mangle]
pub unsafe extern "C" fn cs_conceptor_and_not(
    a: *const CsConceptor,
    b: *const CsConceptor,
    out: *mut *mut CsConceptor,
) -> CsStatus {
    binary(a, b, out, and_not)
}

#[no_mangle]
pub unsafe extern "C" fn cs_plan_load(path: *const c_char, out: *mut *mut CsPlan) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(CsPlan(load_plan(path_arg(path)?)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_plan_save(plan: *const CsPlan, path: *const c_char) -> CsStatus {
    guard(|| {
        save_plan(&handle(plan, "plan")?.0, path_arg(path)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_plan_dim(plan: *const CsPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.dim())
}

/// Target layer of the plan, or `u32::MAX` for a null handle.
#[no_mangle]
pub unsafe extern "C" fn cs_plan_layer(plan: *const CsPlan) -> u32 {
    plan.as_ref().map_or(u32::MAX, |p| p.0.layer)
}

/// Steers a row-major `tokens × dim` float buffer. `input` and `out` may
/// alias.
#[no_mangle]
pub unsafe extern "C" fn cs_plan_apply(
    plan: *const CsPlan,
    input: *const f32,
    tokens: usize,
    dim: usize,
    out: *mut f32,
) -> CsStatus {
    guard(|| {
        let plan = &handle(plan, "plan")?.0;
        check_len(plan.dim(), dim, "token width")?;
        let n = tokens.checked_mul(dim).ok_or_else(|| {
            set_error("buffer size overflows");
            CsStatus::InvalidArgument
        })?;
        let steered = apply_plan_f32(slice_arg(input, n, "input")?, tokens, plan)?;
        slice_out(out, n, "out")?.copy_from_slice(&steered);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cs_plan_free(plan: *mut CsPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

fn pairs(base: &[f64], steered: &[f64], base_len: &[u64], steered_len: &[u64]) -> Vec<ScoredPair> {
    (0..base.len().max(base_len.len()))
        .map(|i| ScoredPair {
            prompt_id: i.to_string(),
            base_score: base.get(i).copied(),
            steered_score: steered.get(i).copied(),
            base_len: base_len.get(i).copied().unwrap_or(0),
            steered_len: steered_len.get(i).copied().unwrap_or(0),
        })
        .collect()
}

/// Fraction of the `n` pairs with `steered[i] > base[i]`.
#[no_mangle]
pub unsafe extern "C" fn cs_win_ratio(base: *const f64, steered: *const f64, n: usize, out: *mut f64) -> CsStatus {
    guard(|| {
        let p = pairs(slice_arg(base, n, "base")?, slice_arg(steered, n, "steered")?, &[], &[]);
        *out_ptr(out, "out")? = win_ratio(&p)?;
        Ok(())
    })
}

/// Mean-length ratio of `n` steered/base generations and whether it exceeds
/// `threshold`.
#[no_mangle]
pub unsafe extern "C" fn cs_degeneracy(
    base_len: *const u64,
    steered_len: *const u64,
    n: usize,
    threshold: f64,
    ratio: *mut f64,
    degenerate: *mut bool,
) -> CsStatus {
    guard(|| {
        let p = pairs(&[], &[], slice_arg(base_len, n, "base_len")?, slice_arg(steered_len, n, "steered_len")?);
        let d = degeneracy_flag(&p, threshold)?;
        *out_ptr(ratio, "ratio")? = d.ratio;
        *out_ptr(degenerate, "degenerate")? = d.degenerate;
        Ok(())
    })
}
