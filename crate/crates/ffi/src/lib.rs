//! C ABI over the splitlstm toolkit.
//!
//! Conventions:
//! - Every fallible function returns an [`SlStatus`]; outputs go through
//!   pointer arguments and are written only on `SL_STATUS_OK`.
//! - Handles are opaque and owned by the caller once returned; release them
//!   with the matching `*_free` / `*_stop` function. Passing NULL to a
//!   release function is a no-op.
//! - The message for the most recent failure on the calling thread is
//!   available from [`sl_last_error`].
//! - Panics never cross the boundary; they surface as `SL_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use splitlstm::compression::FixedPointFormat;
use splitlstm::costmodel::{scalability, Resources};
use splitlstm::manifest::RunManifest;
use splitlstm::pipeline::ModelSource;
use splitlstm::split::{partition, DType, Deployed, PlanName, SplitManifest, SplitPlan};
use splitlstm::wire::{run_edge, EdgeConfig, Server, ServerHandle};
use splitlstm::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Unreadable or corrupt model file, or malformed wire data.
    Format = 4,
    Shape = 5,
    HashMismatch = 6,
    Network = 7,
    BufferTooSmall = 8,
    Internal = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlPlan {
    LstmDoS = 0,
    SplitA = 1,
    SplitB = 2,
}

impl From<SlPlan> for PlanName {
    fn from(p: SlPlan) -> Self {
        match p {
            SlPlan::LstmDoS => PlanName::LstmDoS,
            SlPlan::SplitA => PlanName::SplitA,
            SlPlan::SplitB => PlanName::SplitB,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlDtype {
    /// Keep the precision stored in the file.
    Native = 0,
    F32 = 1,
    Q8 = 2,
}

/// A loaded model in deployment precision.
pub struct SlModel {
    inner: Deployed,
}

/// A running server half; stop it with [`sl_server_stop`].
pub struct SlServer {
    handle: ServerHandle,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SlStatus {
    match e {
        Error::Shape(_) => SlStatus::Shape,
        Error::HashMismatch { .. } => SlStatus::HashMismatch,
        Error::ModelFile(_) | Error::Frame(_) | Error::Json(_) | Error::Data(_) => SlStatus::Format,
        Error::Io(_) => SlStatus::Io,
        _ => SlStatus::InvalidArgument,
    }
}

struct Fail(SlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SlStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            SlStatus::Internal
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SlStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SlModel) -> Result<&'a Deployed, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn in_slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length in bytes
/// excluding the terminator.
///
/// # Safety
/// `buf` must be NULL or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a float or quantized model file. With `dtype = Q8`, a float file is
/// quantized on load to Q`int_bits`.(8 - `int_bits`); `int_bits` is ignored
/// otherwise unless the file is already quantized, in which case a nonzero
/// value must match the stored format.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sl_model_load(path: *const c_char, dtype: SlDtype, int_bits: u8, out: *mut *mut SlModel) -> SlStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let format = match int_bits {
            0 => None,
            b => Some(FixedPointFormat::new(b)?),
        };
        let source = ModelSource {
            path: Path::new(path).to_path_buf(),
            dtype: match dtype {
                SlDtype::Native => None,
                SlDtype::F32 => Some(DType::F32),
                SlDtype::Q8 => Some(DType::Q8),
            },
            format,
        };
        let mut m = RunManifest::new("ffi-load", None, serde_json::Value::Null);
        let inner = source.load(&mut m)?;
        *out = Box::into_raw(Box::new(SlModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`sl_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_model_free(model: *mut SlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parameter count and window length of a loaded model.
///
/// # Safety
/// `model` must be a live handle; outputs must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_info(model: *const SlModel, param_count: *mut usize, window_length: *mut usize, is_quantized: *mut bool) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        if let Some(p) = param_count.as_mut() {
            *p = m.spec().param_count();
        }
        if let Some(w) = window_length.as_mut() {
            *w = m.spec().window_length;
        }
        if let Some(q) = is_quantized.as_mut() {
            *q = m.dtype() == DType::Q8;
        }
        Ok(())
    })
}

/// Unsplit inference on one normalized window of `len` values.
///
/// # Safety
/// `window` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_predict(model: *const SlModel, window: *const f64, len: usize, out: *mut f64) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let w = in_slice(window, len, "window")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.predict_value(w)?;
        Ok(())
    })
}

/// Number of elements the edge sends under `plan`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_intermediate_size(model: *const SlModel, plan: SlPlan, out: *mut usize) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let plan = SplitPlan::preset(plan.into(), m.spec())?;
        *out = splitlstm::split::intermediate_size(m.spec(), &plan)?;
        Ok(())
    })
}

/// Runs the edge half under `plan` and writes `z` (dequantized for q8
/// models) into `z_out`. `z_len` receives the element count; when it exceeds
/// `cap` nothing is written and `SL_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `window` must point to `len` doubles; `z_out` to `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sl_edge_forward(
    model: *const SlModel,
    plan: SlPlan,
    window: *const f64,
    len: usize,
    z_out: *mut f64,
    cap: usize,
    z_len: *mut usize,
) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let w = in_slice(window, len, "window")?;
        if z_len.is_null() {
            return Err(null("z_len"));
        }
        let (edge, _) = partition(m, &SplitPlan::preset(plan.into(), m.spec())?)?;
        let z = edge.forward(w)?.to_f64();
        *z_len = z.len();
        if z.len() > cap {
            return Err(Fail(SlStatus::BufferTooSmall, format!("z has {} elements, buffer holds {cap}", z.len())));
        }
        if z_out.is_null() {
            return Err(null("z_out"));
        }
        ptr::copy_nonoverlapping(z.as_ptr(), z_out, z.len());
        Ok(())
    })
}

/// Starts serving the server half of `model` under `plan` on `endpoint`
/// (`host:port`; port 0 picks a free one). The model handle may be freed
/// afterwards.
///
/// # Safety
/// `endpoint` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_server_start(model: *const SlModel, plan: SlPlan, endpoint: *const c_char, out: *mut *mut SlServer) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let endpoint = c_str(endpoint, "endpoint")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let plan = SplitPlan::preset(plan.into(), m.spec())?;
        let (_, server) = partition(m, &plan)?;
        let handle = Server::bind(endpoint, server, SplitManifest::new(m, &plan)?)?.spawn()?;
        *out = Box::into_raw(Box::new(SlServer { handle }));
        Ok(())
    })
}

/// Port the server is bound to, or 0 for NULL.
///
/// # Safety
/// `server` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sl_server_port(server: *const SlServer) -> u16 {
    server.as_ref().map_or(0, |s| s.handle.local_addr().port())
}

/// Stops the server, waits for open connections, and frees the handle.
///
/// # Safety
/// `server` must be NULL or a handle from [`sl_server_start`] not yet stopped.
#[no_mangle]
pub unsafe extern "C" fn sl_server_stop(server: *mut SlServer) {
    if !server.is_null() {
        let s = Box::from_raw(server);
        let _ = catch_unwind(AssertUnwindSafe(move || s.handle.shutdown()));
    }
}

/// Split inference over `n_windows` row-major windows of `window_len`
/// values against the server at `endpoint`; writes one prediction per window.
/// Any failed window fails the call with `SL_STATUS_NETWORK` (or the
/// matching code) and leaves `out` unspecified.
///
/// # Safety
/// `windows` must point to `n_windows * window_len` doubles and `out` to
/// `n_windows` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sl_edge_infer(
    model: *const SlModel,
    plan: SlPlan,
    endpoint: *const c_char,
    windows: *const f64,
    n_windows: usize,
    window_len: usize,
    out: *mut f64,
) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let endpoint = c_str(endpoint, "endpoint")?;
        let total = n_windows
            .checked_mul(window_len)
            .ok_or_else(|| Fail(SlStatus::InvalidArgument, "window buffer size overflows".into()))?;
        let data = in_slice(windows, total, "windows")?;
        if n_windows > 0 && out.is_null() {
            return Err(null("out"));
        }
        if window_len == 0 && n_windows > 0 {
            return Err(Fail(SlStatus::InvalidArgument, "window_len is zero".into()));
        }
        let plan = SplitPlan::preset(plan.into(), m.spec())?;
        let (edge, _) = partition(m, &plan)?;
        let manifest = SplitManifest::new(m, &plan)?;
        let run = run_edge(&edge, &manifest, data.chunks(window_len.max(1)), endpoint, &EdgeConfig::default());
        let mut preds = Vec::with_capacity(n_windows);
        for (i, r) in run.results.into_iter().enumerate() {
            let z = r.map_err(|e| {
                let status = match e {
                    splitlstm::wire::EdgeError::Local(_) => SlStatus::Shape,
                    splitlstm::wire::EdgeError::Frame(_) => SlStatus::Format,
                    _ => SlStatus::Network,
                };
                Fail(status, format!("window {i}: {e}"))
            })?;
            preds.push(z.scalar()?);
        }
        if n_windows > 0 {
            ptr::copy_nonoverlapping(preds.as_ptr(), out, preds.len());
        }
        Ok(())
    })
}

/// `size_kb(teacher) / size_kb(student)`; NaN when `student_params` is 0.
#[no_mangle]
pub extern "C" fn sl_compression_ratio(teacher_params: usize, student_params: usize) -> f64 {
    if student_params == 0 {
        return f64::NAN;
    }
    splitlstm::compression::compression_ratio(teacher_params, student_params)
}

/// Accelerator instances that fit: `min floor(total[r] / pe[r])` over the
/// four resource classes (BRAM, DSP, LUT, FF).
///
/// # Safety
/// `total` and `pe` must each point to 4 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_scalability(total: *const f64, pe: *const f64, out: *mut u32) -> SlStatus {
    guard(|| {
        let t = in_slice(total, 4, "total")?;
        let p = in_slice(pe, 4, "pe")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let res = |v: &[f64]| Resources {
            bram: v[0],
            dsp: v[1],
            lut: v[2],
            ff: v[3],
        };
        *out = scalability(&res(t), &res(p))?;
        Ok(())
    })
}
