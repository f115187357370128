//! C ABI over the `emgse` models.
//!
//! Handles are opaque pointers created by `*_load` and released by the
//! matching `*_free`. Every fallible call returns an [`EmgseStatus`]; on
//! failure [`emgse_last_error`] describes what went wrong on the calling
//! thread. Audio is 16 kHz mono `double`; EMG is 1 kHz, 8 channels,
//! interleaved `float` (frame-major).

use emgse::checkpoint::{Checkpoint, CheckpointError};
use emgse::dsp::{DspError, Waveform};
use emgse::emg::{EmgError, EmgRecording, Stage1Model, EMG_CHANNELS};
use emgse::metrics::{si_sdr, stoi, MetricError};
use emgse::se::{Enhancer, ForwardOptions, SeError};
use emgse::tensor::TensorError;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmgseStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Malformed argument (bad UTF-8 path, wrong length, ...).
    InvalidArgument = 2,
    /// Inconsistent configuration or a checkpoint that does not fit.
    Config = 3,
    /// Input data rejected by the model.
    Input = 4,
    /// Non-finite values during computation.
    Numeric = 5,
    Io = 6,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

/// A loaded enhancement network.
pub struct EmgseEnhancer {
    inner: Enhancer<f64>,
}

/// A loaded EMG-to-speech model.
pub struct EmgseStage1 {
    inner: Stage1Model<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

struct Failure(EmgseStatus, String);

impl Failure {
    fn arg(msg: impl Into<String>) -> Self {
        Failure(EmgseStatus::InvalidArgument, msg.into())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        let status = match e {
            TensorError::Domain { .. } => EmgseStatus::Numeric,
            _ => EmgseStatus::Input,
        };
        Failure(status, e.to_string())
    }
}

impl From<DspError> for Failure {
    fn from(e: DspError) -> Self {
        let status = match e {
            DspError::Config(_) => EmgseStatus::Config,
            DspError::Io(_) => EmgseStatus::Io,
            _ => EmgseStatus::Input,
        };
        Failure(status, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::Io(_) => EmgseStatus::Io,
            CheckpointError::Format(_) => EmgseStatus::Input,
            _ => EmgseStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

impl From<SeError> for Failure {
    fn from(e: SeError) -> Self {
        match e {
            SeError::Tensor(t) => t.into(),
            SeError::Dsp(d) => d.into(),
            SeError::Checkpoint(c) => c.into(),
            SeError::Config(m) => Failure(EmgseStatus::Config, m),
            SeError::Numeric(m) => Failure(EmgseStatus::Numeric, m),
            SeError::Input(m) => Failure(EmgseStatus::Input, m),
        }
    }
}

impl From<EmgError> for Failure {
    fn from(e: EmgError) -> Self {
        match e {
            EmgError::Tensor(t) => t.into(),
            EmgError::Dsp(d) => d.into(),
            EmgError::Checkpoint(c) => c.into(),
            EmgError::Config(m) => Failure(EmgseStatus::Config, m),
            EmgError::Numeric(m) => Failure(EmgseStatus::Numeric, m),
            EmgError::Io(e) => Failure(EmgseStatus::Io, e.to_string()),
            other => Failure(EmgseStatus::Input, other.to_string()),
        }
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        let status = match e {
            MetricError::Io(_) => EmgseStatus::Io,
            _ => EmgseStatus::Input,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EmgseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmgseStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EmgseStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(
            EmgseStatus::NullPointer,
            format!("`{what}` is null"),
        ))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be a valid NUL-terminated string.
unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    non_null(p, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::arg("path is not valid UTF-8"))
}

/// # Safety
/// `p` must point to `len` readable values (or be null with `len == 0`).
unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Err(Failure::arg(format!("`{what}` is empty")));
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn audio(samples: &[f64]) -> Result<Waveform, Failure> {
    Ok(Waveform::audio(samples.to_vec())?)
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn emgse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn emgse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an enhancement checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn emgse_enhancer_load(
    path: *const c_char,
    out: *mut *mut EmgseEnhancer,
) -> EmgseStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let ck = Checkpoint::load(path_arg(path)?)?;
        let inner = Enhancer::<f64>::from_checkpoint(&ck)?;
        *out = Box::into_raw(Box::new(EmgseEnhancer { inner }));
        Ok(())
    })
}

/// Releases a handle from [`emgse_enhancer_load`]. Null is ignored.
///
/// # Safety
/// `h` must come from [`emgse_enhancer_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn emgse_enhancer_free(h: *mut EmgseEnhancer) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Writes 1 to `*out` if the network expects an auxiliary speech signal.
///
/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn emgse_enhancer_is_multimodal(
    h: *const EmgseEnhancer,
    out: *mut i32,
) -> EmgseStatus {
    guard(|| {
        non_null(h, "handle")?;
        non_null(out, "out")?;
        *out = (*h).inner.config().multimodal as i32;
        Ok(())
    })
}

/// Enhances `len` noisy samples into `out` (also `len` samples). `aux`
/// must hold `len` samples for a multimodal network and may be null
/// otherwise. A nonzero `pass_through` applies a unit mask and keeps the
/// noisy phase.
///
/// # Safety
/// `noisy` and `out` must hold `len` values; `aux`, when non-null, too.
#[no_mangle]
pub unsafe extern "C" fn emgse_enhance(
    h: *const EmgseEnhancer,
    noisy: *const f64,
    aux: *const f64,
    len: usize,
    pass_through: i32,
    out: *mut f64,
) -> EmgseStatus {
    guard(|| {
        non_null(h, "handle")?;
        non_null(out, "out")?;
        let noisy = audio(slice_arg(noisy, len, "noisy")?)?;
        let aux = if aux.is_null() {
            None
        } else {
            Some(audio(slice_arg(aux, len, "aux")?)?)
        };
        let opts = ForwardOptions {
            pass_through: pass_through != 0,
        };
        let y = (*h).inner.enhance(&noisy, aux.as_ref(), opts)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(y.samples());
        Ok(())
    })
}

/// Loads an EMG-to-speech checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn emgse_stage1_load(
    path: *const c_char,
    out: *mut *mut EmgseStage1,
) -> EmgseStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let ck = Checkpoint::load(path_arg(path)?)?;
        let inner = Stage1Model::<f64>::from_checkpoint(&ck)?;
        *out = Box::into_raw(Box::new(EmgseStage1 { inner }));
        Ok(())
    })
}

/// Releases a handle from [`emgse_stage1_load`]. Null is ignored.
///
/// # Safety
/// `h` must come from [`emgse_stage1_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn emgse_stage1_free(h: *mut EmgseStage1) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Converts `frames` EMG frames (8 interleaved channels each) into 16 kHz
/// speech. The result has `16 * frames` samples; `*out_len` receives that
/// number. If `cap` is smaller, nothing is written to `out` and
/// `BufferTooSmall` is returned, so callers may query with `cap == 0`.
///
/// # Safety
/// `emg` must hold `8 * frames` values, `out` `cap` values (may be null
/// when `cap == 0`), and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emgse_stage1_emg_to_speech(
    h: *const EmgseStage1,
    emg: *const f32,
    frames: usize,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> EmgseStatus {
    guard(|| {
        non_null(h, "handle")?;
        non_null(out_len, "out_len")?;
        let samples = slice_arg(emg, frames * EMG_CHANNELS, "emg")?;
        let rec = EmgRecording::new(samples.to_vec())?;
        let wave = (*h).inner.emg_to_speech(&rec)?;
        *out_len = wave.len();
        if cap < wave.len() {
            return Err(Failure(
                EmgseStatus::BufferTooSmall,
                format!("output needs {} samples, buffer holds {cap}", wave.len()),
            ));
        }
        non_null(out, "out")?;
        std::slice::from_raw_parts_mut(out, wave.len()).copy_from_slice(wave.samples());
        Ok(())
    })
}

/// STOI of `degraded` against `clean`, both `len` samples at 16 kHz.
///
/// # Safety
/// Both buffers must hold `len` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emgse_stoi(
    clean: *const f64,
    degraded: *const f64,
    len: usize,
    out: *mut f64,
) -> EmgseStatus {
    guard(|| {
        non_null(out, "out")?;
        let c = audio(slice_arg(clean, len, "clean")?)?;
        let d = audio(slice_arg(degraded, len, "degraded")?)?;
        *out = stoi(&c, &d)?;
        Ok(())
    })
}

/// Scale-invariant SDR (dB) of `estimate` against `clean`.
///
/// # Safety
/// Both buffers must hold `len` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emgse_si_sdr(
    clean: *const f64,
    estimate: *const f64,
    len: usize,
    out: *mut f64,
) -> EmgseStatus {
    guard(|| {
        non_null(out, "out")?;
        let c = audio(slice_arg(clean, len, "clean")?)?;
        let e = audio(slice_arg(estimate, len, "estimate")?)?;
        *out = si_sdr(&c, &e)?;
        Ok(())
    })
}
