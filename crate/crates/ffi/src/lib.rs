//! C ABI over the encoder, learned decoder and quantizer.
//!
//! Every fallible call returns a [`CsifbStatus`]. On failure the message is
//! kept per thread and can be read with [`csifb_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use csifb::harness::{encoder_flops, CsiModel, ModelConfig};
use csifb::quantize::{feedback_bits, fit_lloyd_max, QuantizerCodebook};
use csifb::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsifbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Format = 4,
    Io = 5,
    Numerical = 6,
    NonConvergence = 7,
    /// A panic was caught at the boundary.
    Internal = 8,
}

/// Trained or freshly initialised model.
pub struct CsifbModel(CsiModel);

/// Scalar Lloyd-Max codebook.
pub struct CsifbQuantizer(QuantizerCodebook);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CsifbStatus {
    match e {
        Error::Dimension(_) => CsifbStatus::Dimension,
        Error::Contract(_) => CsifbStatus::InvalidArgument,
        Error::Format(_) => CsifbStatus::Format,
        Error::Io(_) => CsifbStatus::Io,
        Error::Numerical(_) => CsifbStatus::Numerical,
        Error::NonConvergence { .. } => CsifbStatus::NonConvergence,
    }
}

enum Failure {
    Status(CsifbStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(CsifbStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure::Status(CsifbStatus::InvalidArgument, msg)
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsifbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CsifbStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CsifbStatus::Internal
        }
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable values.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn to_path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `out` must be null or writable.
unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// # Safety
/// `p` must be null or a live handle.
unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null("handle"))
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), Failure> {
    if src.len() != dst.len() {
        return Err(Failure::Status(
            CsifbStatus::Dimension,
            format!("output holds {} values, result has {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn csifb_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint written by the training command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn csifb_model_load(path: *const c_char, out: *mut *mut CsifbModel) -> CsifbStatus {
    guard(|| {
        let p = to_path(path)?;
        put(out, CsifbModel(CsiModel::load(p)?))
    })
}

/// Untrained desk-scale model (8x8 channel, codeword length 32).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csifb_model_new_desk(seed: u64, out: *mut *mut CsifbModel) -> CsifbStatus {
    guard(|| put(out, CsifbModel(CsiModel::new(ModelConfig::desk(), seed)?)))
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn csifb_model_save(model: *const CsifbModel, path: *const c_char) -> CsifbStatus {
    guard(|| {
        let m = handle(model)?;
        m.0.save(to_path(path)?)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csifb_model_free(model: *mut CsifbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the retained delay rows, antennas, real channel length and codeword
/// length. Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn csifb_model_dims(
    model: *const CsifbModel,
    na: *mut usize,
    nt: *mut usize,
    n: *mut usize,
    m: *mut usize,
) -> CsifbStatus {
    guard(|| {
        let md = &handle(model)?.0;
        for (p, v) in [(na, md.na()), (nt, md.nt()), (n, md.n()), (m, md.m())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Encodes `batch` channels (`batch * n` values) into `batch * m` codeword values.
///
/// # Safety
/// `h` must hold `h_len` values and `out` must have room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn csifb_model_encode(
    model: *const CsifbModel,
    h: *const f64,
    h_len: usize,
    out: *mut f64,
    out_len: usize,
) -> CsifbStatus {
    guard(|| {
        let md = &handle(model)?.0;
        let codes = md.encode_batch(slice(h, h_len, "h")?)?;
        copy_out(&codes, slice_mut(out, out_len, "out")?)
    })
}

/// Runs `iters` learned decoder iterations on `batch * m` codeword values and
/// writes `batch * n` reconstructed channel values.
///
/// # Safety
/// `s` must hold `s_len` values and `out` must have room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn csifb_model_decode(
    model: *const CsifbModel,
    s: *const f64,
    s_len: usize,
    iters: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> CsifbStatus {
    guard(|| {
        let md = &handle(model)?.0;
        let codes = slice(s, s_len, "s")?;
        if codes.is_empty() || codes.len() % md.m() != 0 {
            return Err(Failure::Status(
                CsifbStatus::Dimension,
                format!("{} values do not split into codewords of {}", codes.len(), md.m()),
            ));
        }
        let res = md.decode_batch(codes, iters, seed)?;
        copy_out(&res.x, slice_mut(out, out_len, "out")?)
    })
}

/// Fits a `bits`-bit Lloyd-Max codebook to `len` samples.
///
/// # Safety
/// `samples` must hold `len` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csifb_quantizer_fit(
    samples: *const f64,
    len: usize,
    bits: u8,
    max_iter: usize,
    tol: f64,
    out: *mut *mut CsifbQuantizer,
) -> CsifbStatus {
    guard(|| {
        let (cb, _) = fit_lloyd_max(slice(samples, len, "samples")?, bits, max_iter, tol)?;
        put(out, CsifbQuantizer(cb))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn csifb_quantizer_load(path: *const c_char, out: *mut *mut CsifbQuantizer) -> CsifbStatus {
    guard(|| put(out, CsifbQuantizer(QuantizerCodebook::load(to_path(path)?)?)))
}

/// # Safety
/// `q` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn csifb_quantizer_save(q: *const CsifbQuantizer, path: *const c_char) -> CsifbStatus {
    guard(|| {
        handle(q)?.0.save(to_path(path)?)?;
        Ok(())
    })
}

/// Releases a codebook. Null is ignored.
///
/// # Safety
/// `q` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csifb_quantizer_free(q: *mut CsifbQuantizer) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// Bits per scalar of a codebook, or 0 for a null handle.
///
/// # Safety
/// `q` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csifb_quantizer_bits(q: *const CsifbQuantizer) -> u8 {
    q.as_ref().map_or(0, |q| q.0.bits)
}

/// Maps `len` values to level indices and their reconstruction levels.
/// Either output may be null.
///
/// # Safety
/// `s` must hold `len` values; non-null outputs must have room for `len`.
#[no_mangle]
pub unsafe extern "C" fn csifb_quantizer_quantize(
    q: *const CsifbQuantizer,
    s: *const f64,
    len: usize,
    indices: *mut u32,
    dequantized: *mut f64,
) -> CsifbStatus {
    guard(|| {
        let cb = &handle(q)?.0;
        let res = cb.quantize(slice(s, len, "s")?);
        if !indices.is_null() {
            slice_mut(indices, len, "indices")?.copy_from_slice(&res.indices);
        }
        if !dequantized.is_null() {
            slice_mut(dequantized, len, "dequantized")?.copy_from_slice(&res.dequantized);
        }
        Ok(())
    })
}

/// Feedback payload size `m * bits`.
#[no_mangle]
pub extern "C" fn csifb_feedback_bits(m: usize, bits: u8) -> usize {
    feedback_bits(m, bits)
}

/// Encoder multiply count for an `na x nt` channel at compression `1 / cr`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csifb_encoder_flops(na: usize, nt: usize, cr: usize, out: *mut usize) -> CsifbStatus {
    guard(|| {
        let v = encoder_flops(na, nt, cr)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = v;
        Ok(())
    })
}
