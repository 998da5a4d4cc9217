//! C interface to the lprnet recognizer.
//!
//! Every function returns an [`LprStatus`]; on failure a message is kept per
//! thread and can be read with [`lpr_last_error`]. Recognizers are opaque
//! handles created by [`lpr_recognizer_open`] and released with
//! [`lpr_recognizer_free`]. A handle may be used from one thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lprnet::ctc::greedy_decode_with_prob;
use lprnet::flops::{count, Convention};
use lprnet::io::{load_spec, WeightStore};
use lprnet::layers::Mode;
use lprnet::model::{Model, INPUT_DIMS};
use lprnet::postfilter::TemplateSet;
use lprnet::tensor::{Shape, Tensor};
use lprnet::train::{decode, Decoder};
use lprnet::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LprStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Shape = 6,
    NoTemplateMatch = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Decoding strategy for [`lpr_recognize`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LprDecoder {
    Greedy = 0,
    Beam = 1,
}

/// Options for [`lpr_recognize`]. `templates` is optional template text (one
/// template per line) used to post-filter beam candidates; it may be NULL.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LprDecodeOptions {
    pub decoder: LprDecoder,
    pub beam_width: u32,
    pub templates: *const c_char,
}

/// Operation counts of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LprFlops {
    /// Multiply-accumulates of convolution and dense layers.
    pub macs: u64,
    /// Two operations per multiply-accumulate plus bias additions.
    pub flops: u64,
    /// Pooling, normalization, activation and sampling operations.
    pub aux: u64,
}

/// Opaque recognizer handle.
pub struct LprRecognizer {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: LprStatus, msg: impl Into<String>) -> LprStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> LprStatus {
    match e {
        Error::Shape(_) => LprStatus::Shape,
        Error::InvalidArgument(_) | Error::InfeasibleLabel { .. } => LprStatus::InvalidArgument,
        Error::NoTemplateMatch => LprStatus::NoTemplateMatch,
        Error::Format(_) => LprStatus::Format,
        Error::Config(_) => LprStatus::Config,
        Error::Io(_) => LprStatus::Io,
        Error::Diverged { .. } => LprStatus::Internal,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), LprStatus>) -> LprStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LprStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(LprStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: lprnet::Result<T>) -> Result<T, LprStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, LprStatus> {
    if p.is_null() {
        return Err(fail(LprStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LprStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn image_arg(rgb: *const u8, width: usize, height: usize) -> Result<Tensor<f32>, LprStatus> {
    if rgb.is_null() {
        return Err(fail(LprStatus::NullPointer, "image buffer is NULL"));
    }
    let (c, h, w) = INPUT_DIMS;
    if width != w || height != h {
        return Err(fail(
            LprStatus::Shape,
            format!("image is {width}x{height}, expected {w}x{h}"),
        ));
    }
    let bytes = std::slice::from_raw_parts(rgb, w * h * c);
    let mut data = vec![0f32; c * h * w];
    for (i, px) in bytes.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + i] = f32::from(v) / 255.0;
        }
    }
    lift(Tensor::from_vec(Shape::new(1, c, h, w), data))
}

unsafe fn handle<'a>(rec: *const LprRecognizer) -> Result<&'a LprRecognizer, LprStatus> {
    rec.as_ref()
        .ok_or_else(|| fail(LprStatus::NullPointer, "recognizer handle is NULL"))
}

/// Loads a model configuration file and its weight file.
///
/// # Safety
/// `config_path` and `weights_path` must be NUL-terminated strings; `out`
/// must be writable. On success `*out` receives a handle to be released with
/// [`lpr_recognizer_free`].
#[no_mangle]
pub unsafe extern "C" fn lpr_recognizer_open(
    config_path: *const c_char,
    weights_path: *const c_char,
    out: *mut *mut LprRecognizer,
) -> LprStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(LprStatus::NullPointer, "output handle pointer is NULL"));
        }
        *out = ptr::null_mut();
        let config = path_arg(config_path, "config path")?;
        let weights = path_arg(weights_path, "weights path")?;
        let spec = lift(load_spec(config))?;
        let store = lift(WeightStore::load(weights))?;
        let mut model = lift(Model::build(spec, 0))?;
        lift(store.load_into(&mut model))?;
        *out = Box::into_raw(Box::new(LprRecognizer { model }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `rec` must be NULL or a handle from [`lpr_recognizer_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lpr_recognizer_free(rec: *mut LprRecognizer) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Output sequence length and class count (including the blank) of the model.
///
/// # Safety
/// `rec` must be a live handle; `steps` and `classes` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpr_recognizer_dims(
    rec: *const LprRecognizer,
    steps: *mut usize,
    classes: *mut usize,
) -> LprStatus {
    guard(|| {
        let r = handle(rec)?;
        if steps.is_null() || classes.is_null() {
            return Err(fail(LprStatus::NullPointer, "output pointer is NULL"));
        }
        *steps = r.model.sequence_len();
        *classes = r.model.classes();
        Ok(())
    })
}

/// Recognizes a 94x24 interleaved 8-bit RGB image. The decoded plate is
/// written to `*label_out` as a UTF-8 string to be released with
/// [`lpr_string_free`], and its probability to `*prob_out` (either may be
/// NULL). `opts` may be NULL for greedy decoding.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes; pointers must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn lpr_recognize(
    rec: *const LprRecognizer,
    rgb: *const u8,
    width: usize,
    height: usize,
    opts: *const LprDecodeOptions,
    label_out: *mut *mut c_char,
    prob_out: *mut f64,
) -> LprStatus {
    guard(|| {
        let r = handle(rec)?;
        if !label_out.is_null() {
            *label_out = ptr::null_mut();
        }
        let img = image_arg(rgb, width, height)?;
        let decoder = match opts.as_ref() {
            None => Decoder::Greedy,
            Some(o) => match o.decoder {
                LprDecoder::Greedy => Decoder::Greedy,
                LprDecoder::Beam => Decoder::Beam {
                    width: o.beam_width as usize,
                    templates: if o.templates.is_null() {
                        None
                    } else {
                        Some(lift(TemplateSet::parse(path_arg(o.templates, "templates")?))?)
                    },
                },
            },
        };
        let probs = lift(r.model.forward(&img, Mode::Infer))?;
        let (label, p) = match decoder {
            Decoder::Greedy => greedy_decode_with_prob(&probs[0]),
            _ => lift(decode(&probs[0], &decoder, r.model.charset()))?,
        };
        if !label_out.is_null() {
            let text = r.model.charset().decode(&label);
            *label_out = CString::new(text)
                .map_err(|_| fail(LprStatus::Internal, "label contains NUL"))?
                .into_raw();
        }
        if !prob_out.is_null() {
            *prob_out = p;
        }
        Ok(())
    })
}

/// Writes the per-step class probabilities (steps x classes, row-major) of
/// an image into `out`. `*written` receives the number of values required;
/// if `out_len` is smaller, nothing is copied and `BufferTooSmall` is
/// returned.
///
/// # Safety
/// `out` must hold `out_len` floats; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpr_probabilities(
    rec: *const LprRecognizer,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut f32,
    out_len: usize,
    written: *mut usize,
) -> LprStatus {
    guard(|| {
        let r = handle(rec)?;
        if written.is_null() {
            return Err(fail(LprStatus::NullPointer, "written pointer is NULL"));
        }
        let img = image_arg(rgb, width, height)?;
        let probs = lift(r.model.forward(&img, Mode::Infer))?;
        let data = probs[0].data();
        *written = data.len();
        if out_len < data.len() {
            return Err(fail(
                LprStatus::BufferTooSmall,
                format!("need {} floats, got {out_len}", data.len()),
            ));
        }
        if out.is_null() {
            return Err(fail(LprStatus::NullPointer, "output buffer is NULL"));
        }
        let dst = std::slice::from_raw_parts_mut(out, data.len());
        for (d, &v) in dst.iter_mut().zip(data) {
            *d = v as f32;
        }
        Ok(())
    })
}

/// Operation counts of the loaded model.
///
/// # Safety
/// `rec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpr_flops(rec: *const LprRecognizer, out: *mut LprFlops) -> LprStatus {
    guard(|| {
        let r = handle(rec)?;
        if out.is_null() {
            return Err(fail(LprStatus::NullPointer, "output pointer is NULL"));
        }
        let c = lift(count(&r.model))?;
        *out = LprFlops {
            macs: c.macs(),
            flops: c.total(Convention::TwoPerMac),
            aux: c.aux(),
        };
        Ok(())
    })
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a string from [`lpr_recognize`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lpr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message describing the last failure on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn lpr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lpr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
