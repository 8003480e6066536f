//! C interface to modelbridge.
//!
//! Every function returns an [`MbStatus`]. On failure the message is kept per
//! thread and read back with [`mb_last_error_message`]. Models are passed
//! around as opaque handles that the caller releases with the matching
//! `*_free` function. Panics never cross the boundary; they surface as
//! `MB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use modelbridge::bridge::BridgeParams;
use modelbridge::cka::{cka_linear, RepresentationMatrix};
use modelbridge::experiment::{run_experiment, ExperimentConfig};
use modelbridge::metrics::MetricSet;
use modelbridge::model::{predict, EncoderModel, ModelCheckpoint, TaskHead};
use modelbridge::transfer::{Bridged, Positions};
use modelbridge::{Error, ErrorKind, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Training = 4,
    Io = 5,
    Panic = 6,
}

/// A pretrained encoder, with its task head when the checkpoint has one.
pub struct MbModel {
    model: EncoderModel,
    head: Option<TaskHead>,
}

/// New-modality prefix, bridge, old-modality suffix and head.
pub struct MbBridgedModel {
    teacher: EncoderModel,
    head: TaskHead,
    new_model: EncoderModel,
    bridge: BridgeParams,
    positions: Positions,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MbMetrics {
    pub balanced_accuracy: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Shape { .. } | Error::Invalid(_) | Error::Degenerate(_) | Error::LabelAccess(_) => {
                MbStatus::InvalidArgument
            }
            _ => match e.kind() {
                ErrorKind::Config => MbStatus::Config,
                ErrorKind::Io => MbStatus::Io,
                ErrorKind::Training => MbStatus::Training,
            },
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MbStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MbStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            MbStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MbStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MbStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn batch_tensor(x: &[f64], batch: usize, shape: (usize, usize)) -> Result<Tensor, Failure> {
    let want = batch * shape.0 * shape.1;
    if x.len() != want {
        return Err(invalid(format!(
            "input has {} values, expected {batch}×{}×{} = {want}",
            x.len(),
            shape.0,
            shape.1
        )));
    }
    Ok(Tensor::new(vec![batch, shape.0, shape.1], x.to_vec())?)
}

fn write_probs(probs: &Tensor, out: *mut f64, capacity: usize) -> Result<(), Failure> {
    let data = probs.data();
    if capacity < data.len() {
        return Err(invalid(format!("output buffer holds {capacity} values, need {}", data.len())));
    }
    if out.is_null() {
        return Err(null("out_probs"));
    }
    unsafe { ptr::copy_nonoverlapping(data.as_ptr(), out, data.len()) };
    Ok(())
}

/// Message for the last failed call on this thread, or null. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn mb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Linear CKA between row-major `x` [n, p] and `y` [n, q].
///
/// # Safety
/// `x` and `y` must point to `n·p` and `n·q` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_cka_linear(
    x: *const f64,
    y: *const f64,
    n: usize,
    p: usize,
    q: usize,
    out: *mut f64,
) -> MbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let x = slice_arg(x, n * p, "x")?;
        let y = slice_arg(y, n * q, "y")?;
        let rx = RepresentationMatrix::new(Tensor::new(vec![n, p], x.to_vec())?, 0, "x")?;
        let ry = RepresentationMatrix::new(Tensor::new(vec![n, q], y.to_vec())?, 0, "y")?;
        *out = cka_linear(&rx, &ry)?;
        Ok(())
    })
}

/// Balanced accuracy and F1 scores of integer predictions.
///
/// # Safety
/// `y_true` and `y_pred` must point to `n` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_metrics(
    y_true: *const u32,
    y_pred: *const u32,
    n: usize,
    classes: usize,
    out: *mut MbMetrics,
) -> MbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t: Vec<usize> = slice_arg(y_true, n, "y_true")?.iter().map(|&v| v as usize).collect();
        let p: Vec<usize> = slice_arg(y_pred, n, "y_pred")?.iter().map(|&v| v as usize).collect();
        let m = MetricSet::compute(&t, &p, classes)?;
        *out = MbMetrics {
            balanced_accuracy: m.balanced_accuracy,
            f1_macro: m.f1_macro,
            f1_weighted: m.f1_weighted,
        };
        Ok(())
    })
}

/// Loads an encoder checkpoint (for instance `seed-0/teacher.ckpt`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_model_load(path: *const c_char, out: *mut *mut MbModel) -> MbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ck = ModelCheckpoint::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(MbModel {
            model: ck.model,
            head: ck.head,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mb_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mb_model_free(model: *mut MbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input shape (tokens, channels) and layer count.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_model_info(
    model: *const MbModel,
    tokens: *mut usize,
    channels: *mut usize,
    layers: *mut usize,
) -> MbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let (t, c) = m.model.input_shape();
        *out_arg(tokens, "tokens")? = t;
        *out_arg(channels, "channels")? = c;
        *out_arg(layers, "layers")? = m.model.layer_count();
        Ok(())
    })
}

/// Class probabilities for `batch` row-major inputs of the model's input
/// shape. Writes `batch·classes` doubles into `out_probs`.
///
/// # Safety
/// `model` must be a live handle with a task head; `x` must hold `x_len`
/// doubles and `out_probs` must have room for `capacity`.
#[no_mangle]
pub unsafe extern "C" fn mb_model_predict(
    model: *const MbModel,
    x: *const f64,
    x_len: usize,
    batch: usize,
    out_probs: *mut f64,
    capacity: usize,
) -> MbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let head = m.head.as_ref().ok_or_else(|| invalid("checkpoint has no task head"))?;
        let x = batch_tensor(slice_arg(x, x_len, "x")?, batch, m.model.input_shape())?;
        write_probs(&predict(&m.model, head, &x)?, out_probs, capacity)
    })
}

/// Combines a teacher checkpoint (encoder and head) with a bridge checkpoint
/// (new-modality encoder and bridge) into one classifier.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_bridged_load(
    teacher_path: *const c_char,
    bridge_path: *const c_char,
    out: *mut *mut MbBridgedModel,
) -> MbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let teacher = ModelCheckpoint::load(Path::new(str_arg(teacher_path, "teacher_path")?))?;
        let bridged = ModelCheckpoint::load(Path::new(str_arg(bridge_path, "bridge_path")?))?;
        let head = teacher.head.ok_or_else(|| invalid("teacher checkpoint has no task head"))?;
        let rec = bridged.bridge.ok_or_else(|| invalid("bridge checkpoint has no bridge section"))?;
        let positions = Positions {
            m: rec.input_position,
            l: rec.output_position,
        };
        positions.validate(&bridged.model, &teacher.model)?;
        *out = Box::into_raw(Box::new(MbBridgedModel {
            teacher: teacher.model,
            head,
            new_model: bridged.model,
            bridge: rec.bridge,
            positions,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mb_bridged_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mb_bridged_free(model: *mut MbBridgedModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Tap positions (1-based) and trainable bridge parameter count.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_bridged_info(
    model: *const MbBridgedModel,
    input_position: *mut usize,
    output_position: *mut usize,
    bridge_params: *mut usize,
) -> MbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(input_position, "input_position")? = m.positions.m;
        *out_arg(output_position, "output_position")? = m.positions.l;
        *out_arg(bridge_params, "bridge_params")? = m.bridge.param_count();
        Ok(())
    })
}

/// Class probabilities for `batch` new-modality inputs.
///
/// # Safety
/// As for [`mb_model_predict`].
#[no_mangle]
pub unsafe extern "C" fn mb_bridged_predict(
    model: *const MbBridgedModel,
    x: *const f64,
    x_len: usize,
    batch: usize,
    out_probs: *mut f64,
    capacity: usize,
) -> MbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = batch_tensor(slice_arg(x, x_len, "x")?, batch, m.new_model.input_shape())?;
        let probs = Bridged {
            new_model: &m.new_model,
            teacher: &m.teacher,
            head: &m.head,
            bridge: &m.bridge,
            positions: m.positions,
        }
        .predict(&x)?;
        write_probs(&probs, out_probs, capacity)
    })
}

/// Runs the full synthetic experiment and returns the JSON report. A null
/// `config_toml` selects the default config. Free the result with
/// [`mb_string_free`].
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_run_experiment(config_toml: *const c_char, out_json: *mut *mut c_char) -> MbStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let cfg = if config_toml.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::from_toml(str_arg(config_toml, "config_toml")?)?
        };
        cfg.validate()?;
        let output = run_experiment(&cfg)?;
        if let Some(e) = output.first_error {
            return Err(e.into());
        }
        *out = CString::new(output.report.to_json())
            .map_err(|_| invalid("report contains NUL"))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
