//! C ABI over the decoding engine.
//!
//! Models are opaque handles created by `bd_model_load` and released with
//! `bd_model_free`. Every fallible call returns a `BdStatus`; the message of
//! the most recent failure on the calling thread is available through
//! `bd_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bidecoder::model::Model;
use bidecoder::schedule::{build_permutation, GenerationOrder, ScheduleSpec};
use bidecoder::search::{decode_sources, BeamConfig};
use bidecoder::Error;

/// Opaque model handle.
pub struct BdModel {
    inner: Model,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    /// Malformed input tokens or schedule.
    Data = 5,
    /// Non-finite values during computation.
    Numeric = 6,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdOrder {
    LeftToRight = 0,
    Bidirectional = 1,
    MultiDirectional = 2,
    MiddleToSide = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BdModelInfo {
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub order: BdOrder,
    /// Number of generation directions.
    pub directions: usize,
    /// Tokens per direction per step.
    pub per_direction: usize,
    /// Tokens produced per decoding step.
    pub step_width: usize,
    pub max_len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BdDecodeOptions {
    pub beam: usize,
    /// Maximum generated slots.
    pub max_len: usize,
    /// Remove repeated n-grams up to this order; 0 disables.
    pub dedup_n: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
    });
}

fn fail(status: BdStatus, msg: &str) -> BdStatus {
    set_error(msg);
    status
}

fn status_of(err: &Error) -> BdStatus {
    match err {
        Error::Io(_) => BdStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => BdStatus::Checkpoint,
        e if e.is_numeric() => BdStatus::Numeric,
        _ => BdStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> BdStatus) -> BdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(BdStatus::Panic, "internal panic"),
    }
}

fn order_to_c(order: GenerationOrder) -> BdOrder {
    match order {
        GenerationOrder::L2r => BdOrder::LeftToRight,
        GenerationOrder::Bd => BdOrder::Bidirectional,
        GenerationOrder::Md => BdOrder::MultiDirectional,
        GenerationOrder::MiddleToSide => BdOrder::MiddleToSide,
    }
}

/// Copies `values` into a caller buffer, reporting the needed length.
///
/// # Safety
/// `out` must hold `capacity` elements and `out_len` must be writable.
unsafe fn write_out<T: Copy>(values: &[T], out: *mut T, capacity: usize, out_len: *mut usize) -> BdStatus {
    *out_len = values.len();
    if values.len() > capacity {
        return fail(BdStatus::BufferTooSmall, &format!("need room for {} values", values.len()));
    }
    if !values.is_empty() {
        if out.is_null() {
            return fail(BdStatus::NullPointer, "output buffer is null");
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    BdStatus::Ok
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bd_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = e.len().min(capacity - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Loads a checkpoint. On success `*out` holds a handle that must be passed
/// to `bd_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bd_model_load(path: *const c_char, out: *mut *mut BdModel) -> BdStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(BdStatus::NullPointer, "path and out must not be null");
        }
        *out = ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(BdStatus::InvalidArgument, "path is not valid UTF-8");
        };
        match Model::load(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(BdModel { inner }));
                BdStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `bd_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bd_model_free(model: *mut BdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn bd_model_info(model: *const BdModel, info: *mut BdModelInfo) -> BdStatus {
    if model.is_null() || info.is_null() {
        return fail(BdStatus::NullPointer, "model and info must not be null");
    }
    let m = &(*model).inner;
    let spec = m.schedule();
    *info = BdModelInfo {
        vocab_src: m.config().vocab_src,
        vocab_tgt: m.config().vocab_tgt,
        order: order_to_c(spec.order),
        directions: spec.h,
        per_direction: spec.c,
        step_width: spec.step_width(),
        max_len: m.config().max_len,
    };
    BdStatus::Ok
}

/// Beam-decodes one source sentence into `out` (natural order, no EOS).
/// `steps` may be null; otherwise it receives the number of decoding steps.
/// When `out_capacity` is too small, `BufferTooSmall` is returned and
/// `*out_len` holds the required length.
///
/// # Safety
/// `src` must hold `src_len` tokens, `out` must hold `out_capacity` tokens,
/// and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bd_decode(
    model: *const BdModel,
    src: *const u32,
    src_len: usize,
    options: BdDecodeOptions,
    out: *mut u32,
    out_capacity: usize,
    out_len: *mut usize,
    steps: *mut usize,
) -> BdStatus {
    guard(|| {
        if model.is_null() || src.is_null() || out_len.is_null() {
            return fail(BdStatus::NullPointer, "model, src and out_len must not be null");
        }
        if src_len == 0 || options.beam == 0 || options.max_len == 0 {
            return fail(BdStatus::InvalidArgument, "source, beam and max_len must be nonempty");
        }
        let model = &(*model).inner;
        let source = std::slice::from_raw_parts(src, src_len).to_vec();
        let cfg = BeamConfig {
            dedup: (options.dedup_n > 0).then_some(options.dedup_n),
            ..BeamConfig::new(options.beam, options.max_len)
        };
        let result = match decode_sources(model, &[source], &cfg, 1) {
            Ok(mut r) => r.remove(0),
            Err(e) => return fail(status_of(&e), &e.to_string()),
        };
        if !steps.is_null() {
            *steps = result.steps;
        }
        write_out(&result.output, out, out_capacity, out_len)
    })
}

fn spec_for(order: BdOrder, directions: usize, per_direction: usize) -> ScheduleSpec {
    let c = per_direction;
    match order {
        BdOrder::LeftToRight => ScheduleSpec::semi_autoregressive(c),
        BdOrder::Bidirectional => ScheduleSpec::bidirectional_sa(c),
        BdOrder::MultiDirectional => ScheduleSpec { c, ..ScheduleSpec::multi_directional(directions) },
        BdOrder::MiddleToSide => ScheduleSpec { c, ..ScheduleSpec::middle_to_side() },
    }
}

/// Natural-order position (1-based) of every schedule slot for a length-`n`
/// target; 0 marks a padding slot. `directions` is only read for the
/// multi-directional order.
///
/// # Safety
/// `out` must hold `out_capacity` values and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_order(
    order: BdOrder,
    directions: usize,
    per_direction: usize,
    n: usize,
    out: *mut usize,
    out_capacity: usize,
    out_len: *mut usize,
) -> BdStatus {
    guard(|| {
        if out_len.is_null() {
            return fail(BdStatus::NullPointer, "out_len must not be null");
        }
        if per_direction == 0 {
            return fail(BdStatus::InvalidArgument, "per_direction must be positive");
        }
        let spec = spec_for(order, directions, per_direction);
        if let Err(e) = spec.validate() {
            return fail(BdStatus::InvalidArgument, &e.to_string());
        }
        match build_permutation(n, &spec) {
            Ok(p) => {
                let slots: Vec<usize> = p.forward.iter().map(|s| s.map_or(0, |i| i + 1)).collect();
                write_out(&slots, out, out_capacity, out_len)
            }
            Err(e) => fail(BdStatus::InvalidArgument, &e.to_string()),
        }
    })
}

/// Number of decoding steps (start block excluded, EOS step included) that
/// the schedule needs to emit a length-`n` output.
///
/// # Safety
/// `steps` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_steps(
    order: BdOrder,
    directions: usize,
    per_direction: usize,
    n: usize,
    steps: *mut usize,
) -> BdStatus {
    guard(|| {
        if steps.is_null() {
            return fail(BdStatus::NullPointer, "steps must not be null");
        }
        if per_direction == 0 || n == 0 {
            return fail(BdStatus::InvalidArgument, "per_direction and n must be positive");
        }
        let spec = spec_for(order, directions, per_direction);
        if let Err(e) = spec.validate() {
            return fail(BdStatus::InvalidArgument, &e.to_string());
        }
        match spec.streams(n) {
            Ok(streams) => {
                // Decoding stops in the step where the shortest stream emits EOS.
                let shortest = streams.iter().map(Vec::len).min().unwrap_or(0);
                *steps = shortest / per_direction + 1;
                BdStatus::Ok
            }
            Err(e) => fail(BdStatus::InvalidArgument, &e.to_string()),
        }
    })
}
