//! C interface to `ecgsyn`: load or generate datasets, sample from trained
//! generator checkpoints and compute the MMD between two datasets.
//!
//! Every function returns an [`EcgsynStatus`]. On failure the message is kept
//! per thread and can be read with [`ecgsyn_last_error`]. Handles are opaque
//! and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ecgsyn::record::store::{load_dataset, save_dataset};
use ecgsyn::record::{generate_fixture_dataset, Dataset, FixtureSpec, RhythmClass};
use ecgsyn::synth::{sample_dataset, Generator};
use ecgsyn::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcgsynStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad argument, configuration or input data.
    Invalid = 3,
    Io = 4,
    /// Malformed file contents, checkpoint version or checksum.
    Format = 5,
    Numeric = 6,
    IndexOutOfRange = 7,
    BufferTooSmall = 8,
    Runtime = 9,
    Panic = 10,
}

/// Opaque dataset handle.
pub struct EcgsynDataset(Dataset);

/// Opaque generator handle.
pub struct EcgsynGenerator(Box<dyn Generator>);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> EcgsynStatus {
    match e {
        Error::Io { .. } => EcgsynStatus::Io,
        Error::Parse { .. }
        | Error::UnsupportedFormat(_)
        | Error::TruncatedData { .. }
        | Error::Version(_)
        | Error::Checksum(_) => EcgsynStatus::Format,
        Error::Numeric(_) => EcgsynStatus::Numeric,
        Error::Index { .. } => EcgsynStatus::IndexOutOfRange,
        e if e.is_validation() => EcgsynStatus::Invalid,
        Error::Range { .. } | Error::Shape { .. } | Error::Pad { .. } | Error::Hop { .. } => EcgsynStatus::Invalid,
        _ => EcgsynStatus::Runtime,
    }
}

fn fail(status: EcgsynStatus, msg: impl Into<String>) -> EcgsynStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), EcgsynStatus>) -> EcgsynStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EcgsynStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(EcgsynStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn lift<T>(r: ecgsyn::Result<T>) -> Result<T, EcgsynStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, EcgsynStatus> {
    if p.is_null() {
        return Err(fail(EcgsynStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EcgsynStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, EcgsynStatus> {
    p.as_ref().ok_or_else(|| fail(EcgsynStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, EcgsynStatus> {
    p.as_mut().ok_or_else(|| fail(EcgsynStatus::NullPointer, format!("{what} is null")))
}

/// Copies `s` plus a NUL into `buf`. `needed` receives the full size.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), EcgsynStatus> {
    if !needed.is_null() {
        *needed = s.len() + 1;
    }
    if cap < s.len() + 1 {
        return Err(fail(EcgsynStatus::BufferTooSmall, format!("need {} bytes, buffer holds {cap}", s.len() + 1)));
    }
    if buf.is_null() {
        return Err(fail(EcgsynStatus::NullPointer, "buffer is null"));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ecgsyn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message of the calling thread into `buf`.
/// `needed` (may be null) receives the size including the NUL.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `needed` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> EcgsynStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(&msg, buf, cap, needed) {
        Ok(()) => EcgsynStatus::Ok,
        Err(s) => s,
    }
}

/// Generates a fixture dataset. `classes` is a comma-separated list of class
/// codes, or null for all seven.
///
/// # Safety
/// `classes` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_fixture(
    classes: *const c_char,
    per_class: usize,
    fs: f64,
    seconds: f64,
    leads: usize,
    seed: u64,
    out: *mut *mut EcgsynDataset,
) -> EcgsynStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let classes = if classes.is_null() {
            RhythmClass::ALL.to_vec()
        } else {
            lift(RhythmClass::parse_list(str_arg(classes, "classes")?))?
        };
        let ds = lift(generate_fixture_dataset(&FixtureSpec {
            classes,
            per_class,
            fs,
            seconds,
            leads,
            seed,
        }))?;
        *out = Box::into_raw(Box::new(EcgsynDataset(ds)));
        Ok(())
    })
}

/// Loads a dataset directory (WFDB records plus `labels.csv`).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_dataset_load(dir: *const c_char, out: *mut *mut EcgsynDataset) -> EcgsynStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = lift(load_dataset(Path::new(str_arg(dir, "dir")?)))?;
        *out = Box::into_raw(Box::new(EcgsynDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_dataset_save(ds: *const EcgsynDataset, dir: *const c_char) -> EcgsynStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        lift(save_dataset(&ds.0, Path::new(str_arg(dir, "dir")?))).map(|_| ())
    })
}

/// Number of records, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_dataset_len(ds: *const EcgsynDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Shape and class of record `index`. `class_id` follows the order
/// SBRAD, SR, AFIB, STACH, AFLT, SARRH, SVTAC.
///
/// # Safety
/// `ds` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_dataset_record_info(
    ds: *const EcgsynDataset,
    index: usize,
    leads: *mut usize,
    samples: *mut usize,
    class_id: *mut u32,
    fs: *mut f64,
) -> EcgsynStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let r = ds
            .0
            .records()
            .get(index)
            .ok_or_else(|| fail(EcgsynStatus::IndexOutOfRange, format!("record {index} of {}", ds.0.len())))?;
        *out_arg(leads, "leads")? = r.signal.leads();
        *out_arg(samples, "samples")? = r.signal.samples();
        *out_arg(class_id, "class_id")? = r.label.id() as u32;
        *out_arg(fs, "fs")? = r.fs;
        Ok(())
    })
}

/// Copies the signal of record `index`, lead-major, into `buf`.
///
/// # Safety
/// `buf` must be valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_dataset_signal(ds: *const EcgsynDataset, index: usize, buf: *mut f64, cap: usize) -> EcgsynStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let r = ds
            .0
            .records()
            .get(index)
            .ok_or_else(|| fail(EcgsynStatus::IndexOutOfRange, format!("record {index} of {}", ds.0.len())))?;
        let data = r.signal.as_slice();
        if cap < data.len() {
            return Err(fail(EcgsynStatus::BufferTooSmall, format!("need {} values, buffer holds {cap}", data.len())));
        }
        if buf.is_null() {
            return Err(fail(EcgsynStatus::NullPointer, "buffer is null"));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_dataset_free(ds: *mut EcgsynDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a generator checkpoint of any family.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_generator_load(path: *const c_char, out: *mut *mut EcgsynGenerator) -> EcgsynStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let g = lift(ecgsyn::generators::load_generator(Path::new(str_arg(path, "path")?)))?;
        *out = Box::into_raw(Box::new(EcgsynGenerator(g)));
        Ok(())
    })
}

/// Copies the generator name into `buf`.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `needed` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_generator_name(
    g: *const EcgsynGenerator,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> EcgsynStatus {
    guard(|| {
        let g = ref_arg(g, "generator")?;
        write_str(g.0.name(), buf, cap, needed)
    })
}

/// Draws `per_class` records of each class in `classes` (comma-separated
/// codes, null for all seven) into a new dataset.
///
/// # Safety
/// `g` must come from this library; `classes` must be null or a
/// NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_generator_sample(
    g: *const EcgsynGenerator,
    classes: *const c_char,
    per_class: usize,
    fs: f64,
    seed: u64,
    out: *mut *mut EcgsynDataset,
) -> EcgsynStatus {
    guard(|| {
        let g = ref_arg(g, "generator")?;
        let out = out_arg(out, "out")?;
        let classes = if classes.is_null() {
            RhythmClass::ALL.to_vec()
        } else {
            lift(RhythmClass::parse_list(str_arg(classes, "classes")?))?
        };
        let counts: BTreeMap<RhythmClass, usize> = classes.into_iter().map(|c| (c, per_class)).collect();
        let ds = lift(sample_dataset(g.0.as_ref(), &counts, fs, seed))?;
        *out = Box::into_raw(Box::new(EcgsynDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `g` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_generator_free(g: *mut EcgsynGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Unbiased squared MMD with an RBF kernel. A `bandwidth` of 0 or less uses
/// the median pairwise distance; the width used is written to
/// `bandwidth_used` when that is not null.
///
/// # Safety
/// `x` and `y` must come from this library; `value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ecgsyn_mmd(
    x: *const EcgsynDataset,
    y: *const EcgsynDataset,
    bandwidth: f64,
    value: *mut f64,
    bandwidth_used: *mut f64,
) -> EcgsynStatus {
    guard(|| {
        let (x, y) = (ref_arg(x, "x")?, ref_arg(y, "y")?);
        let value = out_arg(value, "value")?;
        let bw = (bandwidth > 0.0).then_some(bandwidth);
        let r = lift(ecgsyn::similarity::mmd_rbf(&x.0, &y.0, bw))?;
        *value = r.value;
        if let Some(b) = bandwidth_used.as_mut() {
            *b = r.bandwidth;
        }
        Ok(())
    })
}
