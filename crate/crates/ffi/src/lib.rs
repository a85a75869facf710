//! C ABI over `lgatt`: attention masks, checkpoint inference and metrics.
//!
//! Objects are opaque handles created by `*_new` / `*_load` and released with
//! the matching `*_free`. Every fallible call returns an [`LgattStatus`]; on
//! failure, [`lgatt_last_error`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lgatt::data::{pad_record, VideoRecord};
use lgatt::masks::{AttentionMask, MaskSpec};
use lgatt::metrics::{self, Prediction};
use lgatt::{checkpoint, Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgattStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    Metric = 6,
    Panic = 7,
}

/// An attention mask over `size` frames.
pub struct LgattMask(AttentionMask);

/// A loaded model checkpoint.
pub struct LgattModel(lgatt::encoder::Model);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LgattModelInfo {
    pub max_frames: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub num_classes: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LgattEvalReport {
    pub gap: f64,
    pub map: f64,
    pub perr: f64,
    pub hit1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LgattStatus {
    match e {
        Error::Shape { .. } | Error::OutOfRange { .. } => LgattStatus::Shape,
        Error::Format { .. } | Error::Json(_) | Error::Record { .. } => LgattStatus::Format,
        Error::Io(_) => LgattStatus::Io,
        Error::Metric(_) => LgattStatus::Metric,
        _ => LgattStatus::InvalidArgument,
    }
}

struct Failure(LgattStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: LgattStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LgattStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LgattStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LgattStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(LgattStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LgattStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lgatt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a mask from `spec` (`bd:W`, `tp:W`, `td:W:L` or `full`) over `size`
/// frames.
///
/// # Safety
/// `spec` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lgatt_mask_new(spec: *const c_char, size: usize, out: *mut *mut LgattMask) -> LgattStatus {
    guard(|| {
        non_null(out, "out")?;
        let spec: MaskSpec = c_str(spec, "spec")?.parse()?;
        if size == 0 {
            return Err(fail(LgattStatus::InvalidArgument, "size must be >= 1"));
        }
        let mask = spec.build(size)?;
        *out = Box::into_raw(Box::new(LgattMask(mask)));
        Ok(())
    })
}

/// Frame count of `mask`, or 0 for NULL.
///
/// # Safety
/// `mask` must be NULL or a live handle from [`lgatt_mask_new`].
#[no_mangle]
pub unsafe extern "C" fn lgatt_mask_size(mask: *const LgattMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.size())
}

/// Writes whether query frame `i` may attend to key frame `j`.
///
/// # Safety
/// `mask` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lgatt_mask_keeps(mask: *const LgattMask, i: usize, j: usize, out: *mut bool) -> LgattStatus {
    guard(|| {
        non_null(mask, "mask")?;
        non_null(out, "out")?;
        let m = &(*mask).0;
        if i >= m.size() || j >= m.size() {
            return Err(fail(
                LgattStatus::Shape,
                format!("({i}, {j}) outside a {0}x{0} mask", m.size()),
            ));
        }
        *out = m.keeps(i, j);
        Ok(())
    })
}

/// Copies the row-major keep matrix (1 keep, 0 forbid) into `buf`, which
/// must hold `size * size` bytes.
///
/// # Safety
/// `mask` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lgatt_mask_copy(mask: *const LgattMask, buf: *mut u8, len: usize) -> LgattStatus {
    guard(|| {
        non_null(mask, "mask")?;
        non_null(buf, "buf")?;
        let m = &(*mask).0;
        let n = m.size();
        if len != n * n {
            return Err(fail(LgattStatus::Shape, format!("buffer holds {len} bytes, mask needs {}", n * n)));
        }
        let out = std::slice::from_raw_parts_mut(buf, len);
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = u8::from(m.keeps(i, j));
            }
        }
        Ok(())
    })
}

/// # Safety
/// `mask` must be NULL or a handle from [`lgatt_mask_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lgatt_mask_free(mask: *mut LgattMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Loads a checkpoint written by `lgatt train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lgatt_model_load(path: *const c_char, out: *mut *mut LgattModel) -> LgattStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = c_str(path, "path")?;
        let model = checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(LgattModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lgatt_model_info(model: *const LgattModel, out: *mut LgattModelInfo) -> LgattStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let c = &(*model).0.config;
        *out = LgattModelInfo {
            max_frames: c.max_frames,
            visual_dim: c.visual_dim,
            audio_dim: c.audio_dim,
            num_classes: c.num_classes,
        };
        Ok(())
    })
}

/// Class probabilities for one video of `frames` frames. `visual` holds
/// `frames * visual_dim` and `audio` `frames * audio_dim` row-major values;
/// videos longer than the model's `max_frames` are truncated. `scores` must
/// hold `num_classes` values.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lgatt_model_predict(
    model: *const LgattModel,
    visual: *const f32,
    audio: *const f32,
    frames: usize,
    scores: *mut f64,
    num_classes: usize,
) -> LgattStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(visual, "visual")?;
        non_null(audio, "audio")?;
        non_null(scores, "scores")?;
        let m = &(*model).0;
        let c = &m.config;
        if num_classes != c.num_classes {
            return Err(fail(
                LgattStatus::Shape,
                format!("scores holds {num_classes} values, model has {} classes", c.num_classes),
            ));
        }
        if frames == 0 {
            return Err(fail(LgattStatus::Shape, "frames must be >= 1"));
        }
        let read = |p: *const f32, d: usize| -> Result<Tensor, Failure> {
            let s = std::slice::from_raw_parts(p, frames * d);
            Ok(Tensor::new(vec![frames, d], s.iter().map(|&v| v as f64).collect())?)
        };
        let record = VideoRecord {
            id: String::new(),
            visual: read(visual, c.visual_dim)?,
            audio: read(audio, c.audio_dim)?,
            labels: Default::default(),
        };
        let probs = m.predict(&pad_record(&record, c.max_frames))?;
        std::slice::from_raw_parts_mut(scores, num_classes).copy_from_slice(&probs);
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`lgatt_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lgatt_model_free(model: *mut LgattModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// GAP (top 20), MAP, PERR and Hit@1 of `num_videos x num_classes` row-major
/// `scores` in `[0, 1]`. Labels are in CSR form: the classes of video `v` are
/// `labels[label_offsets[v] .. label_offsets[v + 1]]`.
///
/// # Safety
/// `scores` must hold `num_videos * num_classes` values, `label_offsets`
/// `num_videos + 1` values, and `labels` `label_offsets[num_videos]` values.
#[no_mangle]
pub unsafe extern "C" fn lgatt_evaluate(
    scores: *const f64,
    num_videos: usize,
    num_classes: usize,
    label_offsets: *const usize,
    labels: *const usize,
    out: *mut LgattEvalReport,
) -> LgattStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(label_offsets, "label_offsets")?;
        non_null(out, "out")?;
        let offsets = std::slice::from_raw_parts(label_offsets, num_videos + 1);
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(fail(LgattStatus::InvalidArgument, "label_offsets must start at 0 and not decrease"));
        }
        let total = offsets[num_videos];
        if total > 0 {
            non_null(labels, "labels")?;
        }
        let labels: &[usize] = if total == 0 { &[] } else { std::slice::from_raw_parts(labels, total) };
        let scores = std::slice::from_raw_parts(scores, num_videos * num_classes);
        let preds: Vec<Prediction> = (0..num_videos)
            .map(|v| {
                Prediction::new(
                    scores[v * num_classes..(v + 1) * num_classes].to_vec(),
                    labels[offsets[v]..offsets[v + 1]].iter().copied(),
                )
            })
            .collect();
        let r = metrics::evaluate(&preds)?;
        *out = LgattEvalReport {
            gap: r.gap,
            map: r.map,
            perr: r.perr,
            hit1: r.hit1,
        };
        Ok(())
    })
}
