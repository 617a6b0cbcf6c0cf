//! C interface to `tomoseg`.
//!
//! Conventions:
//!
//! * Every fallible function returns a [`TsStatus`]; outputs go through
//!   pointer arguments that are written only on success.
//! * Objects are opaque handles created by `ts_*_new`/`ts_*_load`-style
//!   functions and released with the matching `ts_*_free`. Passing NULL to
//!   a free function is a no-op.
//! * On failure, [`ts_last_error_message`] describes the error. The message
//!   is per-thread and lives until the next failing call on that thread.
//! * Panics never cross the boundary; they surface as `TS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tomoseg::checkpoint::Checkpoint;
use tomoseg::evalkit::evaluate_volumes;
use tomoseg::phantom::{generate_phantom, Drift, DriftKind, PhantomSpec};
use tomoseg::pseudolabel::{generate_pseudolabels, ClusterMethod, PseudoLabelConfig};
use tomoseg::segnet::{segment_volume, Model};
use tomoseg::volume::{
    load_labels, load_volume, normalize, save_labels, LabelVolume, NormalizeMode, Volume, VolumeFormat,
};
use tomoseg::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Clustering = 6,
    Config = 7,
    Checkpoint = 8,
    NonFinite = 9,
    Training = 10,
    Panic = 11,
}

/// Grayscale volume, normalized or raw.
pub struct TsVolume(Volume);
/// Per-voxel class labels.
pub struct TsLabels(LabelVolume);
/// Trained network ready for inference.
pub struct TsModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TsStatus {
    match e {
        Error::Io { .. } => TsStatus::Io,
        Error::Image { .. } | Error::Format(_) => TsStatus::Format,
        Error::Shape(_) => TsStatus::Shape,
        Error::NonFinite { .. } | Error::NonFiniteLoss => TsStatus::NonFinite,
        Error::InvalidArgument(_) => TsStatus::InvalidArgument,
        Error::Clustering(_) => TsStatus::Clustering,
        Error::Config(_) => TsStatus::Config,
        Error::Checkpoint(_) => TsStatus::Checkpoint,
        Error::Diverged { .. } => TsStatus::Training,
    }
}

struct Fail(TsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TsStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `body`, converting errors and panics into a status plus message.
fn guard(body: impl FnOnce() -> Result<(), Fail>) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => TsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            TsStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TsStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" if none).
#[no_mangle]
pub extern "C" fn ts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Copies `depth*height*width` floats (z-major, then rows) into a new volume.
///
/// # Safety
/// `data` must point to that many readable floats; `out_volume` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_from_data(
    depth: usize,
    height: usize,
    width: usize,
    data: *const f32,
    out_volume: *mut *mut TsVolume,
) -> TsStatus {
    guard(|| {
        let out_volume = out(out_volume, "out_volume")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let n = depth
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Fail(TsStatus::InvalidArgument, "volume size overflows".into()))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        *out_volume = boxed(TsVolume(Volume::new((depth, height, width), values, None)?));
        Ok(())
    })
}

/// Loads a slice directory or a raw volume with its TOML sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_volume` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_load(path: *const c_char, out_volume: *mut *mut TsVolume) -> TsStatus {
    guard(|| {
        let out_volume = out(out_volume, "out_volume")?;
        let path = path_arg(path)?;
        *out_volume = boxed(TsVolume(load_volume(&path, VolumeFormat::Auto)?));
        Ok(())
    })
}

/// Percentile min-max normalization to [0, 1]; returns a new volume.
///
/// # Safety
/// `volume` must be a live handle; `out_volume` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_normalize(
    volume: *const TsVolume,
    p_lo: f64,
    p_hi: f64,
    out_volume: *mut *mut TsVolume,
) -> TsStatus {
    guard(|| {
        let v = obj(volume, "volume")?;
        let out_volume = out(out_volume, "out_volume")?;
        *out_volume = boxed(TsVolume(normalize(&v.0, NormalizeMode::Percentile { p_lo, p_hi })?));
        Ok(())
    })
}

/// # Safety
/// `volume` must be a live handle; the three outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_shape(
    volume: *const TsVolume,
    depth: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> TsStatus {
    guard(|| {
        let (d, h, w) = obj(volume, "volume")?.0.shape();
        *out(depth, "depth")? = d;
        *out(height, "height")? = h;
        *out(width, "width")? = w;
        Ok(())
    })
}

/// Copies the voxel values into `buffer`, which must hold `len` floats with
/// `len` equal to the voxel count.
///
/// # Safety
/// `volume` must be a live handle and `buffer` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_copy_data(volume: *const TsVolume, buffer: *mut f32, len: usize) -> TsStatus {
    guard(|| {
        let data = obj(volume, "volume")?.0.data();
        if buffer.is_null() {
            return Err(null("buffer"));
        }
        if len != data.len() {
            return Err(Fail(
                TsStatus::Shape,
                format!("buffer holds {len} values, volume has {}", data.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buffer, len);
        Ok(())
    })
}

/// # Safety
/// `volume` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_free(volume: *mut TsVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Default three-phase phantom (background, matrix, blobs) with Gaussian
/// noise `noise_sigma` and a linear multiplicative drift of `drift_amplitude`
/// along a ramp rotated 30° from the column axis.
///
/// # Safety
/// Both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_phantom_three_phase(
    depth: usize,
    height: usize,
    width: usize,
    seed: u64,
    noise_sigma: f64,
    drift_amplitude: f64,
    out_volume: *mut *mut TsVolume,
    out_ground_truth: *mut *mut TsLabels,
) -> TsStatus {
    guard(|| {
        let out_volume = out(out_volume, "out_volume")?;
        let out_gt = out(out_ground_truth, "out_ground_truth")?;
        let mut spec = PhantomSpec::three_phase([depth, height, width], seed);
        spec.noise_sigma = noise_sigma;
        if drift_amplitude != 0.0 {
            spec.drift = Drift {
                kind: DriftKind::Linear,
                amplitude: drift_amplitude,
                angle_deg: 30.0,
            };
        }
        let p = generate_phantom(&spec)?;
        *out_volume = boxed(TsVolume(p.volume));
        *out_gt = boxed(TsLabels(p.ground_truth));
        Ok(())
    })
}

/// Clustering method selector for [`ts_pseudolabel`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsClusterMethod {
    Kmeans = 0,
    MultiOtsu = 1,
    Gmm = 2,
}

/// Clusters voxel intensities into `k` pseudo-label classes.
///
/// # Safety
/// `volume` must be a live handle; `out_labels` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_pseudolabel(
    volume: *const TsVolume,
    method: TsClusterMethod,
    k: usize,
    seed: u64,
    out_labels: *mut *mut TsLabels,
) -> TsStatus {
    guard(|| {
        let v = obj(volume, "volume")?;
        let out_labels = out(out_labels, "out_labels")?;
        let method = match method {
            TsClusterMethod::Kmeans => ClusterMethod::Kmeans,
            TsClusterMethod::MultiOtsu => ClusterMethod::MultiOtsu,
            TsClusterMethod::Gmm => ClusterMethod::Gmm,
        };
        let cfg = PseudoLabelConfig {
            method,
            k,
            seed,
            ..Default::default()
        };
        let (labels, _) = generate_pseudolabels(&v.0, &cfg)?;
        *out_labels = boxed(TsLabels(labels));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_labels` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_labels_load(path: *const c_char, out_labels: *mut *mut TsLabels) -> TsStatus {
    guard(|| {
        let out_labels = out(out_labels, "out_labels")?;
        *out_labels = boxed(TsLabels(load_labels(&path_arg(path)?)?));
        Ok(())
    })
}

/// Writes a raw label file plus its TOML sidecar.
///
/// # Safety
/// `labels` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ts_labels_save(labels: *const TsLabels, path: *const c_char) -> TsStatus {
    guard(|| {
        let l = obj(labels, "labels")?;
        save_labels(&l.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `labels` must be a live handle; all outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_labels_shape(
    labels: *const TsLabels,
    depth: *mut usize,
    height: *mut usize,
    width: *mut usize,
    num_classes: *mut usize,
) -> TsStatus {
    guard(|| {
        let l = &obj(labels, "labels")?.0;
        let (d, h, w) = l.shape();
        *out(depth, "depth")? = d;
        *out(height, "height")? = h;
        *out(width, "width")? = w;
        *out(num_classes, "num_classes")? = l.num_classes();
        Ok(())
    })
}

/// Copies the labels into `buffer`; `len` must equal the voxel count.
///
/// # Safety
/// `labels` must be a live handle and `buffer` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_labels_copy_data(labels: *const TsLabels, buffer: *mut u8, len: usize) -> TsStatus {
    guard(|| {
        let data = obj(labels, "labels")?.0.labels();
        if buffer.is_null() {
            return Err(null("buffer"));
        }
        if len != data.len() {
            return Err(Fail(
                TsStatus::Shape,
                format!("buffer holds {len} labels, volume has {}", data.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buffer, len);
        Ok(())
    })
}

/// # Safety
/// `labels` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ts_labels_free(labels: *mut TsLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// Pixel accuracy and mIoU of `prediction` against `ground_truth`, skipping
/// the `ignore_len` ground-truth classes in `ignore` (which may be NULL when
/// `ignore_len` is 0).
///
/// # Safety
/// Handles must be live, `ignore` readable for `ignore_len` bytes, outputs writable.
#[no_mangle]
pub unsafe extern "C" fn ts_evaluate(
    prediction: *const TsLabels,
    ground_truth: *const TsLabels,
    ignore: *const u8,
    ignore_len: usize,
    out_accuracy: *mut f64,
    out_miou: *mut f64,
) -> TsStatus {
    guard(|| {
        let p = obj(prediction, "prediction")?;
        let g = obj(ground_truth, "ground_truth")?;
        let ignore: &[u8] = if ignore_len == 0 {
            &[]
        } else if ignore.is_null() {
            return Err(null("ignore"));
        } else {
            std::slice::from_raw_parts(ignore, ignore_len)
        };
        let acc = out(out_accuracy, "out_accuracy")?;
        let miou = out(out_miou, "out_miou")?;
        let r = evaluate_volumes(&p.0, &g.0, ignore)?;
        *acc = r.pixel_accuracy;
        *miou = r.miou;
        Ok(())
    })
}

/// Loads the deployable network (the teacher when present) from a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_model_load(path: *const c_char, out_model: *mut *mut TsModel) -> TsStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        let ck = Checkpoint::load(&path_arg(path)?)?;
        *out_model = boxed(TsModel(ck.deployed()?));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_model_param_count(model: *const TsModel, out_count: *mut usize) -> TsStatus {
    guard(|| {
        let m = obj(model, "model")?;
        *out(out_count, "out_count")? = m.0.params.len();
        Ok(())
    })
}

/// Segments every slice of a normalized volume.
///
/// # Safety
/// Handles must be live; `out_labels` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_model_segment(
    model: *const TsModel,
    volume: *const TsVolume,
    out_labels: *mut *mut TsLabels,
) -> TsStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let v = obj(volume, "volume")?;
        let out_labels = out(out_labels, "out_labels")?;
        *out_labels = boxed(TsLabels(segment_volume(&m.0, &v.0)?));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ts_model_free(model: *mut TsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
