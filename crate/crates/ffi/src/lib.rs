//! C ABI for the calibration toolkit.
//!
//! Objects cross the boundary as opaque handles created and freed by this
//! library. Fallible functions return a [`VicalStatus`]; on failure
//! [`vical_last_error`] describes the error of the calling thread. Pointers
//! passed in must be valid for the duration of the call; null handles are
//! reported as [`VicalStatus::InvalidArgument`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vical::calib::{calibrate_cameras, calibrate_imu, CalibError, CalibResult};
use vical::config::SessionConfig;
use vical::session::{run_simulated, DriverOptions, SessionPlan};
use vical::sim::{Dataset, RigSpec};

/// Result of a fallible call. Values match the CLI exit codes where both exist.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VicalStatus {
    Ok = 0,
    InvalidArgument = 1,
    /// The data cannot constrain the calibration.
    Unobservable = 2,
    /// A file could not be read, written or parsed.
    Io = 3,
    /// Estimation failed or the session aborted.
    Failed = 4,
    /// The result does not hold the requested quantity.
    Unavailable = 5,
    /// Internal error; the library caught a panic.
    Panic = 6,
}

/// Session configuration.
pub struct VicalConfig(SessionConfig);

/// Recorded camera detections and IMU samples.
pub struct VicalDataset(Dataset);

/// Calibration result of one stage.
pub struct VicalResult(CalibResult);

/// Number of intrinsic parameters written by [`vical_result_intrinsics`].
pub const VICAL_INTRINSICS_LEN: usize = 8;
/// Number of values written for a pose: `tx ty tz qx qy qz qw`.
pub const VICAL_POSE_LEN: usize = 7;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

struct Failure(VicalStatus, String);

impl Failure {
    fn arg(msg: &str) -> Self {
        Self(VicalStatus::InvalidArgument, msg.into())
    }
}

impl From<CalibError> for Failure {
    fn from(e: CalibError) -> Self {
        let code = if e.is_unobservable() { VicalStatus::Unobservable } else { VicalStatus::Failed };
        Self(code, e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VicalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VicalStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal error");
            VicalStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::arg("path is null"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure::arg("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::arg(&format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::arg("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write_slice(out: *mut f64, values: &[f64]) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::arg("output buffer is null"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vical_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vical_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vical_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration. Free with [`vical_config_free`].
#[no_mangle]
pub extern "C" fn vical_config_default() -> *mut VicalConfig {
    Box::into_raw(Box::new(VicalConfig(SessionConfig::default())))
}

/// Loads and validates a JSON configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vical_config_load(path: *const c_char, out: *mut *mut VicalConfig) -> VicalStatus {
    guard(|| {
        let path = path_arg(path)?;
        let cfg = SessionConfig::load(&path).map_err(|e| Failure(VicalStatus::Io, e.to_string()))?;
        put(out, VicalConfig(cfg))
    })
}

/// # Safety
/// `cfg` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn vical_config_free(cfg: *mut VicalConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Reads a dataset directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vical_dataset_read(path: *const c_char, out: *mut *mut VicalDataset) -> VicalStatus {
    guard(|| {
        let path = path_arg(path)?;
        let ds = Dataset::read(&path).map_err(|e| Failure(VicalStatus::Io, e.to_string()))?;
        put(out, VicalDataset(ds))
    })
}

/// Number of camera frames, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vical_dataset_frame_count(ds: *const VicalDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.frames().len())
}

/// Number of IMU samples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vical_dataset_imu_count(ds: *const VicalDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.imu.len())
}

/// # Safety
/// `ds` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn vical_dataset_free(ds: *mut VicalDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Batch camera calibration of every frame in `ds`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vical_calibrate_cameras(
    cfg: *const VicalConfig,
    ds: *const VicalDataset,
    out: *mut *mut VicalResult,
) -> VicalStatus {
    guard(|| {
        let cfg = &handle(cfg, "config")?.0;
        let ds = &handle(ds, "dataset")?.0;
        let res = calibrate_cameras(&cfg.target, &ds.frames(), ds.camera_count(), cfg)?;
        put(out, VicalResult(res))
    })
}

/// Batch camera-IMU calibration with the cameras fixed to `camera`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vical_calibrate_imu(
    cfg: *const VicalConfig,
    ds: *const VicalDataset,
    camera: *const VicalResult,
    out: *mut *mut VicalResult,
) -> VicalStatus {
    guard(|| {
        let cfg = &handle(cfg, "config")?.0;
        let ds = &handle(ds, "dataset")?.0;
        let camera = &handle(camera, "camera result")?.0;
        let res = calibrate_imu(&cfg.target, &ds.frames(), &ds.imu, camera, cfg)?;
        put(out, VicalResult(res))
    })
}

/// Runs a headless simulated session on the default stereo rig, following
/// every suggestion. With `with_imu` false only the camera stage runs and
/// `out_imu` is left untouched.
///
/// # Safety
/// `cfg` must be live; `out_camera` and, with `with_imu`, `out_imu` writable.
#[no_mangle]
pub unsafe extern "C" fn vical_simulate_session(
    cfg: *const VicalConfig,
    seed: u64,
    with_imu: bool,
    out_camera: *mut *mut VicalResult,
    out_imu: *mut *mut VicalResult,
) -> VicalStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?.0.clone();
        if out_camera.is_null() || (with_imu && out_imu.is_null()) {
            return Err(Failure::arg("output pointer is null"));
        }
        let plan = if with_imu { SessionPlan::Full } else { SessionPlan::CameraOnly };
        let opts = DriverOptions {
            seed,
            ..Default::default()
        };
        let outcome = run_simulated(cfg, RigSpec::default_stereo(), plan, opts, |_| {}).map_err(|e| {
            let code = if e.is_unobservable() { VicalStatus::Unobservable } else { VicalStatus::Failed };
            Failure(code, e.to_string())
        })?;
        if let Some(reason) = outcome.aborted {
            return Err(Failure(VicalStatus::Failed, format!("session aborted: {reason}")));
        }
        let camera = outcome.camera.ok_or_else(|| Failure(VicalStatus::Failed, "no camera result".into()))?;
        if with_imu {
            let imu = outcome.imu.ok_or_else(|| Failure(VicalStatus::Failed, "no camera-IMU result".into()))?;
            put(out_imu, VicalResult(imu))?;
        }
        put(out_camera, VicalResult(camera))
    })
}

/// Reads a result JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vical_result_read(path: *const c_char, out: *mut *mut VicalResult) -> VicalStatus {
    guard(|| {
        let path = path_arg(path)?;
        let res = CalibResult::read(&path).map_err(|e| Failure(VicalStatus::Io, e.to_string()))?;
        put(out, VicalResult(res))
    })
}

/// Writes a result as pretty JSON.
///
/// # Safety
/// `res` must be live and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vical_result_write(res: *const VicalResult, path: *const c_char) -> VicalStatus {
    guard(|| {
        let res = &handle(res, "result")?.0;
        let path = path_arg(path)?;
        res.write(&path).map_err(|e| Failure(VicalStatus::Io, e.to_string()))
    })
}

/// The result as JSON; free with [`vical_string_free`]. Null on a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vical_result_to_json(res: *const VicalResult) -> *mut c_char {
    match res.as_ref() {
        Some(r) => CString::new(r.0.to_json()).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `res` must be live.
#[no_mangle]
pub unsafe extern "C" fn vical_result_camera_count(res: *const VicalResult) -> usize {
    res.as_ref().map_or(0, |r| r.0.cameras.len())
}

/// Writes `fx fy cx cy k1 k2 p1 p2` of camera `camera` to `out`.
///
/// # Safety
/// `res` must be live and `out` hold [`VICAL_INTRINSICS_LEN`] values.
#[no_mangle]
pub unsafe extern "C" fn vical_result_intrinsics(res: *const VicalResult, camera: usize, out: *mut f64) -> VicalStatus {
    guard(|| {
        let res = &handle(res, "result")?.0;
        let cam = res.cameras.get(camera).ok_or_else(|| Failure::arg("camera index out of range"))?;
        write_slice(out, &cam.params())
    })
}

/// Writes `T_C0Ci` of camera `camera` as `tx ty tz qx qy qz qw`.
///
/// # Safety
/// `res` must be live and `out` hold [`VICAL_POSE_LEN`] values.
#[no_mangle]
pub unsafe extern "C" fn vical_result_extrinsic(res: *const VicalResult, camera: usize, out: *mut f64) -> VicalStatus {
    guard(|| {
        let res = &handle(res, "result")?.0;
        let pose = res.extrinsics.get(camera).ok_or_else(|| Failure::arg("camera index out of range"))?;
        write_slice(out, &pose.to_params())
    })
}

/// Writes `T_SC0` as `tx ty tz qx qy qz qw`; camera-IMU results only.
///
/// # Safety
/// `res` must be live and `out` hold [`VICAL_POSE_LEN`] values.
#[no_mangle]
pub unsafe extern "C" fn vical_result_sensor_camera(res: *const VicalResult, out: *mut f64) -> VicalStatus {
    guard(|| {
        let res = &handle(res, "result")?.0;
        let pose = res
            .sensor_camera
            .ok_or_else(|| Failure(VicalStatus::Unavailable, "not a camera-IMU result".into()))?;
        write_slice(out, &pose.to_params())
    })
}

/// Writes the IMU-minus-camera time delay [s]; camera-IMU results only.
///
/// # Safety
/// `res` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vical_result_time_delay(res: *const VicalResult, out: *mut f64) -> VicalStatus {
    guard(|| {
        let res = &handle(res, "result")?.0;
        let td = res
            .time_delay
            .ok_or_else(|| Failure(VicalStatus::Unavailable, "not a camera-IMU result".into()))?;
        write_slice(out, &[td])
    })
}

/// Writes the entropy of the calibration posterior [nats] and the
/// reprojection RMSE [px].
///
/// # Safety
/// `res` must be live and both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn vical_result_metrics(res: *const VicalResult, entropy: *mut f64, rmse_px: *mut f64) -> VicalStatus {
    guard(|| {
        let res = &handle(res, "result")?.0;
        write_slice(entropy, &[res.entropy])?;
        write_slice(rmse_px, &[res.rmse_px])
    })
}

/// # Safety
/// `res` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn vical_result_free(res: *mut VicalResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}
