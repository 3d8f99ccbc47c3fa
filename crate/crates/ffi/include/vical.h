#ifndef VICAL_H
#define VICAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Number of intrinsic parameters written by [`vical_result_intrinsics`].
#define VICAL_INTRINSICS_LEN 8

// Number of values written for a pose: `tx ty tz qx qy qz qw`.
#define VICAL_POSE_LEN 7

// Result of a fallible call. Values match the CLI exit codes where both exist.
typedef enum VicalStatus {
  VICAL_STATUS_OK = 0,
  VICAL_STATUS_INVALID_ARGUMENT = 1,
  // The data cannot constrain the calibration.
  VICAL_STATUS_UNOBSERVABLE = 2,
  // A file could not be read, written or parsed.
  VICAL_STATUS_IO = 3,
  // Estimation failed or the session aborted.
  VICAL_STATUS_FAILED = 4,
  // The result does not hold the requested quantity.
  VICAL_STATUS_UNAVAILABLE = 5,
  // Internal error; the library caught a panic.
  VICAL_STATUS_PANIC = 6,
} VicalStatus;

// Session configuration.
typedef struct VicalConfig VicalConfig;

// Recorded camera detections and IMU samples.
typedef struct VicalDataset VicalDataset;

// Calibration result of one stage.
typedef struct VicalResult VicalResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *vical_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *vical_last_error(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must come from this library and not be freed twice.
void vical_string_free(char *s);

// Default configuration. Free with [`vical_config_free`].
struct VicalConfig *vical_config_default(void);

// Loads and validates a JSON configuration file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum VicalStatus vical_config_load(const char *path, struct VicalConfig **out);

// # Safety
// `cfg` must be null or a live handle from this library.
void vical_config_free(struct VicalConfig *cfg);

// Reads a dataset directory.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum VicalStatus vical_dataset_read(const char *path, struct VicalDataset **out);

// Number of camera frames, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t vical_dataset_frame_count(const struct VicalDataset *ds);

// Number of IMU samples, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t vical_dataset_imu_count(const struct VicalDataset *ds);

// # Safety
// `ds` must be null or a live handle from this library.
void vical_dataset_free(struct VicalDataset *ds);

// Batch camera calibration of every frame in `ds`.
//
// # Safety
// Handles must be live and `out` writable.
enum VicalStatus vical_calibrate_cameras(const struct VicalConfig *cfg,
                                         const struct VicalDataset *ds,
                                         struct VicalResult **out);

// Batch camera-IMU calibration with the cameras fixed to `camera`.
//
// # Safety
// Handles must be live and `out` writable.
enum VicalStatus vical_calibrate_imu(const struct VicalConfig *cfg,
                                     const struct VicalDataset *ds,
                                     const struct VicalResult *camera,
                                     struct VicalResult **out);

// Runs a headless simulated session on the default stereo rig, following
// every suggestion. With `with_imu` false only the camera stage runs and
// `out_imu` is left untouched.
//
// # Safety
// `cfg` must be live; `out_camera` and, with `with_imu`, `out_imu` writable.
enum VicalStatus vical_simulate_session(const struct VicalConfig *cfg,
                                        uint64_t seed,
                                        bool with_imu,
                                        struct VicalResult **out_camera,
                                        struct VicalResult **out_imu);

// Reads a result JSON file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum VicalStatus vical_result_read(const char *path, struct VicalResult **out);

// Writes a result as pretty JSON.
//
// # Safety
// `res` must be live and `path` a NUL-terminated string.
enum VicalStatus vical_result_write(const struct VicalResult *res, const char *path);

// The result as JSON; free with [`vical_string_free`]. Null on a null handle.
//
// # Safety
// `res` must be null or a live handle.
char *vical_result_to_json(const struct VicalResult *res);

// # Safety
// `res` must be live.
size_t vical_result_camera_count(const struct VicalResult *res);

// Writes `fx fy cx cy k1 k2 p1 p2` of camera `camera` to `out`.
//
// # Safety
// `res` must be live and `out` hold [`VICAL_INTRINSICS_LEN`] values.
enum VicalStatus vical_result_intrinsics(const struct VicalResult *res, size_t camera, double *out);

// Writes `T_C0Ci` of camera `camera` as `tx ty tz qx qy qz qw`.
//
// # Safety
// `res` must be live and `out` hold [`VICAL_POSE_LEN`] values.
enum VicalStatus vical_result_extrinsic(const struct VicalResult *res, size_t camera, double *out);

// Writes `T_SC0` as `tx ty tz qx qy qz qw`; camera-IMU results only.
//
// # Safety
// `res` must be live and `out` hold [`VICAL_POSE_LEN`] values.
enum VicalStatus vical_result_sensor_camera(const struct VicalResult *res, double *out);

// Writes the IMU-minus-camera time delay [s]; camera-IMU results only.
//
// # Safety
// `res` must be live and `out` writable.
enum VicalStatus vical_result_time_delay(const struct VicalResult *res, double *out);

// Writes the entropy of the calibration posterior [nats] and the
// reprojection RMSE [px].
//
// # Safety
// `res` must be live and both outputs writable.
enum VicalStatus vical_result_metrics(const struct VicalResult *res,
                                      double *entropy,
                                      double *rmse_px);

// # Safety
// `res` must be null or a live handle from this library.
void vical_result_free(struct VicalResult *res);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VICAL_H */
