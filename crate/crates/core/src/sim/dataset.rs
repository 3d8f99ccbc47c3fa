//! On-disk dataset: `imu.csv`, `camN/detections.csv` and optional
//! `rig_truth.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RigSpec;
use crate::imu::ImuMeasurement;
use crate::target::CornerObservation;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("malformed {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Detections of all cameras at one capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub index: usize,
    pub stamp_ns: i64,
    pub detections: Vec<CornerObservation>,
}

impl CameraFrame {
    pub fn camera(&self, i: usize) -> impl Iterator<Item = &CornerObservation> {
        self.detections.iter().filter(move |o| o.camera == i)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    stamp_ns: i64,
    gx: f64,
    gy: f64,
    gz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    stamp_ns: i64,
    corner_j: usize,
    u: f64,
    v: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub imu: Vec<ImuMeasurement>,
    /// Detections per camera, ordered by stamp then corner.
    pub cameras: Vec<Vec<CornerObservation>>,
    pub truth: Option<RigSpec>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DatasetError + '_ {
    move |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

impl Dataset {
    /// Builds a dataset from frames, renumbering frames by capture order.
    pub fn from_frames(camera_count: usize, frames: &[CameraFrame], imu: Vec<ImuMeasurement>) -> Self {
        let mut cameras = vec![Vec::new(); camera_count];
        for f in frames {
            for o in &f.detections {
                cameras[o.camera].push(*o);
            }
        }
        let mut ds = Self {
            imu,
            cameras,
            truth: None,
        };
        ds.normalize();
        ds
    }

    /// Sorts detections and assigns frame indices by unique stamp.
    fn normalize(&mut self) {
        let mut stamps: Vec<i64> = self.cameras.iter().flatten().map(|o| o.stamp_ns).collect();
        stamps.sort_unstable();
        stamps.dedup();
        for cam in &mut self.cameras {
            cam.sort_by_key(|o| (o.stamp_ns, o.corner));
            for o in cam.iter_mut() {
                o.frame = stamps.binary_search(&o.stamp_ns).expect("stamp collected");
            }
        }
    }

    pub fn camera_count(&self) -> usize {
        self.cameras.len()
    }

    /// Frames in capture order, each holding every camera's detections.
    pub fn frames(&self) -> Vec<CameraFrame> {
        let mut by_stamp: BTreeMap<i64, CameraFrame> = BTreeMap::new();
        for o in self.cameras.iter().flatten() {
            by_stamp
                .entry(o.stamp_ns)
                .or_insert_with(|| CameraFrame {
                    index: o.frame,
                    stamp_ns: o.stamp_ns,
                    detections: Vec::new(),
                })
                .detections
                .push(*o);
        }
        by_stamp.into_values().collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("imu.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        for m in &self.imu {
            w.serialize(ImuRow {
                stamp_ns: m.stamp_ns,
                gx: m.gyro.x,
                gy: m.gyro.y,
                gz: m.gyro.z,
                ax: m.accel.x,
                ay: m.accel.y,
                az: m.accel.z,
            })
            .map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        for (i, cam) in self.cameras.iter().enumerate() {
            let cdir = dir.join(format!("cam{i}"));
            fs::create_dir_all(&cdir).map_err(io_err(&cdir))?;
            let path = cdir.join("detections.csv");
            let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
            for o in cam {
                w.serialize(DetectionRow {
                    stamp_ns: o.stamp_ns,
                    corner_j: o.corner,
                    u: o.pixel.x,
                    v: o.pixel.y,
                })
                .map_err(csv_err(&path))?;
            }
            w.flush().map_err(io_err(&path))?;
        }
        if let Some(truth) = &self.truth {
            let path = dir.join("rig_truth.json");
            let text = serde_json::to_string_pretty(truth).map_err(|source| DatasetError::Json {
                path: path.clone(),
                source,
            })?;
            fs::write(&path, text + "\n").map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, DatasetError> {
        if !dir.is_dir() {
            return Err(DatasetError::Invalid(format!("{} is not a directory", dir.display())));
        }
        let path = dir.join("imu.csv");
        let imu = if path.exists() {
            let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
            r.deserialize::<ImuRow>()
                .map(|row| {
                    row.map(|r| ImuMeasurement {
                        stamp_ns: r.stamp_ns,
                        gyro: Vector3::new(r.gx, r.gy, r.gz),
                        accel: Vector3::new(r.ax, r.ay, r.az),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(csv_err(&path))?
        } else {
            Vec::new()
        };
        let mut cameras = Vec::new();
        loop {
            let path = dir.join(format!("cam{}", cameras.len())).join("detections.csv");
            if !path.exists() {
                break;
            }
            let camera = cameras.len();
            let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
            let obs = r
                .deserialize::<DetectionRow>()
                .map(|row| {
                    row.map(|r| CornerObservation {
                        camera,
                        frame: 0,
                        corner: r.corner_j,
                        pixel: Vector2::new(r.u, r.v),
                        stamp_ns: r.stamp_ns,
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(csv_err(&path))?;
            cameras.push(obs);
        }
        if cameras.is_empty() {
            return Err(DatasetError::Invalid(format!("no cam0/detections.csv in {}", dir.display())));
        }
        let path = dir.join("rig_truth.json");
        let truth = if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Some(serde_json::from_str(&text).map_err(|source| DatasetError::Json {
                path: path.clone(),
                source,
            })?)
        } else {
            None
        };
        let mut ds = Self { imu, cameras, truth };
        ds.normalize();
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let obs = |camera, stamp_ns, corner, u: f64| CornerObservation {
            camera,
            frame: 0,
            corner,
            pixel: Vector2::new(u, u / 3.0),
            stamp_ns,
        };
        let frames = vec![
            CameraFrame {
                index: 0,
                stamp_ns: 66_666_667,
                detections: vec![obs(0, 66_666_667, 3, 0.1 + 0.2), obs(1, 66_666_667, 2, 1e-17)],
            },
            CameraFrame {
                index: 1,
                stamp_ns: 0,
                detections: vec![obs(0, 0, 1, 123.456789012345)],
            },
        ];
        let imu = vec![ImuMeasurement {
            stamp_ns: -2_500_000,
            gyro: Vector3::new(1.0 / 3.0, -0.0, 5e-300),
            accel: Vector3::new(9.81, std::f64::consts::PI, -1.0),
        }];
        let mut ds = Dataset::from_frames(2, &frames, imu);
        ds.truth = Some(RigSpec::default_stereo());
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.frames().len(), 2);
        assert_eq!(back.frames()[0].stamp_ns, 0);
    }
}
