//! Newline-delimited JSON messages between a session and its clients.
//!
//! Every line is one object carrying the protocol version `v` and a `type`
//! tag. Unknown versions are rejected so old clients fail loudly.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::calib::CalibResult;
use crate::geometry::Pose;
use crate::guidance::{NbtName, SessionMode, Stage};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported protocol version {0}, expected {PROTOCOL_VERSION}")]
    Version(u64),
    #[error("message has no version field")]
    MissingVersion,
}

/// Corner detections of one camera in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDetections {
    pub camera: usize,
    pub corners: Vec<usize>,
    pub pixels: Vec<[f64; 2]>,
}

/// MI of one trajectory candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NbtScore {
    pub name: NbtName,
    pub mutual_info: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Suggestion {
    /// Move the reference camera to `t_fc` (camera pose in the target frame).
    Nbv {
        candidate: usize,
        t_fc: Pose,
        mutual_info: f64,
        /// MI of every candidate, indexed by candidate id.
        scores: Vec<f64>,
    },
    /// Perform trajectory `name`; `polyline` samples the sensor positions
    /// in the target frame.
    Nbt {
        name: NbtName,
        mutual_info: f64,
        polyline: Vec<[f64; 3]>,
        scores: Vec<NbtScore>,
    },
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    State {
        t_ns: i64,
        stage: Stage,
        mode: SessionMode,
    },
    Suggestion {
        t_ns: i64,
        suggestion: Suggestion,
    },
    /// Estimated reference camera pose in the target frame.
    LivePose {
        t_ns: i64,
        t_fc: Pose,
    },
    Detections {
        t_ns: i64,
        frame: usize,
        cameras: Vec<CameraDetections>,
    },
    Metrics {
        t_ns: i64,
        stage: Stage,
        /// Entropy of the online calibration posterior [nats].
        entropy: f64,
        /// MI of the latest evaluated frame or best candidate [nats].
        mutual_info: Option<f64>,
        rmse_px: Option<f64>,
        /// Views (camera stage) or keyframes (camera-IMU stage) used so far.
        views: usize,
    },
    Result {
        stage: Stage,
        result: Box<CalibResult>,
    },
    Abort {
        reason: String,
    },
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Start,
    Abort,
    /// Desired reference camera pose in the target frame.
    Steer { t_fc: Pose },
}

fn encode<T: Serialize>(msg: &T) -> String {
    let mut value = serde_json::to_value(msg).expect("protocol messages serialize");
    let obj = value.as_object_mut().expect("protocol messages are objects");
    obj.insert("v".into(), Value::from(PROTOCOL_VERSION));
    value.to_string()
}

fn decode<T: for<'de> Deserialize<'de>>(line: &str) -> Result<T, ProtocolError> {
    let mut value: Value = serde_json::from_str(line)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| ProtocolError::Json(serde::de::Error::custom("expected an object")))?;
    match obj.remove("v").map(|v| v.as_u64()) {
        None => return Err(ProtocolError::MissingVersion),
        Some(Some(v)) if v == PROTOCOL_VERSION as u64 => {}
        Some(v) => return Err(ProtocolError::Version(v.unwrap_or(0))),
    }
    Ok(serde_json::from_value(value)?)
}

impl Event {
    /// One protocol line without the trailing newline.
    pub fn to_line(&self) -> String {
        encode(self)
    }

    pub fn from_line(line: &str) -> Result<Self, ProtocolError> {
        decode(line)
    }
}

impl Command {
    pub fn to_line(&self) -> String {
        encode(self)
    }

    pub fn from_line(line: &str) -> Result<Self, ProtocolError> {
        decode(line)
    }
}
