//! One deployment's raw inputs: frame records with poses, camera
//! calibrations, masks and range scans.

use crate::geo::{GeoCoordinate, LocalFrame, LocalPoint};
use crate::perception::{CameraIntrinsics, CameraPose, SegmentMask};
use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("session {0} has no frames")]
    NoFrames(String),
    #[error("frame ids must be unique and time-ordered; offending frame {0}")]
    FrameOrder(u64),
    #[error("frame {frame} references unknown camera '{camera}'")]
    UnknownCamera { frame: u64, camera: String },
    #[error("duplicate camera id '{0}'")]
    DuplicateCamera(String),
    #[error("mask {mask} references unknown frame {frame}")]
    UnknownFrame { frame: u64, mask: u32 },
    #[error("invalid frame {frame}: {reason}")]
    InvalidFrame { frame: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    /// Masks are intersected with the ground plane.
    DownFacing,
    /// Masks are raycast through the occupancy octree.
    FrontFacing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraCalibration {
    pub camera_id: String,
    pub kind: CameraKind,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: u64,
    /// Seconds since the start of the session.
    pub timestamp: f64,
    pub camera_id: String,
    pub pose: CameraPose,
    /// Position (m) then orientation (rad, small-angle about local axes), column-major.
    pub pose_covariance: Matrix6<f64>,
    /// Surveyed ground height under the frame, local up.
    pub ground_height: f64,
}

impl FrameRecord {
    /// Where the optical axis meets the ground, if it points downward.
    pub fn footprint_center(&self) -> Option<LocalPoint> {
        let axis = self.pose.optical_axis();
        let c = self.pose.position.to_vector();
        if !(axis.z < 0.0) || !(c.z > self.ground_height) {
            return None;
        }
        let s = (self.ground_height - c.z) / axis.z;
        Some(LocalPoint::from_vector(&(c + axis * s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub masks: String,
    pub scans: String,
}

impl Default for DataFiles {
    fn default() -> Self {
        Self { masks: "masks.json".into(), scans: "scans.json".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub session_id: String,
    pub season_tag: String,
    /// Position of the deployment on the season axis (one unit per season).
    pub season_time: f64,
    pub origin: GeoCoordinate,
    pub cameras: Vec<CameraCalibration>,
    pub frames: Vec<FrameRecord>,
    pub files: DataFiles,
}

impl SessionManifest {
    pub fn local_frame(&self) -> LocalFrame {
        LocalFrame { origin: self.origin, ellipsoid: Default::default() }
    }

    pub fn camera(&self, id: &str) -> Option<&CameraCalibration> {
        self.cameras.iter().find(|c| c.camera_id == id)
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let mut ids = BTreeSet::new();
        for c in &self.cameras {
            if !ids.insert(c.camera_id.as_str()) {
                return Err(SessionError::DuplicateCamera(c.camera_id.clone()));
            }
        }
        let mut previous: Option<&FrameRecord> = None;
        for f in &self.frames {
            if self.camera(&f.camera_id).is_none() {
                return Err(SessionError::UnknownCamera { frame: f.frame_id, camera: f.camera_id.clone() });
            }
            if let Some(p) = previous {
                if f.frame_id <= p.frame_id || f.timestamp < p.timestamp {
                    return Err(SessionError::FrameOrder(f.frame_id));
                }
            }
            let invalid = |reason: &str| SessionError::InvalidFrame { frame: f.frame_id, reason: reason.into() };
            if !f.timestamp.is_finite() || !f.ground_height.is_finite() || !f.pose.position.is_finite() {
                return Err(invalid("non-finite timestamp, ground height or position"));
            }
            let r = f.pose.rotation();
            if (r.determinant() - 1.0).abs() > 1e-9 {
                return Err(invalid("orientation is not a rotation"));
            }
            let c = &f.pose_covariance;
            if (c - c.transpose()).abs().max() > 1e-12 || c.iter().any(|x| !x.is_finite()) {
                return Err(invalid("pose covariance must be finite and symmetric"));
            }
            previous = Some(f);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanRecord {
    pub scan_id: u64,
    pub timestamp: f64,
    pub origin: LocalPoint,
    pub points: Vec<LocalPoint>,
}

/// A loaded session: manifest plus its data files.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub manifest: SessionManifest,
    pub masks: Vec<SegmentMask>,
    pub scans: Vec<ScanRecord>,
}

impl Session {
    pub fn validate(&self) -> Result<(), SessionError> {
        self.manifest.validate()?;
        let frames: BTreeSet<u64> = self.manifest.frames.iter().map(|f| f.frame_id).collect();
        for m in &self.masks {
            if !frames.contains(&m.frame_id) {
                return Err(SessionError::UnknownFrame { frame: m.frame_id, mask: m.mask_id });
            }
        }
        Ok(())
    }

    /// Masks grouped by frame id, each group ordered by mask id.
    pub fn masks_by_frame(&self) -> BTreeMap<u64, Vec<&SegmentMask>> {
        let mut out: BTreeMap<u64, Vec<&SegmentMask>> = BTreeMap::new();
        for m in &self.masks {
            out.entry(m.frame_id).or_default().push(m);
        }
        for v in out.values_mut() {
            v.sort_by_key(|m| m.mask_id);
        }
        out
    }
}
