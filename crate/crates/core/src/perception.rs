//! Camera model, segmentation masks and their projection into landmark
//! observations.
//!
//! Camera axes follow the computer-vision convention: x right, y down,
//! z forward. Pixel centres sit at integer coordinates, so pixel (u, v)
//! covers [u - 0.5, u + 0.5] x [v - 0.5, v + 0.5].

use crate::geo::{GeoCoordinate, GeoError, LocalFrame, LocalPoint};
use crate::octree::{OccupancyOctree, Ray};
use nalgebra::{Matrix3, Matrix3x6, Matrix6, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Descriptor layout:
/// `[area m², mean r, mean g, mean b, var r, var g, var b, elongation, orientation rad, perimeter/area 1/m]`.
pub const DESCRIPTOR_LEN: usize = 10;
pub const DESC_AREA: usize = 0;
pub const DESC_COLOR: usize = 1;
pub const DESC_COLOR_VAR: usize = 4;
pub const DESC_ELONGATION: usize = 7;
pub const DESC_ORIENTATION: usize = 8;
pub const DESC_PERIMETER_RATIO: usize = 9;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("pixel ({u}, {v}) lies outside the {width}x{height} image")]
    OutOfImage { u: f64, v: f64, width: u32, height: u32 },
    #[error("centroid ray does not reach the ground plane")]
    NoGroundIntersection,
    #[error("no ray hit occupied space within {max_range} m")]
    NoHit { max_range: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Vegetation,
    Litter,
    Crack,
    Dip,
    Conmod,
    Shrub,
    Other,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 7] = [
        ClassLabel::Vegetation,
        ClassLabel::Litter,
        ClassLabel::Crack,
        ClassLabel::Dip,
        ClassLabel::Conmod,
        ClassLabel::Shrub,
        ClassLabel::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Vegetation => "vegetation",
            ClassLabel::Litter => "litter",
            ClassLabel::Crack => "crack",
            ClassLabel::Dip => "dip",
            ClassLabel::Conmod => "conmod",
            ClassLabel::Shrub => "shrub",
            ClassLabel::Other => "other",
        }
    }

    /// Microsite classes: ground features rather than plants or anchors.
    pub fn is_microsite(self) -> bool {
        matches!(self, ClassLabel::Litter | ClassLabel::Crack | ClassLabel::Dip)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassLabel::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown class label '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && (0.0..f64::from(self.width)).contains(&self.cx)
            && (0.0..f64::from(self.height)).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(PerceptionError::InvalidCamera(format!("{self:?}")))
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (-0.5..=f64::from(self.width) - 0.5).contains(&u) && (-0.5..=f64::from(self.height) - 0.5).contains(&v)
    }
}

/// Camera-to-local rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub position: LocalPoint,
    /// Stored as `[x, y, z, w]`.
    pub orientation: UnitQuaternion<f64>,
}

impl CameraPose {
    pub fn new(position: LocalPoint, orientation: UnitQuaternion<f64>) -> Self {
        Self { position, orientation }
    }

    /// Camera looking straight down. With `yaw_deg = 0` image right is
    /// east and image down is south; positive yaw turns counter-clockwise
    /// seen from above.
    pub fn nadir(position: LocalPoint, yaw_deg: f64) -> Self {
        let base = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_deg.to_radians());
        let r = yaw * Rotation3::from_matrix_unchecked(base);
        Self { position, orientation: UnitQuaternion::from_rotation_matrix(&r) }
    }

    /// Camera looking along compass `azimuth_deg`, tilted down by `pitch_deg`.
    pub fn forward(position: LocalPoint, azimuth_deg: f64, pitch_deg: f64) -> Self {
        let (sa, ca) = azimuth_deg.to_radians().sin_cos();
        let (sp, cp) = pitch_deg.to_radians().sin_cos();
        let z = Vector3::new(cp * sa, cp * ca, -sp);
        let x = Vector3::new(ca, -sa, 0.0);
        let y = z.cross(&x);
        let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        Self { position, orientation: UnitQuaternion::from_rotation_matrix(&r) }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix().into_inner()
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.orientation * Vector3::z()
    }

    /// Camera-frame coordinates of a local point.
    pub fn to_camera(&self, p: &LocalPoint) -> Vector3<f64> {
        self.orientation.inverse() * (p.to_vector() - self.position.to_vector())
    }
}

/// Projects a local point to pixel coordinates; `None` behind the camera.
pub fn project_point(k: &CameraIntrinsics, pose: &CameraPose, p: &LocalPoint) -> Option<(f64, f64)> {
    let c = pose.to_camera(p);
    (c.z > 0.0).then(|| (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
}

/// Unnormalized camera-frame direction through a pixel (z component 1).
fn camera_direction(k: &CameraIntrinsics, u: f64, v: f64) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
}

pub fn pixel_to_ray(k: &CameraIntrinsics, pose: &CameraPose, u: f64, v: f64) -> Result<Ray, PerceptionError> {
    if !k.contains(u, v) {
        return Err(PerceptionError::OutOfImage { u, v, width: k.width, height: k.height });
    }
    Ray::new(pose.position, pose.orientation * camera_direction(k, u, v))
        .ok_or_else(|| PerceptionError::InvalidCamera("degenerate ray".into()))
}

/// Horizontal run of mask pixels `[start, start + len)` in one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub row: u32,
    pub start: u32,
    pub len: u32,
}

/// Binary mask over a full image, run-length encoded row-major as
/// `[value, length]` pairs (value 0 or 1) that cover every pixel exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentMask {
    pub frame_id: u64,
    pub mask_id: u32,
    pub width: u32,
    pub height: u32,
    pub runs: Vec<[u32; 2]>,
    /// Segmenter label if one was attached; unlabeled masks go through a classifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<ClassLabel>,
    pub confidence: f64,
    pub color_mean: [f64; 3],
    pub color_var: [f64; 3],
}

impl SegmentMask {
    /// Builds a mask from row spans, which may arrive in any order and
    /// overlap. Spans are clipped to the image.
    pub fn from_spans(frame_id: u64, mask_id: u32, width: u32, height: u32, spans: &[Span]) -> Self {
        let mut spans: Vec<(u32, u32, u32)> = spans
            .iter()
            .filter(|s| s.row < height && s.start < width && s.len > 0)
            .map(|s| (s.row, s.start, (s.start + s.len).min(width)))
            .collect();
        spans.sort_unstable();
        let mut merged: Vec<(u32, u32, u32)> = Vec::with_capacity(spans.len());
        for (row, a, b) in spans {
            match merged.last_mut() {
                Some(last) if last.0 == row && a <= last.2 => last.2 = last.2.max(b),
                _ => merged.push((row, a, b)),
            }
        }
        let mut runs: Vec<[u32; 2]> = Vec::with_capacity(2 * merged.len() + 1);
        let mut cursor = 0u64;
        let total = u64::from(width) * u64::from(height);
        for (row, a, b) in merged {
            let begin = u64::from(row) * u64::from(width) + u64::from(a);
            let end = u64::from(row) * u64::from(width) + u64::from(b);
            push_run(&mut runs, 0, begin - cursor);
            push_run(&mut runs, 1, end - begin);
            cursor = end;
        }
        push_run(&mut runs, 0, total - cursor);
        Self {
            frame_id,
            mask_id,
            width,
            height,
            runs,
            class_label: None,
            confidence: 1.0,
            color_mean: [0.0; 3],
            color_var: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |m: String| Err(PerceptionError::InvalidMask(m));
        let total: u64 = self.runs.iter().map(|r| u64::from(r[1])).sum();
        if total != u64::from(self.width) * u64::from(self.height) {
            return bad(format!(
                "runs cover {total} pixels, image has {}",
                u64::from(self.width) * u64::from(self.height)
            ));
        }
        if self.runs.iter().any(|r| r[0] > 1) {
            return bad("run values must be 0 or 1".into());
        }
        if !self.runs.iter().any(|r| r[0] == 1 && r[1] > 0) {
            return Err(PerceptionError::EmptyMask);
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return bad(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if self.color_mean.iter().chain(&self.color_var).any(|c| !c.is_finite() || *c < 0.0) {
            return bad("colour statistics must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Foreground spans in row-major order, split at row ends.
    pub fn spans(&self) -> Vec<Span> {
        let w = u64::from(self.width);
        let mut out = Vec::new();
        let mut pos = 0u64;
        for &[value, len] in &self.runs {
            let len = u64::from(len);
            if value == 1 && w > 0 {
                let mut p = pos;
                let end = pos + len;
                while p < end {
                    let row = p / w;
                    let col = p % w;
                    let stop = end.min((row + 1) * w);
                    out.push(Span { row: row as u32, start: col as u32, len: (stop - p) as u32 });
                    p = stop;
                }
            }
            pos += len;
        }
        out
    }

    pub fn pixel_count(&self) -> u64 {
        self.runs.iter().filter(|r| r[0] == 1).map(|r| u64::from(r[1])).sum()
    }
}

fn push_run(runs: &mut Vec<[u32; 2]>, value: u32, len: u64) {
    if len == 0 {
        return;
    }
    match runs.last_mut() {
        Some(last) if last[0] == value => last[1] += len as u32,
        _ => runs.push([value, len as u32]),
    }
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub u_min: u32,
    pub u_max: u32,
    pub v_min: u32,
    pub v_max: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.u_max - self.u_min + 1
    }

    pub fn height(&self) -> u32 {
        self.v_max - self.v_min + 1
    }

    /// Outer corners (pixel edges), clockwise from top-left.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (u0, u1) = (f64::from(self.u_min) - 0.5, f64::from(self.u_max) + 0.5);
        let (v0, v1) = (f64::from(self.v_min) - 0.5, f64::from(self.v_max) + 0.5);
        [(u0, v0), (u1, v0), (u1, v1), (u0, v1)]
    }
}

/// Shape statistics of a mask in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskShape {
    pub count: u64,
    pub centroid: (f64, f64),
    pub bbox: PixelBox,
    /// Second central moments including each pixel's own extent (1/12).
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
    /// 4-neighbour boundary edge count.
    pub perimeter: u64,
}

impl MaskShape {
    /// sqrt of the ratio of principal second moments; 1 for a square.
    pub fn elongation(&self) -> f64 {
        let tr = self.mu20 + self.mu02;
        let det_term = ((self.mu20 - self.mu02).powi(2) + 4.0 * self.mu11 * self.mu11).sqrt();
        let l1 = (tr + det_term) / 2.0;
        let l2 = (tr - det_term) / 2.0;
        (l1 / l2).sqrt()
    }

    /// Major-axis angle from the image x axis, radians in (-pi/2, pi/2].
    pub fn orientation(&self) -> f64 {
        0.5 * (2.0 * self.mu11).atan2(self.mu20 - self.mu02)
    }
}

fn sum_to(n: i128) -> i128 {
    n * (n + 1) / 2
}

fn sum_sq_to(n: i128) -> i128 {
    n * (n + 1) * (2 * n + 1) / 6
}

fn row_overlap(a: &[(u32, u32)], b: &[(u32, u32)]) -> u64 {
    let (mut i, mut j, mut total) = (0, 0, 0u64);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += u64::from(hi - lo);
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Exact integer moments of the mask.
pub fn mask_shape(m: &SegmentMask) -> Result<MaskShape, PerceptionError> {
    let spans = m.spans();
    if spans.is_empty() {
        return Err(PerceptionError::EmptyMask);
    }
    let (mut n, mut su, mut sv, mut suu, mut svv, mut suv) = (0i128, 0i128, 0i128, 0i128, 0i128, 0i128);
    let mut bbox = PixelBox { u_min: u32::MAX, u_max: 0, v_min: u32::MAX, v_max: 0 };
    // per-row half-open intervals for the perimeter count
    let mut rows: Vec<(u32, Vec<(u32, u32)>)> = Vec::new();
    for s in &spans {
        let (a, b) = (i128::from(s.start), i128::from(s.start + s.len - 1));
        let len = b - a + 1;
        let row_sum = sum_to(b) - sum_to(a - 1);
        let v = i128::from(s.row);
        n += len;
        su += row_sum;
        suu += sum_sq_to(b) - sum_sq_to(a - 1);
        sv += v * len;
        svv += v * v * len;
        suv += v * row_sum;
        bbox.u_min = bbox.u_min.min(s.start);
        bbox.u_max = bbox.u_max.max(s.start + s.len - 1);
        bbox.v_min = bbox.v_min.min(s.row);
        bbox.v_max = bbox.v_max.max(s.row);
        match rows.last_mut() {
            Some((r, iv)) if *r == s.row => match iv.last_mut() {
                Some(last) if last.1 == s.start => last.1 = s.start + s.len,
                _ => iv.push((s.start, s.start + s.len)),
            },
            _ => rows.push((s.row, vec![(s.start, s.start + s.len)])),
        }
    }
    let mut perimeter = 0u64;
    for (i, (row, iv)) in rows.iter().enumerate() {
        let len: u64 = iv.iter().map(|(a, b)| u64::from(b - a)).sum();
        perimeter += 2 * iv.len() as u64;
        let above = (i > 0 && rows[i - 1].0 + 1 == *row).then(|| row_overlap(iv, &rows[i - 1].1)).unwrap_or(0);
        let below = (i + 1 < rows.len() && rows[i + 1].0 == row + 1)
            .then(|| row_overlap(iv, &rows[i + 1].1))
            .unwrap_or(0);
        perimeter += 2 * len - above - below;
    }
    let nf = n as f64;
    let n2 = (n * n) as f64;
    Ok(MaskShape {
        count: n as u64,
        centroid: (su as f64 / nf, sv as f64 / nf),
        bbox,
        mu20: (n * suu - su * su) as f64 / n2 + 1.0 / 12.0,
        mu02: (n * svv - sv * sv) as f64 / n2 + 1.0 / 12.0,
        mu11: (n * suv - su * sv) as f64 / n2,
        perimeter,
    })
}

/// Centroid (subpixel) and tight bounding box of the mask.
pub fn mask_centroid_bbox(m: &SegmentMask) -> Result<((f64, f64), PixelBox), PerceptionError> {
    mask_shape(m).map(|s| (s.centroid, s.bbox))
}

/// Metric size of one pixel at the landmark, meters along image x and y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelScale {
    pub sx: f64,
    pub sy: f64,
}

pub fn compute_descriptor(m: &SegmentMask, scale: PixelScale) -> Result<Vec<f64>, PerceptionError> {
    let shape = mask_shape(m)?;
    Ok(descriptor_from_shape(m, &shape, scale))
}

fn descriptor_from_shape(m: &SegmentMask, shape: &MaskShape, scale: PixelScale) -> Vec<f64> {
    let area = shape.count as f64 * scale.sx * scale.sy;
    let perimeter = shape.perimeter as f64 * (scale.sx * scale.sy).sqrt();
    let mut d = Vec::with_capacity(DESCRIPTOR_LEN);
    d.push(area);
    d.extend_from_slice(&m.color_mean);
    d.extend_from_slice(&m.color_var);
    d.push(shape.elongation());
    d.push(shape.orientation());
    d.push(perimeter / area);
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkObservation {
    pub frame_id: u64,
    pub mask_id: u32,
    pub timestamp: f64,
    pub class_label: ClassLabel,
    pub confidence: f64,
    pub position: LocalPoint,
    pub position_covariance: Matrix3<f64>,
    pub descriptor: Vec<f64>,
    pub geo: GeoCoordinate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    /// Ground relief folded into down-facing position covariance, meters.
    pub ground_relief_sigma: f64,
    /// Centroid localisation noise, pixels.
    pub pixel_sigma: f64,
    /// Front-facing raycast range, meters.
    pub max_range: f64,
    /// Corner hits further than this (along the optical axis) from the
    /// centroid hit are treated as background.
    pub corner_depth_tolerance: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self { ground_relief_sigma: 0.05, pixel_sigma: 0.5, max_range: 20.0, corner_depth_tolerance: 0.5 }
    }
}

/// Everything known about the frame a mask came from.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub intrinsics: &'a CameraIntrinsics,
    pub pose: &'a CameraPose,
    /// Position (local, meters) then small-angle orientation (local axes, radians).
    pub pose_covariance: &'a Matrix6<f64>,
    pub timestamp: f64,
    pub frame: &'a LocalFrame,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn check_mask(m: &SegmentMask, k: &CameraIntrinsics) -> Result<MaskShape, PerceptionError> {
    k.validate()?;
    if m.width != k.width || m.height != k.height {
        return Err(PerceptionError::InvalidMask(format!(
            "mask is {}x{}, camera is {}x{}",
            m.width, m.height, k.width, k.height
        )));
    }
    m.validate()?;
    mask_shape(m)
}

fn observation(
    m: &SegmentMask,
    view: &FrameView,
    position: Vector3<f64>,
    covariance: Matrix3<f64>,
    descriptor: Vec<f64>,
) -> Result<LandmarkObservation, PerceptionError> {
    let position = LocalPoint::from_vector(&position);
    let covariance = (covariance + covariance.transpose()) / 2.0;
    Ok(LandmarkObservation {
        frame_id: m.frame_id,
        mask_id: m.mask_id,
        timestamp: view.timestamp,
        class_label: m.class_label.unwrap_or(ClassLabel::Other),
        confidence: m.confidence,
        position,
        position_covariance: covariance,
        descriptor,
        geo: view.frame.local_to_geo(&position)?,
    })
}

/// Intersects the centroid ray with the plane `up = ground_height`.
/// Covariance is the first-order propagation of pose, ground-relief and
/// centroid noise through the intersection.
pub fn project_down_facing(
    m: &SegmentMask,
    view: &FrameView,
    ground_height: f64,
    cfg: &PerceptionConfig,
) -> Result<LandmarkObservation, PerceptionError> {
    let k = view.intrinsics;
    let shape = check_mask(m, k)?;
    let (u, v) = shape.centroid;
    let r = view.pose.rotation();
    let d = r * camera_direction(k, u, v);
    let c = view.pose.position.to_vector();
    if !(d.z < 0.0) || !(c.z > ground_height) {
        return Err(PerceptionError::NoGroundIntersection);
    }
    let s = (ground_height - c.z) / d.z;
    let p = c + d * s;

    // moving the ray end point along d keeps it on the plane only through s
    let proj = Matrix3::identity() - d * Vector3::z().transpose() / d.z;
    let mut j_pose = Matrix3x6::zeros();
    j_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&proj);
    j_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-s * proj * skew(&d)));
    let j_h = d / d.z;
    let j_u = s * proj * r * Vector3::new(1.0 / k.fx, 0.0, 0.0);
    let j_v = s * proj * r * Vector3::new(0.0, 1.0 / k.fy, 0.0);
    let cov = j_pose * view.pose_covariance * j_pose.transpose()
        + j_h * j_h.transpose() * cfg.ground_relief_sigma.powi(2)
        + (j_u * j_u.transpose() + j_v * j_v.transpose()) * cfg.pixel_sigma.powi(2);

    let depth = (p - c).dot(&view.pose.optical_axis());
    let scale = PixelScale { sx: depth / k.fx, sy: depth / k.fy };
    let descriptor = descriptor_from_shape(m, &shape, scale);
    observation(m, view, p, cov, descriptor)
}

/// Casts the centroid ray and the four bounding-box corner rays through the
/// octree. The landmark sits at the centre of the first occupied voxel on
/// the centroid ray; corner hits set the metric extent used for the
/// descriptor.
pub fn project_front_facing(
    m: &SegmentMask,
    view: &FrameView,
    tree: &OccupancyOctree,
    cfg: &PerceptionConfig,
) -> Result<LandmarkObservation, PerceptionError> {
    let k = view.intrinsics;
    let shape = check_mask(m, k)?;
    let (u, v) = shape.centroid;
    let ray = pixel_to_ray(k, view.pose, u, v)?;
    let hit = tree
        .raycast_first_occupied(&ray, cfg.max_range)
        .ok_or(PerceptionError::NoHit { max_range: cfg.max_range })?;
    let c = view.pose.position.to_vector();
    let axis = view.pose.optical_axis();
    let p = hit.center.to_vector();
    let depth = (p - c).dot(&axis);

    let mut corners = [Vector3::zeros(); 4];
    for (slot, (cu, cv)) in shape.bbox.corners().into_iter().enumerate() {
        let cray = pixel_to_ray(k, view.pose, cu, cv)?;
        let along = cray.direction().dot(&axis);
        let fallback = c + cray.direction() * (depth / along);
        corners[slot] = match tree.raycast_first_occupied(&cray, cfg.max_range) {
            Some(h) if ((h.center.to_vector() - c).dot(&axis) - depth).abs() <= cfg.corner_depth_tolerance => {
                h.center.to_vector()
            }
            _ => fallback,
        };
    }
    let width = ((corners[1] - corners[0]).norm() + (corners[2] - corners[3]).norm()) / 2.0;
    let height = ((corners[3] - corners[0]).norm() + (corners[2] - corners[1]).norm()) / 2.0;
    let scale = PixelScale { sx: width / f64::from(shape.bbox.width()), sy: height / f64::from(shape.bbox.height()) };
    let descriptor = descriptor_from_shape(m, &shape, scale);

    let t = (p - c).norm();
    let dir = ray.direction();
    let mut j_pose = Matrix3x6::zeros();
    j_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-t * skew(dir)));
    let quantization = tree.resolution().powi(2) / 12.0;
    let pixel = (t * cfg.pixel_sigma / k.fx.min(k.fy)).powi(2);
    let cov = j_pose * view.pose_covariance * j_pose.transpose() + Matrix3::identity() * (quantization + pixel);
    observation(m, view, p, cov, descriptor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: ClassLabel,
    pub confidence: f64,
}

/// Predicts a class from a mask descriptor. Implementations must be deterministic.
pub trait MaskClassifier: Send + Sync {
    fn classify(&self, descriptor: &[f64]) -> Classification;
}

/// Hand-written colour/shape rules, checked in order: shrub, vegetation,
/// crack, conmod, litter, dip; anything else is `other` with confidence 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicClassifier {
    pub green_margin: f64,
    pub shrub_min_area: f64,
    pub vegetation_min_area: f64,
    pub crack_min_elongation: f64,
    pub crack_max_luminance: f64,
    pub conmod_max_saturation: f64,
    pub conmod_luminance: [f64; 2],
    pub conmod_area: [f64; 2],
    pub litter_margin: f64,
    pub dip_max_luminance: f64,
    pub dip_max_elongation: f64,
    pub confidence: f64,
}

impl Default for HeuristicClassifier {
    fn default() -> Self {
        Self {
            green_margin: 0.08,
            shrub_min_area: 0.08,
            vegetation_min_area: 2e-4,
            crack_min_elongation: 5.0,
            crack_max_luminance: 0.3,
            conmod_max_saturation: 0.05,
            conmod_luminance: [0.45, 0.7],
            conmod_area: [0.03, 0.15],
            litter_margin: 0.05,
            dip_max_luminance: 0.45,
            dip_max_elongation: 2.5,
            confidence: 0.8,
        }
    }
}

impl MaskClassifier for HeuristicClassifier {
    fn classify(&self, d: &[f64]) -> Classification {
        let other = Classification { label: ClassLabel::Other, confidence: 0.0 };
        if d.len() != DESCRIPTOR_LEN || d.iter().any(|x| x.is_nan()) {
            return other;
        }
        let area = d[DESC_AREA];
        let (r, g, b) = (d[DESC_COLOR], d[DESC_COLOR + 1], d[DESC_COLOR + 2]);
        let elongation = d[DESC_ELONGATION];
        let luminance = 0.299 * r + 0.587 * g + 0.114 * b;
        let max = r.max(g).max(b);
        let saturation = if max > 0.0 { (max - r.min(g).min(b)) / max } else { 0.0 };
        let green = g > r + self.green_margin && g > b + self.green_margin;
        let label = if green && area >= self.shrub_min_area {
            ClassLabel::Shrub
        } else if green && area >= self.vegetation_min_area {
            ClassLabel::Vegetation
        } else if elongation > self.crack_min_elongation && luminance < self.crack_max_luminance {
            ClassLabel::Crack
        } else if saturation < self.conmod_max_saturation
            && (self.conmod_luminance[0]..=self.conmod_luminance[1]).contains(&luminance)
            && (self.conmod_area[0]..=self.conmod_area[1]).contains(&area)
        {
            ClassLabel::Conmod
        } else if r > g + self.litter_margin && g > b + self.litter_margin {
            ClassLabel::Litter
        } else if luminance < self.dip_max_luminance && elongation < self.dip_max_elongation {
            ClassLabel::Dip
        } else {
            return other;
        };
        Classification { label, confidence: self.confidence }
    }
}

pub fn classify_mask(descriptor: &[f64], classifier: &dyn MaskClassifier) -> Classification {
    classifier.classify(descriptor)
}
