//! Geodesy on a reference ellipsoid (Vincenty direct and inverse) and the
//! conversion between geographic coordinates and a local east-north-up frame.
//!
//! Azimuths are in degrees, measured clockwise from true north, in `[0, 360)`.
//! The local frame is built from geodesic distance and azimuth to the frame
//! origin (an azimuthal equidistant layout), which is accurate at plot scale.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Convergence threshold on the auxiliary longitude / arc length, radians.
const CONVERGENCE: f64 = 1e-12;
const MAX_ITERATIONS: usize = 200;

/// Radius around a [`LocalFrame`] origin inside which the local conversion is valid.
pub const VALIDITY_RADIUS_M: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("vincenty iteration did not converge after {iterations} iterations (nearly antipodal points)")]
    NonConvergence { iterations: usize },
    #[error("point is {distance:.1} m from the frame origin, beyond the {limit:.0} m validity radius")]
    OutOfRange { distance: f64, limit: f64 },
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("invalid ellipsoid: {0}")]
    InvalidEllipsoid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub semi_major_axis: f64,
    pub flattening: f64,
}

impl Ellipsoid {
    pub const WGS84: Ellipsoid = Ellipsoid {
        semi_major_axis: 6_378_137.0,
        flattening: 1.0 / 298.257_223_563,
    };

    pub fn new(semi_major_axis: f64, flattening: f64) -> Result<Self, GeoError> {
        if !(semi_major_axis.is_finite() && semi_major_axis > 0.0) {
            return Err(GeoError::InvalidEllipsoid(format!(
                "semi-major axis must be positive, got {semi_major_axis}"
            )));
        }
        if !(0.0..1.0).contains(&flattening) {
            return Err(GeoError::InvalidEllipsoid(format!(
                "flattening must lie in [0, 1), got {flattening}"
            )));
        }
        Ok(Self { semi_major_axis, flattening })
    }

    pub fn semi_minor_axis(&self) -> f64 {
        self.semi_major_axis * (1.0 - self.flattening)
    }

    /// First eccentricity squared.
    pub fn e2(&self) -> f64 {
        self.flattening * (2.0 - self.flattening)
    }
}

impl Default for Ellipsoid {
    fn default() -> Self {
        Self::WGS84
    }
}

/// Geographic position: decimal degrees and meters above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoordinate {
    pub latitude: f64,
    pub longitude: f64,
    pub height: f64,
}

impl GeoCoordinate {
    /// Validates ranges. Longitude `-180` is folded onto `180`.
    pub fn new(latitude: f64, longitude: f64, height: f64) -> Result<Self, GeoError> {
        if !(latitude.is_finite() && (-90.0..=90.0).contains(&latitude)) {
            return Err(GeoError::InvalidCoordinate(format!("latitude {latitude} outside [-90, 90]")));
        }
        if !(longitude.is_finite() && (-180.0..=180.0).contains(&longitude)) {
            return Err(GeoError::InvalidCoordinate(format!("longitude {longitude} outside (-180, 180]")));
        }
        if !height.is_finite() {
            return Err(GeoError::InvalidCoordinate(format!("height {height} is not finite")));
        }
        let longitude = if longitude == -180.0 { 180.0 } else { longitude };
        Ok(Self { latitude, longitude, height })
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        Self::new(self.latitude, self.longitude, self.height).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inverse {
    /// Geodesic distance on the ellipsoid, meters.
    pub distance: f64,
    /// Azimuth at `a` of the geodesic towards `b`.
    pub forward_azimuth: f64,
    /// Azimuth at `b` of the geodesic back towards `a`.
    pub reverse_azimuth: f64,
}

fn normalize_degrees(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360.0 for tiny negative inputs
    if d >= 360.0 { 0.0 } else { d }
}

fn wrap_pi(rad: f64) -> f64 {
    let mut r = (rad + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

fn reduced_latitude(lat: f64, f: f64) -> (f64, f64) {
    let u = ((1.0 - f) * lat.sin()).atan2(lat.cos());
    u.sin_cos()
}

/// Solves the inverse geodesic problem between `a` and `b`.
///
/// Coincident points yield distance 0 with both azimuths reported as 0.
/// Heights are ignored. The result is exactly symmetric: swapping `a` and
/// `b` returns the same distance and swaps the two azimuths.
pub fn vincenty_inverse(a: &GeoCoordinate, b: &GeoCoordinate, e: &Ellipsoid) -> Result<Inverse, GeoError> {
    let swap = (b.latitude, b.longitude) < (a.latitude, a.longitude);
    let (p, q) = if swap { (b, a) } else { (a, b) };
    let r = inverse_ordered(p, q, e)?;
    Ok(if swap {
        Inverse {
            distance: r.distance,
            forward_azimuth: r.reverse_azimuth,
            reverse_azimuth: r.forward_azimuth,
        }
    } else {
        r
    })
}

struct Sphere {
    sin_sigma: f64,
    cos_sigma: f64,
    sigma: f64,
    sin_alpha: f64,
    cos_sq_alpha: f64,
    cos_2sigma_m: f64,
    sin_lambda: f64,
    cos_lambda: f64,
}

#[allow(clippy::many_single_char_names)]
fn inverse_ordered(a: &GeoCoordinate, b: &GeoCoordinate, e: &Ellipsoid) -> Result<Inverse, GeoError> {
    let f = e.flattening;
    let major = e.semi_major_axis;
    let minor = e.semi_minor_axis();

    let lon_diff = wrap_pi((b.longitude - a.longitude).to_radians());
    let (sin_u1, cos_u1) = reduced_latitude(a.latitude.to_radians(), f);
    let (sin_u2, cos_u2) = reduced_latitude(b.latitude.to_radians(), f);

    // sphere quantities for a trial longitude difference on the auxiliary sphere
    let evaluate = |lambda: f64| -> Option<Sphere> {
        let (sin_lambda, cos_lambda) = lambda.sin_cos();
        let t1 = cos_u2 * sin_lambda;
        let t2 = cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lambda;
        let sin_sigma = (t1 * t1 + t2 * t2).sqrt();
        if sin_sigma == 0.0 {
            return None;
        }
        let cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lambda;
        let sin_alpha = cos_u1 * cos_u2 * sin_lambda / sin_sigma;
        let cos_sq_alpha = 1.0 - sin_alpha * sin_alpha;
        // equatorial line: cos_sq_alpha = 0
        let cos_2sigma_m = if cos_sq_alpha != 0.0 {
            cos_sigma - 2.0 * sin_u1 * sin_u2 / cos_sq_alpha
        } else {
            0.0
        };
        Some(Sphere {
            sin_sigma,
            cos_sigma,
            sigma: sin_sigma.atan2(cos_sigma),
            sin_alpha,
            cos_sq_alpha,
            cos_2sigma_m,
            sin_lambda,
            cos_lambda,
        })
    };
    let next_lambda = |q: &Sphere| {
        let c = f / 16.0 * q.cos_sq_alpha * (4.0 + f * (4.0 - 3.0 * q.cos_sq_alpha));
        lon_diff
            + (1.0 - c)
                * f
                * q.sin_alpha
                * (q.sigma
                    + c * q.sin_sigma * (q.cos_2sigma_m + c * q.cos_sigma * (-1.0 + 2.0 * q.cos_2sigma_m * q.cos_2sigma_m)))
    };
    let coincident = Inverse { distance: 0.0, forward_azimuth: 0.0, reverse_azimuth: 0.0 };

    let mut lambda = lon_diff;
    let mut iterations = 0;
    let q = loop {
        let Some(q) = evaluate(lambda) else { return Ok(coincident) };
        let previous = lambda;
        lambda = next_lambda(&q);
        iterations += 1;
        if (lambda - previous).abs() < CONVERGENCE {
            // re-evaluate so every term belongs to the final lambda
            match evaluate(lambda) {
                Some(q) => break q,
                None => return Ok(coincident),
            }
        }
        if iterations >= MAX_ITERATIONS || !lambda.is_finite() {
            return Err(GeoError::NonConvergence { iterations });
        }
    };
    let Sphere { sin_sigma, cos_sigma, sigma, cos_sq_alpha, cos_2sigma_m, sin_lambda, cos_lambda, .. } = q;

    let u_sq = cos_sq_alpha * (major * major - minor * minor) / (minor * minor);
    let big_a = 1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)));
    let big_b = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)));
    let delta_sigma = big_b
        * sin_sigma
        * (cos_2sigma_m
            + big_b / 4.0
                * (cos_sigma * (-1.0 + 2.0 * cos_2sigma_m * cos_2sigma_m)
                    - big_b / 6.0
                        * cos_2sigma_m
                        * (-3.0 + 4.0 * sin_sigma * sin_sigma)
                        * (-3.0 + 4.0 * cos_2sigma_m * cos_2sigma_m)));
    let distance = minor * big_a * (sigma - delta_sigma);

    let alpha1 = (cos_u2 * sin_lambda).atan2(cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lambda);
    let alpha2 = (cos_u1 * sin_lambda).atan2(-sin_u1 * cos_u2 + cos_u1 * sin_u2 * cos_lambda);

    Ok(Inverse {
        distance,
        forward_azimuth: normalize_degrees(alpha1.to_degrees()),
        reverse_azimuth: normalize_degrees(alpha2.to_degrees() + 180.0),
    })
}

/// Solves the direct geodesic problem: the point reached from `a` after
/// travelling `distance` meters along the geodesic leaving at `azimuth`
/// (degrees clockwise from north). The height of `a` is carried over.
pub fn vincenty_direct(a: &GeoCoordinate, azimuth: f64, distance: f64, e: &Ellipsoid) -> Result<GeoCoordinate, GeoError> {
    if !(distance.is_finite() && distance >= 0.0) {
        return Err(GeoError::InvalidCoordinate(format!("distance must be non-negative, got {distance}")));
    }
    if !azimuth.is_finite() {
        return Err(GeoError::InvalidCoordinate(format!("azimuth {azimuth} is not finite")));
    }
    if distance == 0.0 {
        return Ok(*a);
    }
    let f = e.flattening;
    let major = e.semi_major_axis;
    let minor = e.semi_minor_axis();

    let (sin_alpha1, cos_alpha1) = azimuth.to_radians().sin_cos();
    let (sin_u1, cos_u1) = reduced_latitude(a.latitude.to_radians(), f);
    let sigma1 = sin_u1.atan2(cos_u1 * cos_alpha1);
    let sin_alpha = cos_u1 * sin_alpha1;
    let cos_sq_alpha = 1.0 - sin_alpha * sin_alpha;
    let u_sq = cos_sq_alpha * (major * major - minor * minor) / (minor * minor);
    let big_a = 1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)));
    let big_b = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)));

    let base = distance / (minor * big_a);
    let mut sigma = base;
    let mut iterations = 0;
    let (sin_sigma, cos_sigma, cos_2sigma_m) = loop {
        let cos_2sigma_m = (2.0 * sigma1 + sigma).cos();
        let (sin_sigma, cos_sigma) = sigma.sin_cos();
        let delta_sigma = big_b
            * sin_sigma
            * (cos_2sigma_m
                + big_b / 4.0
                    * (cos_sigma * (-1.0 + 2.0 * cos_2sigma_m * cos_2sigma_m)
                        - big_b / 6.0
                            * cos_2sigma_m
                            * (-3.0 + 4.0 * sin_sigma * sin_sigma)
                            * (-3.0 + 4.0 * cos_2sigma_m * cos_2sigma_m)));
        let previous = sigma;
        sigma = base + delta_sigma;
        iterations += 1;
        if (sigma - previous).abs() < CONVERGENCE {
            let cos_2sigma_m = (2.0 * sigma1 + sigma).cos();
            let (sin_sigma, cos_sigma) = sigma.sin_cos();
            break (sin_sigma, cos_sigma, cos_2sigma_m);
        }
        if iterations >= MAX_ITERATIONS {
            return Err(GeoError::NonConvergence { iterations });
        }
    };

    let tmp = sin_u1 * sin_sigma - cos_u1 * cos_sigma * cos_alpha1;
    let lat2 = (sin_u1 * cos_sigma + cos_u1 * sin_sigma * cos_alpha1)
        .atan2((1.0 - f) * (sin_alpha * sin_alpha + tmp * tmp).sqrt());
    let lambda = (sin_sigma * sin_alpha1).atan2(cos_u1 * cos_sigma - sin_u1 * sin_sigma * cos_alpha1);
    let c = f / 16.0 * cos_sq_alpha * (4.0 + f * (4.0 - 3.0 * cos_sq_alpha));
    let l = lambda
        - (1.0 - c)
            * f
            * sin_alpha
            * (sigma + c * sin_sigma * (cos_2sigma_m + c * cos_sigma * (-1.0 + 2.0 * cos_2sigma_m * cos_2sigma_m)));
    let lon2 = wrap_pi(a.longitude.to_radians() + l);
    let mut longitude = lon2.to_degrees();
    if longitude <= -180.0 {
        longitude += 360.0;
    }
    Ok(GeoCoordinate { latitude: lat2.to_degrees(), longitude, height: a.height })
}

/// Point in a local east-north-up frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct LocalPoint {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl LocalPoint {
    pub const ORIGIN: LocalPoint = LocalPoint { east: 0.0, north: 0.0, up: 0.0 };

    pub fn new(east: f64, north: f64, up: f64) -> Self {
        Self { east, north, up }
    }

    pub fn to_vector(self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.east, self.north, self.up)
    }

    pub fn from_vector(v: &nalgebra::Vector3<f64>) -> Self {
        Self { east: v.x, north: v.y, up: v.z }
    }

    pub fn is_finite(&self) -> bool {
        self.east.is_finite() && self.north.is_finite() && self.up.is_finite()
    }

    pub fn horizontal_distance(&self, other: &LocalPoint) -> f64 {
        (self.east - other.east).hypot(self.north - other.north)
    }

    pub fn distance(&self, other: &LocalPoint) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

impl From<[f64; 3]> for LocalPoint {
    fn from(v: [f64; 3]) -> Self {
        Self { east: v[0], north: v[1], up: v[2] }
    }
}

impl From<LocalPoint> for [f64; 3] {
    fn from(p: LocalPoint) -> Self {
        [p.east, p.north, p.up]
    }
}

/// East-north-up working frame anchored at a surveyed origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: GeoCoordinate,
    #[serde(default)]
    pub ellipsoid: Ellipsoid,
}

impl LocalFrame {
    pub fn new(origin: GeoCoordinate) -> Result<Self, GeoError> {
        origin.validate()?;
        Ok(Self { origin, ellipsoid: Ellipsoid::WGS84 })
    }

    pub fn geo_to_local(&self, p: &GeoCoordinate) -> Result<LocalPoint, GeoError> {
        geo_to_local(self, p)
    }

    pub fn local_to_geo(&self, q: &LocalPoint) -> Result<GeoCoordinate, GeoError> {
        local_to_geo(self, q)
    }
}

pub fn geo_to_local(frame: &LocalFrame, p: &GeoCoordinate) -> Result<LocalPoint, GeoError> {
    let inv = vincenty_inverse(&frame.origin, p, &frame.ellipsoid)?;
    if inv.distance > VALIDITY_RADIUS_M {
        return Err(GeoError::OutOfRange { distance: inv.distance, limit: VALIDITY_RADIUS_M });
    }
    let (sin_az, cos_az) = inv.forward_azimuth.to_radians().sin_cos();
    Ok(LocalPoint {
        east: inv.distance * sin_az,
        north: inv.distance * cos_az,
        up: p.height - frame.origin.height,
    })
}

pub fn local_to_geo(frame: &LocalFrame, q: &LocalPoint) -> Result<GeoCoordinate, GeoError> {
    if !q.is_finite() {
        return Err(GeoError::InvalidCoordinate(format!("local point {q:?} is not finite")));
    }
    let distance = q.east.hypot(q.north);
    if distance > VALIDITY_RADIUS_M {
        return Err(GeoError::OutOfRange { distance, limit: VALIDITY_RADIUS_M });
    }
    let azimuth = normalize_degrees(q.east.atan2(q.north).to_degrees());
    let mut g = vincenty_direct(&frame.origin, azimuth, distance, &frame.ellipsoid)?;
    g.height = frame.origin.height + q.up;
    Ok(g)
}
