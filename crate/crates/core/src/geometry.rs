//! Frames, rotations and the algebraic maps between 3-D relative geometry and
//! image features.
//!
//! Conventions used throughout the crate:
//!
//! * The global frame is right-handed with `z` up.
//! * The camera frame has `X` pointing right in the image, `Y` pointing down and
//!   `Z` along the optical axis. The camera is mounted with zero pitch and roll,
//!   so a yaw angle fully determines its attitude (see [`camera_rotation`]).
//! * Matrices are [`nalgebra::Matrix3`], indexed `(row, col)`. `R_cg` maps camera
//!   coordinates into global coordinates: `v_global = R_cg * v_camera`.
//! * All angles are radians and angle differences are wrapped to `(-π, π]`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Planar target speed below which the heading is considered undefined.
pub const HEADING_SPEED_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-positive depth {0} (target behind or at the camera)")]
    NonPositiveDepth(f64),
    #[error("target planar speed {0} too small to define a heading")]
    DegenerateHeading(f64),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
}

/// Target position relative to the camera, `r_{q/c} = [X, Y, Z]`, camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePosition {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl RelativePosition {
    pub fn from_vec(v: &Vec3) -> Self {
        Self { x: v.x, y: v.y, z: v.z }
    }

    pub fn to_vec(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().norm()
    }
}

/// Image features and relative angle `s = (x1, x2, x3, ψ)`.
///
/// `x1 = X/Z`, `x2 = Y/Z`, `x3 = 1/Z` and `ψ` is the relative angle between the
/// target heading and the target-to-camera bearing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureState {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub psi: f64,
}

impl FeatureState {
    pub fn new(x1: f64, x2: f64, x3: f64, psi: f64) -> Self {
        Self { x1, x2, x3, psi }
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.x1, self.x2, self.x3, self.psi)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.x2, self.x3, self.psi]
    }

    /// Relative position in the camera frame implied by the features.
    pub fn relative_position(&self) -> Result<RelativePosition, GeometryError> {
        if self.x3 <= 0.0 {
            return Err(GeometryError::NonPositiveDepth(self.x3));
        }
        let z = 1.0 / self.x3;
        Ok(RelativePosition {
            x: self.x1 * z,
            y: self.x2 * z,
            z,
        })
    }

    /// Componentwise difference `self - other`, with the ψ component taken along
    /// the shortest arc.
    pub fn error_to(&self, other: &FeatureState) -> FeatureState {
        FeatureState {
            x1: self.x1 - other.x1,
            x2: self.x2 - other.x2,
            x3: self.x3 - other.x3,
            psi: angle_diff(self.psi, other.psi),
        }
    }
}

/// `r_q - r_c`, componentwise. Both vectors must be expressed in the same frame.
pub fn relative_position(r_q: &Vec3, r_c: &Vec3) -> RelativePosition {
    RelativePosition::from_vec(&(r_q - r_c))
}

/// `(X/Z, Y/Z, 1/Z)`.
pub fn features_from_relative(r: &RelativePosition) -> Result<(f64, f64, f64), GeometryError> {
    if r.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(r.z));
    }
    Ok((r.x / r.z, r.y / r.z, 1.0 / r.z))
}

/// Euclidean camera-to-target range recovered from the features,
/// `sqrt(1 + x1² + x2²) / x3`.
pub fn range_from_features(s: &FeatureState) -> Result<f64, GeometryError> {
    if s.x3 <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(s.x3));
    }
    Ok((1.0 + s.x1 * s.x1 + s.x2 * s.x2).sqrt() / s.x3)
}

/// Wraps an angle to `(-π, π]`.
/// Parses an angle: a plain number is radians; a `deg` or `rad` suffix selects
/// the unit explicitly (`"30deg"`, `"0.5rad"`).
pub fn parse_angle(text: &str) -> Result<f64, String> {
    let t = text.trim();
    let (num, scale) = if let Some(v) = t.strip_suffix("deg") {
        (v, PI / 180.0)
    } else if let Some(v) = t.strip_suffix("rad") {
        (v, 1.0)
    } else {
        (t, 1.0)
    };
    num.trim()
        .parse::<f64>()
        .map(|v| v * scale)
        .map_err(|_| format!("invalid angle {text:?}"))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AngleRepr {
    Number(f64),
    Text(String),
}

impl AngleRepr {
    fn radians<E: serde::de::Error>(self) -> Result<f64, E> {
        match self {
            AngleRepr::Number(v) => Ok(v),
            AngleRepr::Text(s) => parse_angle(&s).map_err(E::custom),
        }
    }
}

/// Serde helper for angle fields; see [`parse_angle`].
pub fn de_angle<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    AngleRepr::deserialize(d)?.radians()
}

/// Optional variant of [`de_angle`].
pub fn de_opt_angle<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    Option::<AngleRepr>::deserialize(d)?.map(AngleRepr::radians).transpose()
}

pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Shortest-arc difference `a - b` wrapped to `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Heading of a planar velocity, or `DegenerateHeading` when it is too slow to
/// define one.
pub fn planar_heading(v: &Vec3) -> Result<f64, GeometryError> {
    let speed = v.x.hypot(v.y);
    if speed < HEADING_SPEED_EPS {
        return Err(GeometryError::DegenerateHeading(speed));
    }
    Ok(v.y.atan2(v.x))
}

/// Relative angle ψ between the target heading and the bearing from the target
/// to the camera, using planar (global-frame) components.
pub fn relative_angle(p_c: &Vec3, p_q: &Vec3, v_q: &Vec3) -> Result<f64, GeometryError> {
    let heading = planar_heading(v_q)?;
    Ok(relative_angle_with_heading(p_c, p_q, heading))
}

/// Same as [`relative_angle`] with an explicit target heading.
pub fn relative_angle_with_heading(p_c: &Vec3, p_q: &Vec3, heading: f64) -> f64 {
    let bearing = (p_c.y - p_q.y).atan2(p_c.x - p_q.x);
    wrap_angle(bearing - heading)
}

/// Holds the last well-defined heading of a target whose speed may drop to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadingTracker {
    last: f64,
}

impl HeadingTracker {
    pub fn new(initial_heading: f64) -> Self {
        Self {
            last: wrap_angle(initial_heading),
        }
    }

    pub fn update(&mut self, v: &Vec3) -> f64 {
        if let Ok(h) = planar_heading(v) {
            self.last = h;
        }
        self.last
    }

    pub fn heading(&self) -> f64 {
        self.last
    }
}

/// Skew-symmetric matrix with `hat(w) * v = w × v`.
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Camera-to-global rotation for a yaw-only camera mount.
///
/// The optical axis (camera `Z`) points along `(cos yaw, sin yaw, 0)`, camera `X`
/// is to its right and camera `Y` points straight down.
pub fn camera_rotation(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    Mat3::from_columns(&[Vec3::new(s, -c, 0.0), Vec3::new(0.0, 0.0, -1.0), Vec3::new(c, s, 0.0)])
}

/// True if `r` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    let e = r.transpose() * r - Mat3::identity();
    e.abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
}
