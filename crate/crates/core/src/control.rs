//! Control command types shared by the tracker, the safety filter and the world.

use nalgebra::{Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Camera-frame command `u = (v_cx, v_cy, v_cz, ω_cy)`.
///
/// Rotation about the camera `X` and `Z` axes is held at zero; yaw is commanded
/// through `ω_cy` (camera `Y` points down, so `ω_cy > 0` turns the camera
/// clockwise seen from above).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wy: f64,
}

impl ControlInput {
    pub fn new(vx: f64, vy: f64, vz: f64, wy: f64) -> Self {
        Self { vx, vy, vz, wy }
    }

    pub fn velocity(&self) -> Vec3 {
        Vec3::new(self.vx, self.vy, self.vz)
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.vx, self.vy, self.vz, self.wy)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Global-frame command `(u)^g = [V; ω]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInputGlobal {
    pub velocity: Vec3,
    pub omega: Vec3,
}

impl ControlInputGlobal {
    pub fn new(velocity: Vec3, omega: Vec3) -> Self {
        Self { velocity, omega }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.velocity.x,
            self.velocity.y,
            self.velocity.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        )
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            velocity: Vec3::new(x[0], x[1], x[2]),
            omega: Vec3::new(x[3], x[4], x[5]),
        }
    }
}
