//! Synthetic detector standing in for a learned bounding-box detector.
//!
//! Measurements are generated from ground truth: the target center is projected
//! through a pinhole camera and perturbed with Gaussian noise. A detection is
//! dropped when the target is behind the camera, projects outside the image, or
//! the camera-to-target segment passes through an obstacle. Nothing else can
//! invalidate a detection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    relative_angle_with_heading, relative_position, wrap_angle, GeometryError, HeadingTracker, RelativePosition, Vec3,
};
use crate::world::{segment_box_intersects, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 381.36,
            fy: 381.36,
            cu: 320.0,
            cv: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if !(self.cu > 0.0 && self.cu < self.width && self.cv > 0.0 && self.cv < self.height) {
            return Err("principal point must lie inside the image".into());
        }
        Ok(())
    }

    /// Normalized coordinates `(x1, x2)` of a pixel.
    pub fn normalize(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cu) / self.fx, (v - self.cv) / self.fy)
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        (0.0..=self.width).contains(&u) && (0.0..=self.height).contains(&v)
    }
}

/// Pinhole projection of a camera-frame point.
pub fn project(r: &RelativePosition, k: &CameraIntrinsics) -> Result<(f64, f64), GeometryError> {
    if r.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(r.z));
    }
    Ok((k.fx * (r.x / r.z) + k.cu, k.fy * (r.y / r.z) + k.cv))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma_px: f64,
    pub sigma_d: f64,
    pub sigma_psi: f64,
    pub sigma_gps: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_px: 2.0,
            sigma_d: 0.1,
            sigma_psi: 0.05,
            sigma_gps: 0.02,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            sigma_px: 0.0,
            sigma_d: 0.0,
            sigma_psi: 0.0,
            sigma_gps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.sigma_px, self.sigma_d, self.sigma_psi, self.sigma_gps];
        if all.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err("noise standard deviations must be finite and non-negative".into())
        }
    }
}

/// Why a detection was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dropout {
    BehindCamera,
    OutsideImage,
    Occluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub valid: bool,
    pub dropout: Option<Dropout>,
    /// Bounding-box center, pixels.
    pub u: f64,
    pub v: f64,
    /// Depth along the optical axis, meters.
    pub d: f64,
    pub psi: f64,
    /// Camera position from GPS, global frame.
    pub r_c: Vec3,
}

impl Detection {
    pub fn invalid(reason: Dropout, r_c: Vec3) -> Self {
        Self {
            valid: false,
            dropout: Some(reason),
            u: f64::NAN,
            v: f64::NAN,
            d: f64::NAN,
            psi: f64::NAN,
            r_c,
        }
    }
}

/// Seeded per-agent noise source.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, agent: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(agent as u64 + 1);
        Self { rng }
    }

    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        sigma * z
    }
}

/// Ground-truth relative angle for agent `agent_index`, using `heading` to
/// resolve a stationary target.
pub fn true_relative_angle(world: &WorldState, agent_index: usize, heading: &HeadingTracker) -> f64 {
    let p = world.agents[agent_index].position;
    relative_angle_with_heading(&p, &world.target.position, heading.heading())
}

/// Synthesizes agent `agent_index`'s detection of the target.
///
/// Seven Gaussian draws are consumed on every call, valid or not, so the noise
/// sequence does not depend on the dropout pattern.
pub fn detect(
    world: &WorldState,
    agent_index: usize,
    k: &CameraIntrinsics,
    noise: &NoiseSpec,
    heading: &HeadingTracker,
    stream: &mut NoiseStream,
) -> Detection {
    let agent = &world.agents[agent_index];
    let n = [
        stream.gaussian(noise.sigma_px),
        stream.gaussian(noise.sigma_px),
        stream.gaussian(noise.sigma_d),
        stream.gaussian(noise.sigma_psi),
        stream.gaussian(noise.sigma_gps),
        stream.gaussian(noise.sigma_gps),
        stream.gaussian(noise.sigma_gps),
    ];
    let r_c = agent.position + Vec3::new(n[4], n[5], n[6]);

    let rel_global = relative_position(&world.target.position, &agent.position).to_vec();
    let rel = RelativePosition::from_vec(&(agent.r_cg.transpose() * rel_global));
    let Ok((u, v)) = project(&rel, k) else {
        return Detection::invalid(Dropout::BehindCamera, r_c);
    };
    if !k.in_image(u, v) {
        return Detection::invalid(Dropout::OutsideImage, r_c);
    }
    if world
        .obstacles
        .iter()
        .any(|o| segment_box_intersects(&agent.position, &world.target.position, o))
    {
        return Detection::invalid(Dropout::Occluded, r_c);
    }
    let psi = true_relative_angle(world, agent_index, heading);
    Detection {
        valid: true,
        dropout: None,
        u: u + n[0],
        v: v + n[1],
        d: rel.z + n[2],
        psi: wrap_angle(psi + n[3]),
        r_c,
    }
}
