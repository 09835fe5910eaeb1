//! Sliding-window polynomial fit of the estimated target trajectory.
//!
//! A quadratic is fitted per axis by least squares over the recent estimated
//! positions; its first and second derivatives at the newest sample are the
//! velocity and acceleration fed to the tracker.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Vec3;

pub const MIN_SAMPLES: usize = 4;
pub const MIN_SPAN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MotionError {
    #[error("sample time {0} does not advance the window")]
    NonIncreasingTime(f64),
    #[error("window has too few samples for a fit")]
    InsufficientSamples { latest_velocity: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSample {
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionWindow {
    samples: VecDeque<MotionSample>,
    length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionEstimate {
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

impl MotionWindow {
    pub fn new(length: f64) -> Self {
        Self {
            samples: VecDeque::new(),
            length,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: MotionSample) -> Result<(), MotionError> {
        if let Some(last) = self.samples.back() {
            if !(sample.t > last.t) {
                return Err(MotionError::NonIncreasingTime(sample.t));
            }
        }
        self.samples.push_back(sample);
        while let Some(first) = self.samples.front() {
            if first.t < sample.t - self.length - 1e-9 {
                self.samples.pop_front();
            } else {
                break;
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> impl Iterator<Item = &MotionSample> {
        self.samples.iter()
    }
}

impl MotionError {
    /// Fallback used when no fit is available: latest velocity, zero acceleration.
    pub fn fallback(&self) -> MotionEstimate {
        match *self {
            MotionError::InsufficientSamples { latest_velocity } => MotionEstimate {
                velocity: latest_velocity,
                acceleration: Vec3::zeros(),
            },
            MotionError::NonIncreasingTime(_) => MotionEstimate {
                velocity: Vec3::zeros(),
                acceleration: Vec3::zeros(),
            },
        }
    }
}

/// Quadratic least-squares fit of the window evaluated at its newest sample.
pub fn fit_motion(window: &MotionWindow) -> Result<MotionEstimate, MotionError> {
    let Some(newest) = window.samples.back() else {
        return Err(MotionError::InsufficientSamples {
            latest_velocity: Vec3::zeros(),
        });
    };
    let oldest = window.samples.front().unwrap();
    if window.len() < MIN_SAMPLES || newest.t - oldest.t < MIN_SPAN - 1e-9 {
        return Err(MotionError::InsufficientSamples {
            latest_velocity: newest.velocity,
        });
    }
    // Times relative to the newest sample: r(τ) = c0 + c1 τ + c2 τ².
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = [Vector3::<f64>::zeros(); 3];
    for s in &window.samples {
        let tau = s.t - newest.t;
        let phi = Vector3::new(1.0, tau, tau * tau);
        ata += phi * phi.transpose();
        for axis in 0..3 {
            atb[axis] += phi * s.position[axis];
        }
    }
    let chol = ata.cholesky().ok_or(MotionError::InsufficientSamples {
        latest_velocity: newest.velocity,
    })?;
    let mut velocity = Vec3::zeros();
    let mut acceleration = Vec3::zeros();
    for axis in 0..3 {
        let c = chol.solve(&atb[axis]);
        velocity[axis] = c[1];
        acceleration[axis] = 2.0 * c[2];
    }
    Ok(MotionEstimate { velocity, acceleration })
}
