//! Ground-truth world: single-integrator UAVs, a scripted target and static
//! box obstacles, advanced synchronously with forward Euler.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControlInputGlobal;
use crate::geometry::{camera_rotation, wrap_angle, Mat3, Vec3};

/// Integration step used by the whole stack (80 Hz).
pub const DEFAULT_DT: f64 = 1.0 / 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec3,
    pub yaw: f64,
    /// Camera-to-global rotation, rebuilt from `yaw` on every step.
    pub r_cg: Mat3,
}

impl AgentState {
    pub fn new(position: Vec3, yaw: f64) -> Self {
        let yaw = wrap_angle(yaw);
        Self {
            position,
            yaw,
            r_cg: camera_rotation(yaw),
        }
    }
}

/// Advances an agent by one Euler step of `ṗ = V`, `yaw' = ω_z`.
pub fn step_agent(a: &AgentState, u: &ControlInputGlobal, dt: f64) -> AgentState {
    debug_assert!(dt > 0.0);
    let mut position = a.position + u.velocity * dt;
    position.z = position.z.max(0.0);
    AgentState::new(position, a.yaw + u.omega.z * dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub heading: f64,
}

/// One piece of the scripted target motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    /// Constant speed along the current heading.
    Straight { duration: f64, speed: f64 },
    /// Constant speed with constant lateral acceleration, i.e. a heading rate of
    /// `lateral_accel / speed`. Positive values turn left.
    Turn {
        duration: f64,
        speed: f64,
        lateral_accel: f64,
    },
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match *self {
            Segment::Straight { duration, .. } | Segment::Turn { duration, .. } => duration,
        }
    }

    pub fn speed(&self) -> f64 {
        match *self {
            Segment::Straight { speed, .. } | Segment::Turn { speed, .. } => speed,
        }
    }

    pub fn heading_rate(&self) -> f64 {
        match *self {
            Segment::Straight { .. } => 0.0,
            Segment::Turn {
                speed, lateral_accel, ..
            } => {
                if speed.abs() < 1e-12 {
                    0.0
                } else {
                    lateral_accel / speed
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScript {
    pub position: Vec3,
    /// Initial heading in radians.
    #[serde(deserialize_with = "crate::geometry::de_angle")]
    pub heading: f64,
    pub segments: Vec<Segment>,
}

impl TargetScript {
    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(Segment::duration).sum()
    }

    /// Segment active at time `t`, or `None` once the script has run out.
    pub fn segment_at(&self, t: f64) -> Option<&Segment> {
        // Tolerance absorbs the rounding in t = k * dt at segment boundaries.
        let mut end = 0.0;
        for seg in &self.segments {
            end += seg.duration();
            if t + 1e-9 < end {
                return Some(seg);
            }
        }
        None
    }

    pub fn initial_state(&self) -> TargetState {
        let speed = self.segments.first().map_or(0.0, Segment::speed);
        TargetState {
            position: self.position,
            velocity: Vec3::new(self.heading.cos(), self.heading.sin(), 0.0) * speed,
            heading: wrap_angle(self.heading),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("target script exhausted at t = {time}; holding last velocity")]
pub struct ScriptExhausted {
    pub time: f64,
    /// The state advanced with the last velocity held.
    pub held: TargetState,
}

/// Advances the target over `[t, t + dt)` following `script`.
pub fn step_target(
    state: &TargetState,
    t: f64,
    dt: f64,
    script: &TargetScript,
) -> Result<TargetState, ScriptExhausted> {
    let Some(seg) = script.segment_at(t) else {
        let held = TargetState {
            position: state.position + state.velocity * dt,
            ..*state
        };
        return Err(ScriptExhausted { time: t, held });
    };
    let speed = seg.speed();
    // Velocity over this step follows the current heading; the new heading
    // takes effect on the next step.
    let velocity = Vec3::new(state.heading.cos(), state.heading.sin(), 0.0) * speed;
    let position = state.position + velocity * dt;
    let heading = wrap_angle(state.heading + seg.heading_rate() * dt);
    let next_speed = script.segment_at(t + dt).map_or(speed, Segment::speed);
    Ok(TargetState {
        position,
        velocity: Vec3::new(heading.cos(), heading.sin(), 0.0) * next_speed,
        heading,
    })
}

/// Axis-aligned box obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec3,
    #[serde(default = "unit_half_extents")]
    pub half_extents: Vec3,
}

fn unit_half_extents() -> Vec3 {
    Vec3::repeat(0.5)
}

impl Obstacle {
    pub fn unit_box(center: Vec3) -> Self {
        Self {
            center,
            half_extents: Vec3::repeat(0.5),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let d = (p - self.center).abs();
        d.x <= self.half_extents.x && d.y <= self.half_extents.y && d.z <= self.half_extents.z
    }

    /// Radius of the sphere circumscribing the box.
    pub fn circumradius(&self) -> f64 {
        self.half_extents.norm()
    }

    /// Euclidean distance from `p` to the box (zero inside).
    pub fn distance(&self, p: &Vec3) -> f64 {
        let d = (p - self.center).abs() - self.half_extents;
        d.map(|c| c.max(0.0)).norm()
    }
}

/// True iff the closed segment `p0 → p1` touches the closed box (slab method).
pub fn segment_box_intersects(p0: &Vec3, p1: &Vec3, obstacle: &Obstacle) -> bool {
    let lo = obstacle.center - obstacle.half_extents;
    let hi = obstacle.center + obstacle.half_extents;
    let d = p1 - p0;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for k in 0..3 {
        if d[k] == 0.0 {
            if p0[k] < lo[k] || p0[k] > hi[k] {
                return false;
            }
        } else {
            let inv = 1.0 / d[k];
            let mut ta = (lo[k] - p0[k]) * inv;
            let mut tb = (hi[k] - p0[k]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub tick: u64,
    pub time: f64,
    pub dt: f64,
    pub agents: Vec<AgentState>,
    pub target: TargetState,
    pub obstacles: Vec<Obstacle>,
}

impl WorldState {
    pub fn new(dt: f64, agents: Vec<AgentState>, target: TargetState, obstacles: Vec<Obstacle>) -> Self {
        Self {
            tick: 0,
            time: 0.0,
            dt,
            agents,
            target,
            obstacles,
        }
    }

    /// Applies one command per agent and advances the target. Returns whether the
    /// target script had run out during this step.
    pub fn step(&mut self, commands: &[ControlInputGlobal], script: &TargetScript) -> bool {
        assert_eq!(commands.len(), self.agents.len());
        for (a, u) in self.agents.iter_mut().zip(commands) {
            *a = step_agent(a, u, self.dt);
        }
        let (target, exhausted) = match step_target(&self.target, self.time, self.dt, script) {
            Ok(t) => (t, false),
            Err(e) => (e.held, true),
        };
        self.target = target;
        self.tick += 1;
        self.time = self.tick as f64 * self.dt;
        exhausted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn straight(duration: f64, speed: f64) -> Segment {
        Segment::Straight { duration, speed }
    }

    #[test]
    fn step_agent_examples() {
        let a = AgentState::new(Vec3::zeros(), 0.0);
        let u = ControlInputGlobal::new(Vec3::new(1.0, 0.0, 0.0), Vec3::zeros());
        let b = step_agent(&a, &u, 0.0125);
        assert_eq!(b.position, Vec3::new(0.0125, 0.0, 0.0));
        let still = step_agent(&a, &ControlInputGlobal::zero(), 0.0125);
        assert_eq!(still, a);

        let mut s = a;
        for _ in 0..80 {
            s = step_agent(&s, &u, DEFAULT_DT);
        }
        assert!((s.position - Vec3::new(1.0, 0.0, 0.0)).norm() <= 1e-12);
    }

    #[test]
    fn yaw_rate_rotates_camera() {
        let a = AgentState::new(Vec3::new(0.0, 0.0, 1.0), 0.0);
        let u = ControlInputGlobal::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 0.5));
        let b = step_agent(&a, &u, 0.1);
        assert_relative_eq!(b.yaw, 0.05);
        assert_eq!(b.r_cg, camera_rotation(0.05));
    }

    #[test]
    fn straight_segment_reaches_five_meters() {
        let script = TargetScript {
            position: Vec3::zeros(),
            heading: 0.0,
            segments: vec![straight(10.0, 0.5)],
        };
        let mut s = script.initial_state();
        for k in 0..800 {
            s = step_target(&s, k as f64 * DEFAULT_DT, DEFAULT_DT, &script).unwrap();
        }
        assert!((s.position - Vec3::new(5.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn turn_segment_heading_rate() {
        let seg = Segment::Turn {
            duration: 5.0,
            speed: 0.5,
            lateral_accel: -0.1,
        };
        assert_relative_eq!(seg.heading_rate(), -0.2);
        let script = TargetScript {
            position: Vec3::zeros(),
            heading: 0.0,
            segments: vec![seg],
        };
        let mut s = script.initial_state();
        for k in 0..400 {
            s = step_target(&s, k as f64 * DEFAULT_DT, DEFAULT_DT, &script).unwrap();
        }
        assert_relative_eq!(s.heading, -1.0, epsilon = 1e-9);
        assert_relative_eq!(s.velocity.norm(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_speed_is_stationary() {
        let script = TargetScript {
            position: Vec3::new(1.0, 2.0, 0.0),
            heading: 0.4,
            segments: vec![straight(5.0, 0.0)],
        };
        let mut s = script.initial_state();
        for k in 0..100 {
            s = step_target(&s, k as f64 * DEFAULT_DT, DEFAULT_DT, &script).unwrap();
        }
        assert_eq!(s.position, Vec3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn exhausted_script_holds_velocity() {
        let script = TargetScript {
            position: Vec3::zeros(),
            heading: 0.0,
            segments: vec![straight(1.0, 0.5)],
        };
        let mut s = script.initial_state();
        for k in 0..80 {
            s = step_target(&s, k as f64 * DEFAULT_DT, DEFAULT_DT, &script).unwrap();
        }
        let err = step_target(&s, 1.0, DEFAULT_DT, &script).unwrap_err();
        assert_relative_eq!(err.held.position.x, s.position.x + 0.5 * DEFAULT_DT);
        assert_eq!(err.held.velocity, s.velocity);
    }

    #[test]
    fn straight_speed_exact() {
        let script = TargetScript {
            position: Vec3::zeros(),
            heading: 0.0,
            segments: vec![
                straight(2.0, 0.5),
                Segment::Turn {
                    duration: 2.0,
                    speed: 0.5,
                    lateral_accel: 0.1,
                },
                straight(2.0, 0.5),
            ],
        };
        let mut s = script.initial_state();
        for k in 0..480 {
            s = step_target(&s, k as f64 * DEFAULT_DT, DEFAULT_DT, &script).unwrap();
            assert!((s.velocity.norm() - 0.5).abs() <= 1e-12);
        }
    }

    #[test]
    fn segment_box_examples() {
        let b = Obstacle::unit_box(Vec3::new(5.0, 0.0, 1.0));
        assert!(segment_box_intersects(
            &Vec3::new(0.0, 0.0, 1.0),
            &Vec3::new(10.0, 0.0, 1.0),
            &b
        ));
        assert!(!segment_box_intersects(
            &Vec3::new(0.0, 0.0, 10.0),
            &Vec3::new(10.0, 0.0, 10.0),
            &b
        ));
        // Endpoint exactly on the face x = 4.5.
        assert!(segment_box_intersects(
            &Vec3::new(0.0, 0.0, 1.0),
            &Vec3::new(4.5, 0.0, 1.0),
            &b
        ));
        assert!(!segment_box_intersects(
            &Vec3::new(0.0, 0.0, 1.0),
            &Vec3::new(4.49, 0.0, 1.0),
            &b
        ));
    }

    #[test]
    fn obstacle_distance() {
        let b = Obstacle::unit_box(Vec3::zeros());
        assert_eq!(b.distance(&Vec3::new(0.2, 0.1, 0.0)), 0.0);
        assert_relative_eq!(b.distance(&Vec3::new(2.5, 0.0, 0.0)), 2.0);
        assert_relative_eq!(b.distance(&Vec3::new(1.5, 1.5, 0.0)), 2.0f64.sqrt());
        assert_relative_eq!(b.circumradius(), 0.75f64.sqrt());
    }

    fn sampled_oracle(p0: &Vec3, p1: &Vec3, b: &Obstacle) -> bool {
        (0..=10_000).any(|k| b.contains(&(p0 + (p1 - p0) * (k as f64 / 10_000.0))))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn slab_matches_sampling(ax in -3.0..3.0f64, ay in -3.0..3.0f64, az in -3.0..3.0f64,
                                 bx in -3.0..3.0f64, by in -3.0..3.0f64, bz in -3.0..3.0f64,
                                 hx in 0.2..1.5f64, hy in 0.2..1.5f64, hz in 0.2..1.5f64) {
            let b = Obstacle { center: Vec3::zeros(), half_extents: Vec3::new(hx, hy, hz) };
            let p0 = Vec3::new(ax, ay, az);
            let p1 = Vec3::new(bx, by, bz);
            let exact = segment_box_intersects(&p0, &p1, &b);
            let sampled = sampled_oracle(&p0, &p1, &b);
            if sampled {
                prop_assert!(exact);
            } else if exact {
                // A miss by sampling must be a graze thinner than the sample spacing:
                // the slightly inflated box must then be hit by sampling.
                let step = (p1 - p0).norm() / 10_000.0;
                let fat = Obstacle { half_extents: b.half_extents.add_scalar(step), ..b };
                prop_assert!(sampled_oracle(&p0, &p1, &fat));
            }
        }
    }
}
