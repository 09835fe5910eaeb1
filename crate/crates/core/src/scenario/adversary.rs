//! Adversarial closed-loop checks of barrier forward invariance.
//!
//! One single-integrator agent is driven by a nominal controller that tries
//! to break one barrier: it flies at a partner (collision), away from a
//! partner (connectivity), or toward the point that puts an obstacle on its
//! sight line (occlusion). The command passes through [`filter`] and the
//! state is advanced with explicit Euler steps. The run records the smallest
//! barrier value seen.
//!
//! Connectivity runs push straight away from the partner. Sliding along the
//! connectivity sphere would leak `‖V‖²dt²` per Euler step, since the safe set
//! is the convex side; for the other two barriers the unsafe set is convex and
//! tangential motion only raises `h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cbf::{
    collision_constraint, connectivity_constraint, neighbor_sets, obstacle_collision_constraint, occlusion_angle,
    occlusion_constraint, CbfParams, HalfspaceConstraint,
};
use crate::control::ControlInputGlobal;
use crate::filter::{filter, FilterStatus};
use crate::geometry::Vec3;
use crate::world::Obstacle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BarrierKind {
    Collision,
    Connectivity,
    Occlusion,
}

impl BarrierKind {
    pub const ALL: [BarrierKind; 3] = [
        BarrierKind::Collision,
        BarrierKind::Connectivity,
        BarrierKind::Occlusion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BarrierKind::Collision => "collision",
            BarrierKind::Connectivity => "connectivity",
            BarrierKind::Occlusion => "occlusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversaryConfig {
    pub duration: f64,
    pub dt: f64,
    pub params: CbfParams,
    /// Occlusion runs only. When true the target keeps a fixed offset from
    /// the agent, so the sight-line vector `n` is constant as the barrier
    /// derivation assumes. When false the target is static and `n` rotates
    /// as the agent moves.
    pub co_moving_target: bool,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            dt: 1.0 / 80.0,
            params: CbfParams::default(),
            co_moving_target: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversaryOutcome {
    pub seed: u64,
    pub initial_h: f64,
    /// Smallest barrier value over every tick, including the last.
    pub min_h: f64,
    pub emergency_stops: usize,
    /// Ticks on which the filter changed the nominal command.
    pub active_ticks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteSummary {
    pub kind: BarrierKind,
    pub runs: usize,
    pub worst: AdversaryOutcome,
    pub emergency_stops: usize,
    /// Runs in which the filter had to act at least once.
    pub engaged_runs: usize,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Velocity of magnitude `speed` toward `aim`, or zero on arrival.
fn aim_at(p: &Vec3, aim: &Vec3, speed: f64) -> Vec3 {
    let d = aim - p;
    let n = d.norm();
    if n < 1e-12 {
        Vec3::zeros()
    } else {
        d * (speed / n)
    }
}

struct Setup {
    p: Vec3,
    speed: f64,
    partner: Vec3,
    obstacle: Option<Obstacle>,
    /// Occlusion runs: sight-line vector (co-moving) or target position (static).
    ray: Vec3,
    aim_offset: Vec3,
}

fn setup(kind: BarrierKind, rng: &mut ChaCha8Rng, cfg: &AdversaryConfig) -> Setup {
    let prm = &cfg.params;
    let speed = rng.gen_range(0.5..1.5) * prm.alpha_v;
    let origin = Vec3::zeros();
    match kind {
        BarrierKind::Collision => {
            let obstacle = rng.gen_bool(0.5).then(|| Obstacle::unit_box(origin));
            let r = prm.r_s + obstacle.map_or(0.0, |o| o.circumradius());
            let dist = rng.gen_range(r..prm.d_s);
            Setup {
                p: random_unit(rng) * dist,
                speed,
                partner: origin,
                obstacle,
                ray: Vec3::zeros(),
                aim_offset: random_unit(rng) * rng.gen_range(0.0..0.5 * prm.r_s),
            }
        }
        BarrierKind::Connectivity => Setup {
            p: random_unit(rng) * rng.gen_range(prm.r_s..prm.r_c),
            speed,
            partner: origin,
            obstacle: None,
            ray: Vec3::zeros(),
            aim_offset: Vec3::zeros(),
        },
        BarrierKind::Occlusion => loop {
            let range = rng.gen_range(5.0..40.0);
            let n = random_unit(rng) * range;
            let clear = prm.r_s + Obstacle::unit_box(origin).circumradius();
            let p = random_unit(rng) * rng.gen_range(clear..range);
            let Ok(theta) = occlusion_angle(&p, &origin, &n) else {
                continue;
            };
            if theta < prm.theta_star {
                continue;
            }
            let ray = if cfg.co_moving_target { n } else { p + n };
            // Aim at a point behind the obstacle on the line along n.
            let behind = rng.gen_range(0.2..0.9) * range;
            break Setup {
                p,
                speed,
                partner: origin,
                obstacle: Some(Obstacle::unit_box(origin)),
                ray,
                aim_offset: -n.normalize() * behind,
            };
        },
    }
}

/// Rows and barrier value for the current position. `h` is `None` when the
/// partner is outside the range in which the barrier is enforced.
fn rows_at(kind: BarrierKind, s: &Setup, p: &Vec3, cfg: &AdversaryConfig) -> (Vec<HalfspaceConstraint>, Option<f64>) {
    let prm = &cfg.params;
    match kind {
        BarrierKind::Collision => {
            let row = match &s.obstacle {
                Some(o) => {
                    let sets = neighbor_sets(p, &[], std::slice::from_ref(o), &Vec3::zeros(), prm);
                    (!sets.safety_obstacles.is_empty()).then(|| obstacle_collision_constraint(p, o, 0, prm))
                }
                None => {
                    let sets = neighbor_sets(p, &[(1, s.partner)], &[], &Vec3::zeros(), prm);
                    (!sets.safety_agents.is_empty()).then(|| collision_constraint(p, &s.partner, 1, prm))
                }
            };
            let r = prm.r_s + s.obstacle.map_or(0.0, |o| o.circumradius());
            (row.into_iter().collect(), Some((p - s.partner).norm_squared() - r * r))
        }
        BarrierKind::Connectivity => {
            let row = connectivity_constraint(p, &s.partner, 1, prm);
            let h = row.h;
            (vec![row], Some(h))
        }
        BarrierKind::Occlusion => {
            let o = s.obstacle.expect("occlusion runs carry an obstacle");
            let n = if cfg.co_moving_target { s.ray } else { s.ray - p };
            let sets = neighbor_sets(p, &[], std::slice::from_ref(&o), &n, prm);
            if sets.occlusion.is_empty() {
                return (Vec::new(), None);
            }
            // The agent also carries its collision row for the obstacle;
            // without it the adversary flies through the cone apex at the
            // obstacle center, where the angle is undefined.
            let mut rows = Vec::new();
            if !sets.safety_obstacles.is_empty() {
                rows.push(obstacle_collision_constraint(p, &o, 0, prm));
            }
            match occlusion_constraint(p, &o.center, &n, 0, prm) {
                Ok(row) => {
                    let h = row.h;
                    rows.push(row);
                    (rows, Some(h))
                }
                Err(_) => (rows, None),
            }
        }
    }
}

fn nominal(kind: BarrierKind, s: &Setup, p: &Vec3, cfg: &AdversaryConfig) -> Vec3 {
    match kind {
        BarrierKind::Collision => aim_at(p, &(s.partner + s.aim_offset), s.speed),
        BarrierKind::Connectivity => -aim_at(p, &s.partner, s.speed),
        BarrierKind::Occlusion => {
            let n = if cfg.co_moving_target { s.ray } else { s.ray - p };
            let aim = s.partner - n.normalize() * s.aim_offset.norm();
            aim_at(p, &aim, s.speed)
        }
    }
}

/// One adversarial run. The seed fixes the initial geometry and the nominal speed.
pub fn adversarial_run(kind: BarrierKind, seed: u64, cfg: &AdversaryConfig) -> AdversaryOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = setup(kind, &mut rng, cfg);
    let ticks = (cfg.duration / cfg.dt).round() as usize;
    let mut p = s.p;
    let mut out = AdversaryOutcome {
        seed,
        initial_h: f64::NAN,
        min_h: f64::INFINITY,
        emergency_stops: 0,
        active_ticks: 0,
    };
    for k in 0..=ticks {
        let (rows, h) = rows_at(kind, &s, &p, cfg);
        if let Some(h) = h {
            if k == 0 {
                out.initial_h = h;
            }
            out.min_h = out.min_h.min(h);
        }
        if k == ticks {
            break;
        }
        let u_hat = ControlInputGlobal::new(nominal(kind, &s, &p, cfg), Vec3::zeros());
        let f = filter(&u_hat, &rows, &cfg.params);
        match f.status {
            FilterStatus::EmergencyStop => out.emergency_stops += 1,
            FilterStatus::Unmodified => {}
            _ => out.active_ticks += 1,
        }
        p += f.u.velocity * cfg.dt;
    }
    out
}

/// `runs` adversarial runs with seeds `first_seed..first_seed + runs`,
/// reduced to the worst barrier value.
pub fn adversarial_suite(kind: BarrierKind, runs: usize, first_seed: u64, cfg: &AdversaryConfig) -> SuiteSummary {
    let outcomes: Vec<AdversaryOutcome> = (0..runs as u64)
        .into_par_iter()
        .map(|i| adversarial_run(kind, first_seed + i, cfg))
        .collect();
    let worst = outcomes
        .iter()
        .copied()
        .min_by(|a, b| a.min_h.total_cmp(&b.min_h))
        .expect("at least one run");
    SuiteSummary {
        kind,
        runs,
        worst,
        emergency_stops: outcomes.iter().map(|o| o.emergency_stops).sum(),
        engaged_runs: outcomes.iter().filter(|o| o.active_ticks > 0).count(),
    }
}
