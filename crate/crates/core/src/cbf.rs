//! Control barrier function rows for collision avoidance, connectivity
//! maintenance and occlusion avoidance.
//!
//! Every row acts on the global command `u = [V; ω]` and reads `A·u ≤ b`. Agents
//! are single integrators, so no row touches the angular block. Each builder
//! only needs positions, so an agent can assemble its rows from its own state,
//! its neighbors' positions and the obstacle map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::world::Obstacle;

/// Clamp applied to the cosine of the occlusion angle.
pub const COS_CLAMP: f64 = 1e-6;
/// Below this occlusion angle the gradient row is replaced by an escape row.
pub const ESCAPE_ANGLE: f64 = 1e-3;
const MIN_NORM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CbfError {
    #[error("consideration distance {d_s} must exceed the safety radius {r_s}")]
    DegenerateRange { r_s: f64, d_s: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("invalid CBF parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbfParams {
    pub r_s: f64,
    pub r_c: f64,
    pub d_s: f64,
    #[serde(deserialize_with = "crate::geometry::de_angle")]
    pub theta_star: f64,
    pub gamma_s: f64,
    pub gamma_c: f64,
    pub gamma_o: f64,
    pub alpha_v: f64,
    pub alpha_omega: f64,
}

impl Default for CbfParams {
    fn default() -> Self {
        Self {
            r_s: 2.0,
            r_c: 20.0,
            d_s: 20.0,
            theta_star: std::f64::consts::PI / 6.0,
            gamma_s: 3.0,
            gamma_c: 1.0,
            gamma_o: 0.1,
            alpha_v: 10.0,
            alpha_omega: 0.6,
        }
    }
}

/// Smallest `γ_s` for which the collision rows stay feasible under the speed
/// bound: `4 α_v R_s / (D_s² − R_s²)`.
pub fn gamma_s_lower_bound(p: &CbfParams) -> Result<f64, CbfError> {
    if !(p.d_s > p.r_s) {
        return Err(CbfError::DegenerateRange { r_s: p.r_s, d_s: p.d_s });
    }
    Ok(4.0 * p.alpha_v * p.r_s / (p.d_s * p.d_s - p.r_s * p.r_s))
}

impl CbfParams {
    pub fn validate(&self) -> Result<(), CbfError> {
        let bad = |m: String| Err(CbfError::InvalidParams(m));
        if !(self.r_s > 0.0) {
            return bad("R_s must be positive".into());
        }
        if !(self.d_s <= self.r_c) {
            return bad(format!("D_s = {} must not exceed R_c = {}", self.d_s, self.r_c));
        }
        let bound = gamma_s_lower_bound(self)?;
        if !(self.gamma_s >= bound) {
            return bad(format!(
                "gamma_s = {} is below the feasibility bound {bound}",
                self.gamma_s
            ));
        }
        if !(self.theta_star > 0.0 && self.theta_star < std::f64::consts::FRAC_PI_2) {
            return bad("theta_star must lie in (0, π/2)".into());
        }
        if !(self.gamma_c > 0.0 && self.gamma_o > 0.0) {
            return bad("gamma_c and gamma_o must be positive".into());
        }
        if !(self.alpha_v > 0.0 && self.alpha_omega > 0.0) {
            return bad("speed bounds must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Safety,
    Connectivity,
    Occlusion,
}

impl ConstraintKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConstraintKind::Safety => "safety",
            ConstraintKind::Connectivity => "connectivity",
            ConstraintKind::Occlusion => "occlusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partner {
    Agent(usize),
    Obstacle(usize),
}

impl std::fmt::Display for Partner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Partner::Agent(j) => write!(f, "agent{j}"),
            Partner::Obstacle(j) => write!(f, "obstacle{j}"),
        }
    }
}

/// One admissible-control halfspace `a·u ≤ b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfspaceConstraint {
    pub a: [f64; 6],
    pub b: f64,
    pub kind: ConstraintKind,
    /// Barrier value at the current configuration.
    pub h: f64,
    pub partner: Partner,
    /// True for the occlusion escape row used on a degenerate sight line.
    pub escape: bool,
}

impl HalfspaceConstraint {
    fn velocity_row(v: Vec3, b: f64, kind: ConstraintKind, h: f64, partner: Partner) -> Self {
        Self {
            a: [v.x, v.y, v.z, 0.0, 0.0, 0.0],
            b,
            kind,
            h,
            partner,
            escape: false,
        }
    }

    pub fn velocity_block(&self) -> Vec3 {
        Vec3::new(self.a[0], self.a[1], self.a[2])
    }

    pub fn lhs(&self, u: &[f64; 6]) -> f64 {
        self.a.iter().zip(u).map(|(a, x)| a * x).sum()
    }

    /// `b − a·u`; non-negative when the row holds.
    pub fn slack(&self, u: &[f64; 6]) -> f64 {
        self.b - self.lhs(u)
    }
}

/// Collision row between agents, carrying half of the decay budget:
/// `h = ‖p_i − p_j‖² − R_s²`, `a = −2(p_i − p_j)`, `b = ½ γ_s h`.
pub fn collision_constraint(p_i: &Vec3, p_j: &Vec3, j: usize, params: &CbfParams) -> HalfspaceConstraint {
    let d = p_i - p_j;
    let h = d.norm_squared() - params.r_s * params.r_s;
    HalfspaceConstraint::velocity_row(
        -2.0 * d,
        0.5 * params.gamma_s * h,
        ConstraintKind::Safety,
        h,
        Partner::Agent(j),
    )
}

/// Collision row against a static obstacle treated as a point at the box
/// center with the safety radius grown by the box circumradius. The obstacle
/// does not move, so the agent takes the whole budget.
pub fn obstacle_collision_constraint(
    p_i: &Vec3,
    obstacle: &Obstacle,
    j: usize,
    params: &CbfParams,
) -> HalfspaceConstraint {
    let d = p_i - obstacle.center;
    let r = params.r_s + obstacle.circumradius();
    let h = d.norm_squared() - r * r;
    HalfspaceConstraint::velocity_row(
        -2.0 * d,
        params.gamma_s * h,
        ConstraintKind::Safety,
        h,
        Partner::Obstacle(j),
    )
}

/// Connectivity row: `h = R_c² − ‖p_i − p_j‖²`, `a = 2(p_i − p_j)`, `b = ½ γ_c h`.
pub fn connectivity_constraint(p_i: &Vec3, p_j: &Vec3, j: usize, params: &CbfParams) -> HalfspaceConstraint {
    let d = p_i - p_j;
    let h = params.r_c * params.r_c - d.norm_squared();
    HalfspaceConstraint::velocity_row(
        2.0 * d,
        0.5 * params.gamma_c * h,
        ConstraintKind::Connectivity,
        h,
        Partner::Agent(j),
    )
}

fn raw_cosine(a: &Vec3, n: &Vec3) -> Result<f64, CbfError> {
    let (na, nn) = (a.norm(), n.norm());
    if na < MIN_NORM || nn < MIN_NORM {
        return Err(CbfError::DegenerateGeometry("zero-length obstacle or target ray"));
    }
    Ok((a.dot(n) / (na * nn)).clamp(-1.0, 1.0))
}

fn clamped_cosine(a: &Vec3, n: &Vec3) -> Result<f64, CbfError> {
    Ok(raw_cosine(a, n)?.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP))
}

/// Angle between the ray to the obstacle `p_o − p_i` and the ray to the target `n`.
pub fn occlusion_angle(p_i: &Vec3, p_o: &Vec3, n: &Vec3) -> Result<f64, CbfError> {
    Ok(clamped_cosine(&(p_o - p_i), n)?.acos())
}

/// Occlusion row `h = θ − θ*` with the target ray `n` held fixed.
///
/// With `a = p_o − p`, `x = cos θ` and `g = n/(‖a‖‖n‖) − a x/‖a‖²`, the row is
/// `A = −g/√(1 − x²)`, `b = γ_o h`. When `θ` is below [`ESCAPE_ANGLE`] the
/// gradient is unreliable and the row only forbids approaching the obstacle.
pub fn occlusion_constraint(
    p_i: &Vec3,
    p_o: &Vec3,
    n: &Vec3,
    j: usize,
    params: &CbfParams,
) -> Result<HalfspaceConstraint, CbfError> {
    let a = p_o - p_i;
    let raw = raw_cosine(&a, n)?;
    let x = raw.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
    let theta = x.acos();
    let h = theta - params.theta_star;
    let na = a.norm();
    if raw.acos() < ESCAPE_ANGLE {
        let mut row =
            HalfspaceConstraint::velocity_row(a / na, 0.0, ConstraintKind::Occlusion, h, Partner::Obstacle(j));
        row.escape = true;
        return Ok(row);
    }
    let nn = n.norm();
    let s = (1.0 - x * x).sqrt();
    let g = n / (na * nn) - a * (x / (na * na));
    Ok(HalfspaceConstraint::velocity_row(
        -g / s,
        params.gamma_o * h,
        ConstraintKind::Occlusion,
        h,
        Partner::Obstacle(j),
    ))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSets {
    /// Agents within `D_s`.
    pub safety_agents: Vec<usize>,
    /// Obstacles whose grown safety disc is within `D_s`.
    pub safety_obstacles: Vec<usize>,
    /// Agents within `R_c`.
    pub connectivity: Vec<usize>,
    /// Obstacles closer than the target.
    pub occlusion: Vec<usize>,
}

/// Neighbor sets of the agent at `p_i` from neighbor positions `(id, p_j)`,
/// the obstacle map and the agent's ray to the target `n`.
pub fn neighbor_sets(
    p_i: &Vec3,
    neighbors: &[(usize, Vec3)],
    obstacles: &[Obstacle],
    n: &Vec3,
    params: &CbfParams,
) -> NeighborSets {
    let mut out = NeighborSets::default();
    for (j, p_j) in neighbors {
        let d = (p_i - p_j).norm();
        if d <= params.d_s {
            out.safety_agents.push(*j);
        }
        if d <= params.r_c {
            out.connectivity.push(*j);
        }
    }
    let range = n.norm();
    for (j, o) in obstacles.iter().enumerate() {
        let d = (o.center - p_i).norm();
        if d <= params.d_s + o.circumradius() {
            out.safety_obstacles.push(j);
        }
        if d <= range {
            out.occlusion.push(j);
        }
    }
    out
}

/// All rows for one agent.
pub fn build_constraints(
    p_i: &Vec3,
    neighbors: &[(usize, Vec3)],
    obstacles: &[Obstacle],
    n: &Vec3,
    params: &CbfParams,
) -> Vec<HalfspaceConstraint> {
    let sets = neighbor_sets(p_i, neighbors, obstacles, n, params);
    let pos = |j: usize| {
        neighbors
            .iter()
            .find(|(k, _)| *k == j)
            .map(|(_, p)| *p)
            .expect("neighbor listed")
    };
    let mut rows = Vec::new();
    for &j in &sets.safety_agents {
        rows.push(collision_constraint(p_i, &pos(j), j, params));
    }
    for &j in &sets.safety_obstacles {
        rows.push(obstacle_collision_constraint(p_i, &obstacles[j], j, params));
    }
    for &j in &sets.connectivity {
        rows.push(connectivity_constraint(p_i, &pos(j), j, params));
    }
    for &j in &sets.occlusion {
        if let Ok(row) = occlusion_constraint(p_i, &obstacles[j].center, n, j, params) {
            rows.push(row);
        }
    }
    rows
}
