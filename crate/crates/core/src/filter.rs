//! Minimally invasive safety filter.
//!
//! Projects the tracker's command onto the intersection of the CBF halfspaces
//! and the speed limits `‖V‖ ≤ α_v`, `‖ω‖ ≤ α_ω`. The norm balls are not
//! polyhedral; they are enforced by adding tangent cutting planes at the current
//! iterate until the solution lies inside the balls. If that does not settle,
//! the velocity is scaled radially and, should a row break, the QP is re-solved
//! with per-axis limits `α/√3`, which lie inside the balls.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cbf::{CbfParams, ConstraintKind, HalfspaceConstraint};
use crate::control::{ControlInput, ControlInputGlobal};
use crate::geometry::{Mat3, Vec3};
use crate::qp::{solve_qp, QpError, QpProblem};

/// Maximum number of cutting-plane rounds per norm ball.
pub const MAX_CUTS: usize = 12;
/// Relative tolerance on the norm bounds.
pub const NORM_TOL: f64 = 1e-9;
const ROW_TOL: f64 = 1e-9;

/// Rotates a camera-frame command into the global frame.
pub fn augment(u: &ControlInput, r_cg: &Mat3) -> ControlInputGlobal {
    ControlInputGlobal::new(r_cg * u.velocity(), r_cg * Vec3::new(0.0, u.wy, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    /// The nominal command already satisfied every constraint.
    Unmodified,
    Solved,
    /// Cutting planes did not settle; radial scaling or tightened limits were used.
    Fallback,
    /// No admissible command was found; the agent is stopped.
    EmergencyStop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub u: ControlInputGlobal,
    /// `b − a·u` per input row, in input order.
    pub slacks: Vec<f64>,
    pub status: FilterStatus,
    pub cuts: usize,
}

impl FilterOutput {
    pub fn min_slack(&self, rows: &[HalfspaceConstraint], kind: ConstraintKind) -> Option<f64> {
        rows.iter()
            .zip(&self.slacks)
            .filter(|(r, _)| r.kind == kind)
            .map(|(_, s)| *s)
            .fold(None, |m, s| Some(m.map_or(s, |m: f64| m.min(s))))
    }
}

fn to_array(u: &ControlInputGlobal) -> [f64; 6] {
    let v = u.to_vector();
    [v[0], v[1], v[2], v[3], v[4], v[5]]
}

fn slacks(rows: &[HalfspaceConstraint], u: &ControlInputGlobal) -> Vec<f64> {
    let x = to_array(u);
    rows.iter().map(|r| r.slack(&x)).collect()
}

fn inside_balls(u: &ControlInputGlobal, p: &CbfParams) -> bool {
    u.velocity.norm() <= p.alpha_v * (1.0 + NORM_TOL) && u.omega.norm() <= p.alpha_omega * (1.0 + NORM_TOL)
}

fn solve(
    target: &DVector<f64>,
    rows: &[[f64; 6]],
    rhs: &[f64],
    limit_v: f64,
    limit_w: f64,
) -> Result<ControlInputGlobal, QpError> {
    let a = DMatrix::from_fn(rows.len(), 6, |i, j| rows[i][j]);
    let b = DVector::from_column_slice(rhs);
    let upper = DVector::from_column_slice(&[limit_v, limit_v, limit_v, limit_w, limit_w, limit_w]);
    let qp = QpProblem::projection(target, a, b).with_bounds(-&upper, upper);
    let sol = solve_qp(&qp)?;
    Ok(ControlInputGlobal::from_slice(sol.x.as_slice()))
}

/// Closest command to `u_hat` satisfying every row and the speed limits.
pub fn filter(u_hat: &ControlInputGlobal, rows: &[HalfspaceConstraint], params: &CbfParams) -> FilterOutput {
    let finish = |u: ControlInputGlobal, status, cuts| FilterOutput {
        slacks: slacks(rows, &u),
        u,
        status,
        cuts,
    };

    let nominal_ok = inside_balls(u_hat, params) && slacks(rows, u_hat).iter().all(|s| *s >= 0.0);
    if nominal_ok {
        return finish(*u_hat, FilterStatus::Unmodified, 0);
    }

    // One violated row and a nominal inside the balls: the halfspace projection
    // is the exact optimum whenever it stays admissible.
    if inside_balls(u_hat, params) {
        let s = slacks(rows, u_hat);
        let mut violated = s.iter().enumerate().filter(|(_, s)| **s < 0.0);
        if let (Some((k, sk)), None) = (violated.next(), violated.next()) {
            let a = rows[k].a;
            let nn: f64 = a.iter().map(|v| v * v).sum();
            if nn > 0.0 {
                let x = to_array(u_hat);
                let step = -sk / nn;
                let p: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x - step * a).collect();
                let u = ControlInputGlobal::from_slice(&p);
                if inside_balls(&u, params) && slacks(rows, &u).iter().all(|s| *s >= -ROW_TOL) {
                    return finish(u, FilterStatus::Solved, 0);
                }
            }
        }
    }

    let target = u_hat.to_vector();
    let target = DVector::from_column_slice(target.as_slice());
    let mut a: Vec<[f64; 6]> = rows.iter().map(|r| r.a).collect();
    let mut b: Vec<f64> = rows.iter().map(|r| r.b).collect();
    let (av, aw) = (params.alpha_v, params.alpha_omega);

    // Seed each violated ball with the tangent plane along the nominal
    // direction; without other rows this is already the exact projection.
    let mut cuts = 0;
    let (nv, nw) = (u_hat.velocity.norm(), u_hat.omega.norm());
    if nv > av {
        let d = u_hat.velocity / nv;
        a.push([d.x, d.y, d.z, 0.0, 0.0, 0.0]);
        b.push(av);
        cuts += 1;
    }
    if nw > aw {
        let d = u_hat.omega / nw;
        a.push([0.0, 0.0, 0.0, d.x, d.y, d.z]);
        b.push(aw);
        cuts += 1;
    }
    let mut u = match solve(&target, &a, &b, av, aw) {
        Ok(u) => u,
        Err(_) => return finish(ControlInputGlobal::zero(), FilterStatus::EmergencyStop, 0),
    };
    while !inside_balls(&u, params) && cuts < 2 * MAX_CUTS {
        let (v, w) = (u.velocity.norm(), u.omega.norm());
        if v > av * (1.0 + NORM_TOL) {
            let d = u.velocity / v;
            a.push([d.x, d.y, d.z, 0.0, 0.0, 0.0]);
            b.push(av);
            cuts += 1;
        }
        if w > aw * (1.0 + NORM_TOL) {
            let d = u.omega / w;
            a.push([0.0, 0.0, 0.0, d.x, d.y, d.z]);
            b.push(aw);
            cuts += 1;
        }
        u = match solve(&target, &a, &b, av, aw) {
            Ok(u) => u,
            Err(_) => return finish(ControlInputGlobal::zero(), FilterStatus::EmergencyStop, cuts),
        };
    }
    if inside_balls(&u, params) {
        return finish(u, FilterStatus::Solved, cuts);
    }

    // Radial scaling, then tightened per-axis limits if a row breaks.
    let mut scaled = u;
    if scaled.velocity.norm() > av {
        scaled.velocity *= av / scaled.velocity.norm();
    }
    if scaled.omega.norm() > aw {
        scaled.omega *= aw / scaled.omega.norm();
    }
    if slacks(rows, &scaled).iter().all(|s| *s >= -ROW_TOL) {
        return finish(scaled, FilterStatus::Fallback, cuts);
    }
    let a: Vec<[f64; 6]> = rows.iter().map(|r| r.a).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.b).collect();
    let s3 = 3f64.sqrt();
    match solve(&target, &a, &b, av / s3, aw / s3) {
        Ok(u) => finish(u, FilterStatus::Fallback, cuts),
        Err(_) => finish(ControlInputGlobal::zero(), FilterStatus::EmergencyStop, cuts),
    }
}
