//! Feature-space NMPC with model-error compensation.
//!
//! The optimal control problem is transcribed by direct multiple shooting over
//! the forward-Euler discretization of the reduced feature dynamics and solved
//! by a Gauss-Newton SQP loop. Each SQP subproblem is an LQ problem with boxes:
//! it is first solved by a Riccati recursion ignoring the boxes, and only if
//! that step leaves a box is it re-solved as a condensed dense QP.
//!
//! `ψ` is handled in a local chart around the reference, so the horizon never
//! crosses the `±π` cut and the cost sees the shortest-arc error.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControlInput;
use crate::geometry::{angle_diff, wrap_angle, FeatureState, GeometryError, Vec3};
use crate::qp::{solve_qp, QpProblem};

pub type Vec4 = Vector4<f64>;
pub type Mat4 = Matrix4<f64>;

/// Merit-function weight on the shooting defects.
const MERIT_PENALTY: f64 = 1e3;
const MIN_STEP: f64 = 1e-4;
const BOX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NmpcError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("initial feature {component} = {value} lies outside its box beyond the relaxation margin")]
    InfeasibleInitialState { component: usize, value: f64 },
    #[error("invalid NMPC configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonals of the stage, control and terminal weights.
    pub q_s: [f64; 4],
    pub r_u: [f64; 4],
    pub w_s: [f64; 4],
    /// Feature box; the `ψ` entries bound the error to the reference.
    pub s_lower: [f64; 4],
    pub s_upper: [f64; 4],
    pub u_lower: [f64; 4],
    pub u_upper: [f64; 4],
    pub max_iterations: usize,
    pub tolerance: f64,
    /// How far outside its box (as a fraction of the box width) the measured
    /// initial state may lie before the problem is rejected.
    pub relax_margin: f64,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        use std::f64::consts::PI;
        let q = [1.0, 1.0, 100.0, 1.0];
        Self {
            horizon: 50,
            dt: 1.0 / 80.0,
            q_s: q,
            r_u: [0.02, 0.03, 0.01, 0.3],
            w_s: q,
            s_lower: [-0.84, -0.63, 0.07, -PI],
            s_upper: [0.84, 0.63, 1.0, PI],
            u_lower: [-10.0, -10.0, -10.0, -0.6],
            u_upper: [10.0, 10.0, 10.0, 0.6],
            max_iterations: 30,
            tolerance: 1e-6,
            relax_margin: 0.25,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<(), NmpcError> {
        let bad = |m: &str| Err(NmpcError::InvalidConfig(m.into()));
        if self.horizon == 0 {
            return bad("horizon must be at least one step");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.q_s.iter().chain(&self.w_s).any(|w| !(*w >= 0.0)) {
            return bad("state weights must be non-negative");
        }
        if self.r_u.iter().any(|w| !(*w > 0.0)) {
            return bad("control weights must be positive");
        }
        if (0..4).any(|i| self.s_lower[i] > self.s_upper[i] || self.u_lower[i] > self.u_upper[i]) {
            return bad("box lower bounds must not exceed upper bounds");
        }
        if self.s_lower[2] <= 0.0 {
            return bad("the inverse-depth box must exclude zero");
        }
        Ok(())
    }

    fn q(&self) -> Mat4 {
        Mat4::from_diagonal(&Vec4::from(self.q_s))
    }

    fn r(&self) -> Mat4 {
        Mat4::from_diagonal(&Vec4::from(self.r_u))
    }

    fn w(&self) -> Mat4 {
        Mat4::from_diagonal(&Vec4::from(self.w_s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub u: Vec<ControlInput>,
    pub s: Vec<FeatureState>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// SQP iterations that needed the dense QP.
    pub dense_steps: usize,
    pub max_defect: f64,
}

impl OcpSolution {
    /// The control sequence advanced by one step, repeating the last element.
    pub fn shifted_controls(&self) -> Vec<ControlInput> {
        let mut u: Vec<ControlInput> = self.u.iter().skip(1).copied().collect();
        u.push(*self.u.last().expect("non-empty horizon"));
        u
    }
}

fn flow(s: &Vec4, u: &Vec4, vq: &Vec3) -> Vec4 {
    let (x1, x2, x3) = (s[0], s[1], s[2]);
    let (wx, wy, wz, om) = (u[0] - vq.x, u[1] - vq.y, u[2] - vq.z, u[3]);
    let rho = (1.0 + x1 * x1 + x2 * x2).sqrt();
    Vec4::new(
        -x3 * wx + x1 * x3 * wz - (1.0 + x1 * x1) * om,
        -x3 * wy + x2 * x3 * wz - om * x1 * x2,
        x3 * x3 * wz - om * x1 * x3,
        wx * x3 / rho,
    )
}

fn flow_jacobians(s: &Vec4, u: &Vec4, vq: &Vec3) -> (Mat4, Mat4) {
    let (x1, x2, x3) = (s[0], s[1], s[2]);
    let (wx, wy, wz, om) = (u[0] - vq.x, u[1] - vq.y, u[2] - vq.z, u[3]);
    let rho2 = 1.0 + x1 * x1 + x2 * x2;
    let rho = rho2.sqrt();
    let rho3 = rho2 * rho;
    #[rustfmt::skip]
    let a = Mat4::new(
        x3 * wz - 2.0 * x1 * om, 0.0, -wx + x1 * wz, 0.0,
        -om * x2, x3 * wz - om * x1, -wy + x2 * wz, 0.0,
        -om * x3, 0.0, 2.0 * x3 * wz - om * x1, 0.0,
        -wx * x3 * x1 / rho3, -wx * x3 * x2 / rho3, wx / rho, 0.0,
    );
    #[rustfmt::skip]
    let b = Mat4::new(
        -x3, 0.0, x1 * x3, -(1.0 + x1 * x1),
        0.0, -x3, x2 * x3, -x1 * x2,
        0.0, 0.0, x3 * x3, -x1 * x3,
        x3 / rho, 0.0, 0.0, 0.0,
    );
    (a, b)
}

/// Time derivative of the features under camera command `u` with the target
/// moving at `v_q_cam` (camera frame).
pub fn reduced_dynamics(s: &FeatureState, u: &ControlInput, v_q_cam: &Vec3) -> Result<Vec4, GeometryError> {
    if s.x3 <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(s.x3));
    }
    Ok(flow(&s.to_vector(), &u.to_vector(), v_q_cam))
}

/// Continuous-time Jacobians `(∂f/∂s, ∂f/∂u)` of [`reduced_dynamics`].
pub fn dynamics_jacobians(s: &FeatureState, u: &ControlInput, v_q_cam: &Vec3) -> (Mat4, Mat4) {
    flow_jacobians(&s.to_vector(), &u.to_vector(), v_q_cam)
}

/// Desired features after compensating the model error `s_ukf − s_model`.
pub fn compensate_error(s_ukf: &FeatureState, s_model: &FeatureState, s_star: &FeatureState) -> FeatureState {
    let eps = s_ukf.error_to(s_model);
    FeatureState::new(
        s_star.x1 - eps.x1,
        s_star.x2 - eps.x2,
        s_star.x3 - eps.x3,
        wrap_angle(s_star.psi - eps.psi),
    )
}

/// Desired control sequence `u_{d,n} = u_d + n·dt·[Γ̂; 0]`.
pub fn desired_controls(u_d: &ControlInput, gamma_hat: &Vec3, horizon: usize, dt: f64) -> Vec<Vec4> {
    let g = Vec4::new(gamma_hat.x, gamma_hat.y, gamma_hat.z, 0.0);
    (0..horizon).map(|n| u_d.to_vector() + g * (n as f64 * dt)).collect()
}

fn target_velocity(ud: &Vec4) -> Vec3 {
    Vec3::new(ud[0], ud[1], ud[2])
}

struct Problem<'a> {
    cfg: &'a NmpcConfig,
    s0: Vec4,
    sd: Vec4,
    ud: Vec<Vec4>,
    s_lo: Vec4,
    s_hi: Vec4,
    u_lo: Vec4,
    u_hi: Vec4,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.cfg.horizon
    }

    fn step(&self, s: &Vec4, u: &Vec4, n: usize) -> Vec4 {
        s + flow(s, u, &target_velocity(&self.ud[n])) * self.cfg.dt
    }

    fn rollout(&self, u: &[Vec4]) -> Vec<Vec4> {
        let mut s = Vec::with_capacity(u.len() + 1);
        s.push(self.s0);
        for (n, un) in u.iter().enumerate() {
            let next = self.step(&s[n], un, n);
            s.push(next);
        }
        s
    }

    fn cost(&self, s: &[Vec4], u: &[Vec4]) -> f64 {
        let (q, r, w) = (self.cfg.q(), self.cfg.r(), self.cfg.w());
        let mut j = 0.0;
        for n in 0..self.n() {
            let e = s[n] - self.sd;
            let eu = u[n] - self.ud[n];
            j += e.dot(&(q * e)) + eu.dot(&(r * eu));
        }
        let e = s[self.n()] - self.sd;
        j + e.dot(&(w * e))
    }

    fn defects(&self, s: &[Vec4], u: &[Vec4]) -> Vec<Vec4> {
        (0..self.n()).map(|n| self.step(&s[n], &u[n], n) - s[n + 1]).collect()
    }

    fn merit(&self, s: &[Vec4], u: &[Vec4]) -> f64 {
        let d: f64 = self.defects(s, u).iter().map(|c| c.lp_norm(1)).sum();
        self.cost(s, u) + MERIT_PENALTY * d
    }

    fn within_boxes(&self, s: &[Vec4], u: &[Vec4], tol: f64) -> bool {
        let s_ok = s[1..]
            .iter()
            .all(|x| (0..4).all(|i| x[i] >= self.s_lo[i] - tol && x[i] <= self.s_hi[i] + tol));
        let u_ok = u
            .iter()
            .all(|x| (0..4).all(|i| x[i] >= self.u_lo[i] - tol && x[i] <= self.u_hi[i] + tol));
        s_ok && u_ok
    }

    fn linearize(&self, s: &[Vec4], u: &[Vec4]) -> (Vec<Mat4>, Vec<Mat4>, Vec<Vec4>) {
        let dt = self.cfg.dt;
        let mut a = Vec::with_capacity(self.n());
        let mut b = Vec::with_capacity(self.n());
        for n in 0..self.n() {
            let (fa, fb) = flow_jacobians(&s[n], &u[n], &target_velocity(&self.ud[n]));
            a.push(Mat4::identity() + fa * dt);
            b.push(fb * dt);
        }
        (a, b, self.defects(s, u))
    }

    /// Unconstrained LQ step by backward Riccati recursion.
    fn riccati(&self, s: &[Vec4], u: &[Vec4], a: &[Mat4], b: &[Mat4], c: &[Vec4]) -> (Vec<Vec4>, Vec<Vec4>) {
        let (q, r, w) = (self.cfg.q(), self.cfg.r(), self.cfg.w());
        let n = self.n();
        let mut p = w;
        let mut pv = w * (s[n] - self.sd);
        let mut gains = vec![(Mat4::zeros(), Vec4::zeros()); n];
        for k in (0..n).rev() {
            let pc = p * c[k] + pv;
            let huu = r + b[k].transpose() * p * b[k];
            let hus = b[k].transpose() * p * a[k];
            let hu = r * (u[k] - self.ud[k]) + b[k].transpose() * pc;
            let hss = q + a[k].transpose() * p * a[k];
            let hs = q * (s[k] - self.sd) + a[k].transpose() * pc;
            let chol = Cholesky::new(huu).expect("control weight is positive definite");
            let kk = -chol.solve(&hus);
            let kv = -chol.solve(&hu);
            p = hss + hus.transpose() * kk;
            p = (p + p.transpose()) * 0.5;
            pv = hs + hus.transpose() * kv;
            gains[k] = (kk, kv);
        }
        let mut ds = vec![Vec4::zeros(); n + 1];
        let mut du = vec![Vec4::zeros(); n];
        for k in 0..n {
            du[k] = gains[k].0 * ds[k] + gains[k].1;
            ds[k + 1] = a[k] * ds[k] + b[k] * du[k] + c[k];
        }
        (ds, du)
    }

    /// Box-constrained LQ step as a condensed QP over the control increments.
    fn condensed(&self, s: &[Vec4], u: &[Vec4], a: &[Mat4], b: &[Mat4], c: &[Vec4]) -> Option<(Vec<Vec4>, Vec<Vec4>)> {
        let n = self.n();
        let nv = 4 * n;
        let (q, r, w) = (self.cfg.q(), self.cfg.r(), self.cfg.w());
        // Δs_k = G_k Δu + d_k.
        let mut g = DMatrix::<f64>::zeros(4, nv);
        let mut d = Vec4::zeros();
        let mut h = DMatrix::<f64>::zeros(nv, nv);
        let mut grad = DVector::<f64>::zeros(nv);
        let mut rows_a = DMatrix::<f64>::zeros(8 * n, nv);
        let mut rows_b = DVector::<f64>::zeros(8 * n);
        for k in 0..n {
            let ak = DMatrix::from_column_slice(4, 4, a[k].as_slice());
            let cols = 4 * k;
            let mut next = DMatrix::<f64>::zeros(4, nv);
            if cols > 0 {
                next.columns_mut(0, cols).copy_from(&(&ak * g.columns(0, cols)));
            }
            next.view_mut((0, cols), (4, 4))
                .copy_from(&DMatrix::from_column_slice(4, 4, b[k].as_slice()));
            g = next;
            d = a[k] * d + c[k];
            let wk = if k + 1 == n { w } else { q };
            let wd = DMatrix::from_column_slice(4, 4, wk.as_slice());
            let used = cols + 4;
            let gk = g.columns(0, used);
            let wg = &wd * gk;
            let mut hb = h.view_mut((0, 0), (used, used));
            hb += gk.transpose() * &wg;
            let e = s[k + 1] + d - self.sd;
            let we = DVector::from_column_slice((wk * e).as_slice());
            let mut gb = grad.rows_mut(0, used);
            gb += gk.transpose() * we;
            for i in 0..4 {
                let row_hi = 8 * k + 2 * i;
                rows_a.view_mut((row_hi, 0), (1, used)).copy_from(&gk.row(i));
                rows_b[row_hi] = self.s_hi[i] - s[k + 1][i] - d[i];
                rows_a.view_mut((row_hi + 1, 0), (1, used)).copy_from(&(-gk.row(i)));
                rows_b[row_hi + 1] = -(self.s_lo[i] - s[k + 1][i] - d[i]);
            }
        }
        for k in 0..n {
            for i in 0..4 {
                h[(4 * k + i, 4 * k + i)] += r[(i, i)];
                grad[4 * k + i] += r[(i, i)] * (u[k][i] - self.ud[k][i]);
            }
        }
        let lower = DVector::from_fn(nv, |j, _| self.u_lo[j % 4] - u[j / 4][j % 4]);
        let upper = DVector::from_fn(nv, |j, _| self.u_hi[j % 4] - u[j / 4][j % 4]);
        let hs = (&h + h.transpose()) * 0.5;
        let qp = QpProblem {
            h: hs,
            g: grad,
            a: rows_a,
            b: rows_b,
            lower: Some(lower),
            upper: Some(upper),
        };
        let sol = solve_qp(&qp).ok()?;
        let du: Vec<Vec4> = (0..n)
            .map(|k| Vec4::from_column_slice(&sol.x.as_slice()[4 * k..4 * k + 4]))
            .collect();
        let mut ds = vec![Vec4::zeros(); n + 1];
        for k in 0..n {
            ds[k + 1] = a[k] * ds[k] + b[k] * du[k] + c[k];
        }
        Some((ds, du))
    }
}

fn to_features(s: &Vec4) -> FeatureState {
    FeatureState::new(s[0], s[1], s[2], wrap_angle(s[3]))
}

fn chart_initial(s_k: &FeatureState, s_d: &FeatureState) -> Vec4 {
    Vec4::new(s_k.x1, s_k.x2, s_k.x3, s_d.psi + angle_diff(s_k.psi, s_d.psi))
}

fn build_problem<'a>(
    s_k: &FeatureState,
    s_d: &FeatureState,
    ud: Vec<Vec4>,
    cfg: &'a NmpcConfig,
) -> Result<Problem<'a>, NmpcError> {
    let s0 = chart_initial(s_k, s_d);
    let sd = s_d.to_vector();
    let mut s_lo = Vec4::from(cfg.s_lower);
    let mut s_hi = Vec4::from(cfg.s_upper);
    s_lo[3] += sd[3];
    s_hi[3] += sd[3];
    for i in 0..4 {
        let margin = cfg.relax_margin * (s_hi[i] - s_lo[i]);
        if !(s0[i] >= s_lo[i] - margin && s0[i] <= s_hi[i] + margin) {
            return Err(NmpcError::InfeasibleInitialState {
                component: i,
                value: s0[i],
            });
        }
        // A slightly violated initial state keeps its own value as the bound.
        s_lo[i] = s_lo[i].min(s0[i]);
        s_hi[i] = s_hi[i].max(s0[i]);
    }
    Ok(Problem {
        cfg,
        s0,
        sd,
        ud,
        s_lo,
        s_hi,
        u_lo: Vec4::from(cfg.u_lower),
        u_hi: Vec4::from(cfg.u_upper),
    })
}

/// Solves the tracking OCP from measured features `s_k` toward `s_d`.
///
/// `u_d` and `gamma_hat` define the desired control over the horizon; its
/// velocity part doubles as the target velocity in the prediction model. The
/// warm start, if any, is shifted by one step.
pub fn solve_ocp(
    s_k: &FeatureState,
    s_d: &FeatureState,
    u_d: &ControlInput,
    gamma_hat: &Vec3,
    cfg: &NmpcConfig,
    warm: Option<&OcpSolution>,
) -> Result<OcpSolution, NmpcError> {
    cfg.validate()?;
    if s_k.x3 <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(s_k.x3).into());
    }
    let ud = desired_controls(u_d, gamma_hat, cfg.horizon, cfg.dt);
    let prob = build_problem(s_k, s_d, ud, cfg)?;
    let n = cfg.horizon;

    let clamp_u = |v: Vec4| Vec4::from_fn(|i, _| v[i].clamp(prob.u_lo[i], prob.u_hi[i]));
    let mut u: Vec<Vec4> = match warm {
        Some(w) if w.u.len() == n => w.shifted_controls().iter().map(|c| clamp_u(c.to_vector())).collect(),
        _ => prob.ud.iter().map(|v| clamp_u(*v)).collect(),
    };
    let mut s = prob.rollout(&u);
    let candidate = (s.clone(), u.clone());
    let candidate_cost = prob.cost(&s, &u);

    let mut converged = false;
    let mut iterations = 0;
    let mut dense_steps = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let (a, b, c) = prob.linearize(&s, &u);
        let (mut ds, mut du) = prob.riccati(&s, &u, &a, &b, &c);
        let trial_s: Vec<Vec4> = s.iter().zip(&ds).map(|(x, d)| x + d).collect();
        let trial_u: Vec<Vec4> = u.iter().zip(&du).map(|(x, d)| x + d).collect();
        if !prob.within_boxes(&trial_s, &trial_u, BOX_TOL) {
            dense_steps += 1;
            match prob.condensed(&s, &u, &a, &b, &c) {
                Some((cs, cu)) => {
                    ds = cs;
                    du = cu;
                }
                None => break,
            }
        }
        let step_norm = ds.iter().chain(&du).map(|v| v.amax()).fold(0.0, f64::max);
        let defect = c.iter().map(|v| v.amax()).fold(0.0, f64::max);

        let m0 = prob.merit(&s, &u);
        let mut alpha = 1.0;
        // Second-order correction: the full control step with the states
        // re-simulated, which removes the defects the linearization leaves.
        let soc_u: Vec<Vec4> = u.iter().zip(&du).map(|(x, d)| x + d).collect();
        let soc_s = prob.rollout(&soc_u);
        let soc_ok = prob.within_boxes(&soc_s, &soc_u, BOX_TOL) && prob.merit(&soc_s, &soc_u) <= m0;
        let linear_ok = {
            let ts: Vec<Vec4> = s.iter().zip(&ds).map(|(x, d)| x + d).collect();
            prob.merit(&ts, &soc_u) <= m0
        };
        if soc_ok && !linear_ok {
            s = soc_s;
            u = soc_u;
        } else {
            loop {
                let ts: Vec<Vec4> = s.iter().zip(&ds).map(|(x, d)| x + d * alpha).collect();
                let tu: Vec<Vec4> = u.iter().zip(&du).map(|(x, d)| x + d * alpha).collect();
                if prob.merit(&ts, &tu) <= m0 || alpha <= MIN_STEP {
                    if prob.merit(&ts, &tu) <= m0 {
                        s = ts;
                        u = tu;
                    }
                    break;
                }
                alpha *= 0.5;
            }
        }
        if step_norm <= cfg.tolerance && defect <= cfg.tolerance {
            converged = true;
            break;
        }
        if alpha <= MIN_STEP {
            break;
        }
    }

    let mut cost = prob.cost(&s, &u);
    if cost > candidate_cost * (1.0 + 1e-9) + 1e-15 && prob.within_boxes(&candidate.0, &candidate.1, BOX_TOL) {
        s = candidate.0;
        u = candidate.1;
        cost = candidate_cost;
        converged = false;
    }
    let max_defect = prob.defects(&s, &u).iter().map(|v| v.amax()).fold(0.0, f64::max);
    Ok(OcpSolution {
        u: u.iter().map(ControlInput::from_vector).collect(),
        s: s.iter().map(to_features).collect(),
        cost,
        converged,
        iterations,
        dense_steps,
        max_defect,
    })
}

/// Single-shooting objective and its gradient with respect to every control,
/// computed by the adjoint recursion.
pub fn objective_gradient(
    s_k: &FeatureState,
    s_d: &FeatureState,
    u_d: &ControlInput,
    gamma_hat: &Vec3,
    controls: &[ControlInput],
    cfg: &NmpcConfig,
) -> Result<(f64, Vec<Vec4>), NmpcError> {
    let ud = desired_controls(u_d, gamma_hat, cfg.horizon, cfg.dt);
    let mut relaxed = cfg.clone();
    relaxed.relax_margin = f64::INFINITY;
    let prob = build_problem(s_k, s_d, ud, &relaxed)?;
    let u: Vec<Vec4> = controls.iter().map(|c| c.to_vector()).collect();
    let s = prob.rollout(&u);
    let j = prob.cost(&s, &u);
    let (a, b, _) = prob.linearize(&s, &u);
    let (q, r, w) = (cfg.q(), cfg.r(), cfg.w());
    let n = cfg.horizon;
    let mut lam = w * (s[n] - prob.sd) * 2.0;
    let mut grad = vec![Vec4::zeros(); n];
    for k in (0..n).rev() {
        grad[k] = r * (u[k] - prob.ud[k]) * 2.0 + b[k].transpose() * lam;
        lam = q * (s[k] - prob.sd) * 2.0 + a[k].transpose() * lam;
    }
    Ok((j, grad))
}
