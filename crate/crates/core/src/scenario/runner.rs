//! Closed-loop simulation.
//!
//! Each tick, every agent senses the frozen world, runs its own pipeline
//! (estimate, predict target motion, solve the tracking problem, filter the
//! command) and returns a command; the world then advances once. Agents only
//! see what [`AgentView`] carries: their own pose and detection, neighbor
//! positions and the obstacle map.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use super::config::ScenarioConfig;
use super::logs::*;
use super::report::{compute_report, RunReport};
use crate::cbf::{build_constraints, CbfParams, ConstraintKind, HalfspaceConstraint};
use crate::control::{ControlInput, ControlInputGlobal};
use crate::estimator::{
    initialize_from_detection, ukf_step, CameraMotion, EstimatorContext, EstimatorError, EstimatorState,
};
use crate::filter::{augment, filter, FilterOutput};
use crate::geometry::{
    features_from_relative, relative_position, FeatureState, HeadingTracker, Mat3, RelativePosition, Vec3,
};
use crate::motion::{fit_motion, MotionSample, MotionWindow};
use crate::nmpc::{compensate_error, solve_ocp, NmpcConfig, NmpcError, OcpSolution};
use crate::vision::{detect, true_relative_angle, Detection, Dropout, NoiseStream};
use crate::world::{AgentState, WorldState};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Nmpc(#[from] NmpcError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] super::config::ConfigError),
    #[error("log output: {0}")]
    Io(String),
    #[error("tick {tick}, agent {agent}: {source}")]
    Tick {
        tick: u64,
        agent: usize,
        source: AgentError,
        /// Report over the ticks completed before the failure.
        partial: Option<Box<RunReport>>,
    },
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

/// Everything one agent may use in a tick.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub time: f64,
    pub position: Vec3,
    pub r_cg: Mat3,
    pub detection: &'a Detection,
    /// `(id, position)` of every other agent.
    pub neighbors: &'a [(usize, Vec3)],
    pub obstacles: &'a [crate::world::Obstacle],
}

/// Per-tick record of one agent's pipeline.
#[derive(Debug, Clone)]
pub struct AgentTick {
    pub command: ControlInputGlobal,
    pub estimate: Option<EstimatorState>,
    pub updated: bool,
    pub clamped: bool,
    pub plan: Option<PlanRecord>,
    pub rows: Vec<HalfspaceConstraint>,
    pub filtered: Option<FilterOutput>,
    pub nominal: ControlInputGlobal,
}

#[derive(Debug, Clone, Copy)]
pub struct PlanRecord {
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub fallback: bool,
    pub u0: ControlInput,
    pub eps: FeatureState,
}

/// One agent's controller state.
#[derive(Debug, Clone)]
pub struct AgentController {
    pub id: usize,
    reference: FeatureState,
    ctx: EstimatorContext,
    nmpc: NmpcConfig,
    cbf: CbfParams,
    window: MotionWindow,
    estimate: Option<EstimatorState>,
    last_command: ControlInputGlobal,
    last_r_cg: Mat3,
    plan: Option<OcpSolution>,
}

fn shift_plan(p: &OcpSolution) -> OcpSolution {
    let mut s: Vec<FeatureState> = p.s.iter().skip(1).copied().collect();
    s.push(*p.s.last().expect("non-empty trajectory"));
    OcpSolution {
        u: p.shifted_controls(),
        s,
        converged: false,
        iterations: 0,
        dense_steps: 0,
        ..p.clone()
    }
}

impl AgentController {
    pub fn new(id: usize, cfg: &ScenarioConfig, r_cg: Mat3) -> Self {
        Self {
            id,
            reference: cfg.agents[id].reference.features(),
            ctx: EstimatorContext {
                cfg: cfg.ukf.clone(),
                intrinsics: cfg.camera,
                noise: cfg.noise,
                dt: cfg.dt,
            },
            nmpc: cfg.nmpc.clone(),
            cbf: cfg.cbf,
            window: MotionWindow::new(cfg.motion.window),
            estimate: None,
            last_command: ControlInputGlobal::zero(),
            last_r_cg: r_cg,
            plan: None,
        }
    }

    pub fn estimate(&self) -> Option<&EstimatorState> {
        self.estimate.as_ref()
    }

    /// Runs the pipeline for one tick.
    pub fn step(&mut self, view: &AgentView) -> Result<AgentTick, AgentError> {
        let r_cg = view.r_cg;
        let (state, updated, clamped) = match &self.estimate {
            None if view.detection.valid => (
                initialize_from_detection(view.detection, &r_cg, Vec3::zeros(), &self.ctx)?,
                true,
                false,
            ),
            None => {
                // Nothing seen yet: hold position.
                self.last_command = ControlInputGlobal::zero();
                self.last_r_cg = r_cg;
                return Ok(AgentTick {
                    command: ControlInputGlobal::zero(),
                    estimate: None,
                    updated: false,
                    clamped: false,
                    plan: None,
                    rows: Vec::new(),
                    filtered: None,
                    nominal: ControlInputGlobal::zero(),
                });
            }
            Some(prev) => {
                let rt = self.last_r_cg.transpose();
                let motion = CameraMotion {
                    velocity: rt * self.last_command.velocity,
                    omega: rt * self.last_command.omega,
                    r_cg: self.last_r_cg,
                };
                let out = ukf_step(prev, &motion, &r_cg, view.detection, &self.ctx)?;
                (out.state, out.updated, out.clamped)
            }
        };
        let mean = state.mean;
        self.estimate = Some(state.clone());

        // Target motion in the global frame, then rotated into the camera frame.
        let sample = MotionSample {
            t: view.time,
            position: mean.r_q,
            velocity: mean.v_q,
        };
        let fit = match self.window.push(sample) {
            Ok(()) => fit_motion(&self.window).unwrap_or_else(|e| e.fallback()),
            Err(e) => e.fallback(),
        };
        let rt = r_cg.transpose();
        let vq_cam = rt * fit.velocity;
        let u_d = ControlInput::new(vq_cam.x, vq_cam.y, vq_cam.z, 0.0);
        let gamma_cam = rt * fit.acceleration;

        let s_ukf = mean.features;
        let s_model = self.plan.as_ref().and_then(|p| p.s.get(1).copied()).unwrap_or(s_ukf);
        let s_d = compensate_error(&s_ukf, &s_model, &self.reference);
        let eps = s_ukf.error_to(&s_model);

        let solved = solve_ocp(&s_ukf, &s_d, &u_d, &gamma_cam, &self.nmpc, self.plan.as_ref());
        let (plan, fallback) = match (solved, &self.plan) {
            (Ok(sol), _) if sol.converged => (sol, false),
            (Ok(_), Some(prev)) | (Err(_), Some(prev)) => (shift_plan(prev), true),
            (Ok(sol), None) => (sol, false),
            (Err(e), None) => return Err(e.into()),
        };
        let u0 = plan.u[0];
        let record = PlanRecord {
            cost: plan.cost,
            iterations: plan.iterations,
            converged: plan.converged,
            fallback,
            u0,
            eps,
        };
        self.plan = Some(plan);

        let nominal = augment(&u0, &r_cg);
        let n = mean.r_q - view.position;
        let rows = build_constraints(&view.position, view.neighbors, view.obstacles, &n, &self.cbf);
        let out = filter(&nominal, &rows, &self.cbf);
        self.last_command = out.u;
        self.last_r_cg = r_cg;
        Ok(AgentTick {
            command: out.u,
            estimate: Some(state),
            updated,
            clamped,
            plan: Some(record),
            rows,
            filtered: Some(out),
            nominal,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Parent directory; the run directory is created inside it.
    pub out_dir: PathBuf,
}

/// `<name>-<hash prefix>-seed<seed>`.
pub fn run_dir_name(cfg: &ScenarioConfig) -> String {
    format!("{}-{}-seed{}", cfg.name, &cfg.hash()[..12], cfg.seed)
}

/// Initial world for a scenario.
pub fn initial_world(cfg: &ScenarioConfig) -> WorldState {
    let agents = cfg
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| AgentState::new(a.position, cfg.initial_yaw(i)))
        .collect();
    WorldState::new(cfg.dt, agents, cfg.target.initial_state(), cfg.obstacles.clone())
}

/// Ground-truth features of agent `i`, when the target is in front of the camera.
pub fn true_features(world: &WorldState, i: usize, heading: &HeadingTracker) -> Option<(FeatureState, f64)> {
    let a = &world.agents[i];
    let rel = relative_position(&world.target.position, &a.position).to_vec();
    let rel = RelativePosition::from_vec(&(a.r_cg.transpose() * rel));
    let (x1, x2, x3) = features_from_relative(&rel).ok()?;
    Some((
        FeatureState::new(x1, x2, x3, true_relative_angle(world, i, heading)),
        rel.z,
    ))
}

fn dropout_name(d: Option<Dropout>) -> &'static str {
    match d {
        None => "",
        Some(Dropout::BehindCamera) => "behind_camera",
        Some(Dropout::OutsideImage) => "outside_image",
        Some(Dropout::Occluded) => "occluded",
    }
}

fn kind_name(k: ConstraintKind) -> &'static str {
    k.as_str()
}

/// Runs a scenario, writing logs and `report.json` into a fresh run directory.
pub fn run(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<(RunReport, PathBuf), RunError> {
    cfg.validate()?;
    let dir = opts.out_dir.join(run_dir_name(cfg));
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG), cfg.canonical_json())?;
    let outcome = simulate(cfg, &dir);
    let report = compute_report(&dir)?;
    std::fs::write(
        dir.join(REPORT),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    match outcome {
        Ok(()) => Ok((report, dir)),
        Err(RunError::Tick {
            tick, agent, source, ..
        }) => Err(RunError::Tick {
            tick,
            agent,
            source,
            partial: Some(Box::new(report)),
        }),
        Err(e) => Err(e),
    }
}

fn simulate(cfg: &ScenarioConfig, dir: &Path) -> Result<(), RunError> {
    let mut logs = RunLogs::create(dir)?;
    let mut world = initial_world(cfg);
    let mut heading = HeadingTracker::new(cfg.target.heading);
    heading.update(&world.target.velocity);
    let mut controllers: Vec<AgentController> = (0..cfg.agents.len())
        .map(|i| AgentController::new(i, cfg, world.agents[i].r_cg))
        .collect();
    let mut streams: Vec<NoiseStream> = (0..cfg.agents.len()).map(|i| NoiseStream::new(cfg.seed, i)).collect();
    let ticks = (cfg.duration / cfg.dt).round() as u64;
    let n_agents = cfg.agents.len();

    let result = (|| -> Result<(), RunError> {
        for tick in 0..=ticks {
            let t = world.time;
            log_world(&mut logs, &world, &heading, cfg, tick)?;
            if tick == ticks {
                for (i, a) in world.agents.iter().enumerate() {
                    logs.truth
                        .serialize(truth_row(tick, t, i, a, &ControlInputGlobal::zero()))?;
                }
                break;
            }
            let detections: Vec<Detection> = (0..n_agents)
                .map(|i| detect(&world, i, &cfg.camera, &cfg.noise, &heading, &mut streams[i]))
                .collect();
            let positions: Vec<Vec3> = world.agents.iter().map(|a| a.position).collect();
            let neighbor_lists: Vec<Vec<(usize, Vec3)>> = (0..n_agents)
                .map(|i| {
                    positions
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(j, p)| (j, *p))
                        .collect()
                })
                .collect();
            let snapshot = &world;
            let results: Vec<Result<AgentTick, AgentError>> = controllers
                .par_iter_mut()
                .enumerate()
                .map(|(i, c)| {
                    let view = AgentView {
                        time: t,
                        position: snapshot.agents[i].position,
                        r_cg: snapshot.agents[i].r_cg,
                        detection: &detections[i],
                        neighbors: &neighbor_lists[i],
                        obstacles: &snapshot.obstacles,
                    };
                    c.step(&view)
                })
                .collect();
            let mut commands = Vec::with_capacity(n_agents);
            for (i, r) in results.into_iter().enumerate() {
                let out = r.map_err(|source| RunError::Tick {
                    tick,
                    agent: i,
                    source,
                    partial: None,
                })?;
                log_agent(&mut logs, t, tick, i, &world, &heading, &detections[i], &out, cfg)?;
                commands.push(out.command);
            }
            world.step(&commands, &cfg.target);
            heading.update(&world.target.velocity);
        }
        Ok(())
    })();
    logs.flush()?;
    result
}

fn truth_row(tick: u64, t: f64, i: usize, a: &AgentState, u: &ControlInputGlobal) -> TruthRow {
    TruthRow {
        tick,
        t,
        agent: i,
        x: a.position.x,
        y: a.position.y,
        z: a.position.z,
        yaw: a.yaw,
        vx: u.velocity.x,
        vy: u.velocity.y,
        vz: u.velocity.z,
        wz: u.omega.z,
    }
}

fn log_world(
    logs: &mut RunLogs,
    world: &WorldState,
    heading: &HeadingTracker,
    cfg: &ScenarioConfig,
    tick: u64,
) -> Result<(), RunError> {
    let t = world.time;
    let q = &world.target;
    logs.target.serialize(TargetRow {
        tick,
        t,
        x: q.position.x,
        y: q.position.y,
        z: q.position.z,
        vx: q.velocity.x,
        vy: q.velocity.y,
        vz: q.velocity.z,
        heading: heading.heading(),
    })?;
    let n = world.agents.len();
    for i in 0..n {
        for j in i + 1..n {
            let distance = (world.agents[i].position - world.agents[j].position).norm();
            logs.pairs.serialize(PairRow { t, i, j, distance })?;
        }
        let p = world.agents[i].position;
        let ray = q.position - p;
        for (k, o) in cfg.obstacles.iter().enumerate() {
            logs.clearance.serialize(ClearanceRow {
                t,
                agent: i,
                obstacle: k,
                clearance: o.distance(&p),
            })?;
            let a = o.center - p;
            if a.norm() <= ray.norm() && a.norm() > 0.0 && ray.norm() > 0.0 {
                let c = (a.dot(&ray) / (a.norm() * ray.norm())).clamp(-1.0, 1.0);
                logs.occlusion.serialize(OcclusionRow {
                    t,
                    agent: i,
                    obstacle: k,
                    theta_deg: c.acos().to_degrees(),
                })?;
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn log_agent(
    logs: &mut RunLogs,
    t: f64,
    tick: u64,
    i: usize,
    world: &WorldState,
    heading: &HeadingTracker,
    det: &Detection,
    out: &AgentTick,
    cfg: &ScenarioConfig,
) -> Result<(), RunError> {
    logs.truth
        .serialize(truth_row(tick, t, i, &world.agents[i], &out.command))?;
    logs.detections.serialize(DetectionRow {
        tick,
        t,
        agent: i,
        valid: det.valid,
        dropout: dropout_name(det.dropout).to_string(),
        u: det.u,
        v: det.v,
        d: det.d,
        psi: det.psi,
        r_cx: det.r_c.x,
        r_cy: det.r_c.y,
        r_cz: det.r_c.z,
    })?;
    let nan = f64::NAN;
    let est = out.estimate.as_ref();
    let m = est.map(|e| e.mean);
    let f = m.map(|m| m.features).unwrap_or(FeatureState::new(nan, nan, nan, nan));
    let (rq, vq) = m
        .map(|m| (m.r_q, m.v_q))
        .unwrap_or((Vec3::repeat(nan), Vec3::repeat(nan)));
    logs.estimates.serialize(EstimateRow {
        t,
        agent: i,
        initialized: est.is_some(),
        updated: out.updated,
        clamped: out.clamped,
        x1: f.x1,
        x2: f.x2,
        x3: f.x3,
        psi: f.psi,
        r_qx: rq.x,
        r_qy: rq.y,
        r_qz: rq.z,
        v_qx: vq.x,
        v_qy: vq.y,
        v_qz: vq.z,
        cov_trace: est.map(|e| e.cov.trace()).unwrap_or(nan),
    })?;
    if let Some(p) = &out.plan {
        logs.nmpc.serialize(NmpcRow {
            t,
            agent: i,
            cost: p.cost,
            iterations: p.iterations,
            converged: p.converged,
            fallback: p.fallback,
            u0_vcx: p.u0.vx,
            u0_vcy: p.u0.vy,
            u0_vcz: p.u0.vz,
            u0_wcy: p.u0.wy,
            eps1: p.eps.x1,
            eps2: p.eps.x2,
            eps3: p.eps.x3,
            eps4: p.eps.psi,
        })?;
    }
    if let Some(fo) = &out.filtered {
        for (r, s) in out.rows.iter().zip(&fo.slacks) {
            let kind = kind_name(r.kind).to_string();
            let partner = r.partner.to_string();
            logs.constraints.serialize(ConstraintRow {
                t,
                agent: i,
                kind: kind.clone(),
                partner: partner.clone(),
                h: r.h,
                b: r.b,
                slack: *s,
                escape: r.escape,
            })?;
            logs.slacks.serialize(SlackRow {
                t,
                agent: i,
                kind,
                partner,
                slack: *s,
            })?;
        }
        let du = (fo.u.to_vector() - out.nominal.to_vector()).norm();
        logs.filter.serialize(FilterRow {
            t,
            agent: i,
            du_norm: du,
            status: serde_json::to_value(fo.status)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            min_slack_safety: fo.min_slack(&out.rows, ConstraintKind::Safety),
            min_slack_conn: fo.min_slack(&out.rows, ConstraintKind::Connectivity),
            min_slack_occl: fo.min_slack(&out.rows, ConstraintKind::Occlusion),
            cuts: fo.cuts,
        })?;
    }
    let reference = cfg.agents[i].reference;
    if let Some((s, depth)) = true_features(world, i, heading) {
        logs.features.serialize(FeatureRow {
            t,
            agent: i,
            x1: s.x1,
            x2: s.x2,
            x3: s.x3,
            psi: s.psi,
            x1_est: f.x1,
            x2_est: f.x2,
            x3_est: f.x3,
            psi_est: f.psi,
            x1_ref: reference.x1,
            x2_ref: reference.x2,
            x3_ref: reference.x3,
            psi_ref: reference.psi,
        })?;
        let depth_est = 1.0 / f.x3;
        logs.depth.serialize(DepthRow {
            t,
            agent: i,
            depth,
            depth_est,
            error: depth_est - depth,
        })?;
    }
    Ok(())
}
