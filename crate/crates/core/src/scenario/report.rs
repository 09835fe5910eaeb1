//! Run metrics and safety audits.
//!
//! Everything here is recomputed from the files in a run directory: the
//! resolved configuration, ground-truth poses, detections and filter slacks.
//! Controller-internal barrier values are never consulted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ScenarioConfig;
use super::logs::*;
use crate::geometry::{FeatureState, Vec3};
use crate::vision::{CameraIntrinsics, Detection};

/// Tolerance on the distance audits, meters.
pub const DISTANCE_TOL: f64 = 0.05;
/// Tolerance on the occlusion audit, degrees.
pub const ANGLE_TOL_DEG: f64 = 2.0;
/// Slacks at or above `−SLACK_TOL` count as satisfied.
pub const SLACK_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no valid detections")]
    NoValidDetections,
    #[error("reading {file}: {reason}")]
    Read { file: String, reason: String },
    #[error("run directory has no ground truth")]
    Empty,
}

impl From<ReportError> for super::runner::RunError {
    fn from(e: ReportError) -> Self {
        super::runner::RunError::Io(e.to_string())
    }
}

/// RMS of the pixel offsets between valid detections and the reference
/// image location `(f_x x1* + c_u, f_y x2* + c_v)`.
pub fn rms_pixel_errors(
    detections: &[Detection],
    reference: &FeatureState,
    k: &CameraIntrinsics,
) -> Result<(f64, f64), ReportError> {
    let (u_ref, v_ref) = (k.fx * reference.x1 + k.cu, k.fy * reference.x2 + k.cv);
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
    for d in detections.iter().filter(|d| d.valid) {
        su += (d.u - u_ref).powi(2);
        sv += (d.v - v_ref).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(ReportError::NoValidDetections);
    }
    Ok(((su / n as f64).sqrt(), (sv / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent: usize,
    pub valid_detections: usize,
    pub rms_u: Option<f64>,
    pub rms_v: Option<f64>,
    pub emergency_stops: usize,
    pub plan_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMetric {
    pub agent: usize,
    pub obstacle: usize,
    pub min_angle_deg: f64,
    /// Ticks during which the obstacle was closer than the target.
    pub ticks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audits {
    pub collision: bool,
    pub connectivity: bool,
    pub obstacle_clearance: bool,
    pub occlusion: bool,
    pub slacks: bool,
    pub completed: bool,
}

impl Audits {
    pub fn all_pass(&self) -> bool {
        self.collision
            && self.connectivity
            && self.obstacle_clearance
            && self.occlusion
            && self.slacks
            && self.completed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub ticks: u64,
    pub duration: f64,
    pub agents: Vec<AgentMetrics>,
    pub min_pair_distance: Option<f64>,
    pub max_pair_distance: Option<f64>,
    pub min_obstacle_clearance: Option<f64>,
    pub occlusion: Vec<OcclusionMetric>,
    /// Smallest `θ − θ*` over every audited (agent, obstacle) tick, degrees.
    pub min_occlusion_margin_deg: Option<f64>,
    pub min_slack: Option<f64>,
    /// Ticks on which some agent had no admissible command.
    pub infeasible_ticks: usize,
    pub audits: Audits,
}

fn read<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<Vec<T>, ReportError> {
    read_rows(&dir.join(file)).map_err(|e| ReportError::Read {
        file: file.to_string(),
        reason: e.to_string(),
    })
}

fn min_opt(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.min(b)))
}

fn max_opt(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.max(b)))
}

/// Angle at `p` between the rays to `o` and `q`, degrees.
fn sight_angle_deg(p: &Vec3, o: &Vec3, q: &Vec3) -> f64 {
    let (a, n) = (o - p, q - p);
    (a.dot(&n) / (a.norm() * n.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Recomputes the report of the run stored in `dir`.
pub fn compute_report(dir: &Path) -> Result<RunReport, ReportError> {
    let cfg_text = std::fs::read_to_string(dir.join(CONFIG)).map_err(|e| ReportError::Read {
        file: CONFIG.into(),
        reason: e.to_string(),
    })?;
    let cfg: ScenarioConfig = serde_json::from_str(&cfg_text).map_err(|e| ReportError::Read {
        file: CONFIG.into(),
        reason: e.to_string(),
    })?;
    let truth: Vec<TruthRow> = read(dir, TRUTH)?;
    let target: Vec<TargetRow> = read(dir, TARGET)?;
    let detections: Vec<DetectionRow> = read(dir, DETECTIONS)?;
    let constraints: Vec<ConstraintRow> = read(dir, CONSTRAINTS)?;
    let filter: Vec<FilterRow> = read(dir, FILTER)?;
    let nmpc: Vec<NmpcRow> = read(dir, NMPC)?;
    if truth.is_empty() || target.is_empty() {
        return Err(ReportError::Empty);
    }

    let n_agents = cfg.agents.len();
    let targets: BTreeMap<u64, Vec3> = target.iter().map(|r| (r.tick, Vec3::new(r.x, r.y, r.z))).collect();
    let mut by_tick: BTreeMap<u64, Vec<(usize, Vec3)>> = BTreeMap::new();
    for r in &truth {
        by_tick
            .entry(r.tick)
            .or_default()
            .push((r.agent, Vec3::new(r.x, r.y, r.z)));
    }
    let last_tick = *by_tick.keys().next_back().expect("non-empty");
    let expected = (cfg.duration / cfg.dt).round() as u64;

    let (mut min_pair, mut max_pair, mut min_clear) = (None, None, None);
    let mut occl: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for (tick, agents) in &by_tick {
        for (x, (i, p)) in agents.iter().enumerate() {
            for (_, pj) in agents.iter().skip(x + 1) {
                let d = (p - pj).norm();
                min_pair = min_opt(min_pair, d);
                max_pair = max_opt(max_pair, d);
            }
            for o in &cfg.obstacles {
                min_clear = min_opt(min_clear, o.distance(p));
            }
            if let Some(q) = targets.get(tick) {
                let range = (q - p).norm();
                for (k, o) in cfg.obstacles.iter().enumerate() {
                    let dist = (o.center - p).norm();
                    if dist <= range && dist > 0.0 && range > 0.0 {
                        let theta = sight_angle_deg(p, &o.center, q);
                        let e = occl.entry((*i, k)).or_insert((f64::INFINITY, 0));
                        e.0 = e.0.min(theta);
                        e.1 += 1;
                    }
                }
            }
        }
    }
    let theta_star = cfg.cbf.theta_star.to_degrees();
    let occlusion: Vec<OcclusionMetric> = occl
        .iter()
        .map(|(&(agent, obstacle), &(m, ticks))| OcclusionMetric {
            agent,
            obstacle,
            min_angle_deg: m,
            ticks,
        })
        .collect();
    let min_margin = occlusion
        .iter()
        .map(|o| o.min_angle_deg - theta_star)
        .fold(None, min_opt);

    let min_slack = constraints.iter().map(|r| r.slack).fold(None, min_opt);
    let mut stop_ticks = std::collections::BTreeSet::new();
    let mut agents: Vec<AgentMetrics> = (0..n_agents)
        .map(|agent| AgentMetrics {
            agent,
            valid_detections: 0,
            rms_u: None,
            rms_v: None,
            emergency_stops: 0,
            plan_fallbacks: 0,
        })
        .collect();
    for r in &filter {
        if r.status == "emergency_stop" {
            agents[r.agent].emergency_stops += 1;
            stop_ticks.insert(r.t.to_bits());
        }
    }
    for r in &nmpc {
        if r.fallback {
            agents[r.agent].plan_fallbacks += 1;
        }
    }
    for m in agents.iter_mut() {
        let dets: Vec<Detection> = detections
            .iter()
            .filter(|d| d.agent == m.agent)
            .map(|d| Detection {
                valid: d.valid,
                dropout: None,
                u: d.u,
                v: d.v,
                d: d.d,
                psi: d.psi,
                r_c: Vec3::new(d.r_cx, d.r_cy, d.r_cz),
            })
            .collect();
        m.valid_detections = dets.iter().filter(|d| d.valid).count();
        if let Ok((u, v)) = rms_pixel_errors(&dets, &cfg.agents[m.agent].reference.features(), &cfg.camera) {
            m.rms_u = Some(u);
            m.rms_v = Some(v);
        }
    }

    let p = &cfg.cbf;
    let audits = Audits {
        collision: min_pair.is_none_or(|d| d >= p.r_s - DISTANCE_TOL),
        connectivity: max_pair.is_none_or(|d| d <= p.r_c + DISTANCE_TOL),
        obstacle_clearance: min_clear.is_none_or(|d| d >= p.r_s - DISTANCE_TOL),
        occlusion: min_margin.is_none_or(|m| m >= -ANGLE_TOL_DEG),
        slacks: min_slack.is_none_or(|s| s >= -SLACK_TOL),
        completed: last_tick == expected,
    };
    Ok(RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        ticks: last_tick,
        duration: last_tick as f64 * cfg.dt,
        agents,
        min_pair_distance: min_pair,
        max_pair_distance: max_pair,
        min_obstacle_clearance: min_clear,
        occlusion,
        min_occlusion_margin_deg: min_margin,
        min_slack,
        infeasible_ticks: stop_ticks.len(),
        audits,
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.digits$}"))
}

impl RunReport {
    /// Human-readable summary.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "run {} (seed {}, hash {}), {:.2} s",
            self.name,
            self.seed,
            &self.config_hash[..12],
            self.duration
        );
        let _ = writeln!(
            s,
            "{:>5} {:>8} {:>10} {:>10} {:>6} {:>9}",
            "agent", "valid", "rms_u_px", "rms_v_px", "stops", "fallbacks"
        );
        for a in &self.agents {
            let _ = writeln!(
                s,
                "{:>5} {:>8} {:>10} {:>10} {:>6} {:>9}",
                a.agent,
                a.valid_detections,
                fmt_opt(a.rms_u, 2),
                fmt_opt(a.rms_v, 2),
                a.emergency_stops,
                a.plan_fallbacks
            );
        }
        let _ = writeln!(s, "min pairwise distance  {} m", fmt_opt(self.min_pair_distance, 3));
        let _ = writeln!(s, "max pairwise distance  {} m", fmt_opt(self.max_pair_distance, 3));
        let _ = writeln!(
            s,
            "min obstacle clearance {} m",
            fmt_opt(self.min_obstacle_clearance, 3)
        );
        let _ = writeln!(
            s,
            "min occlusion margin   {} deg",
            fmt_opt(self.min_occlusion_margin_deg, 2)
        );
        let _ = writeln!(s, "min slack              {}", fmt_opt(self.min_slack, 6));
        let _ = writeln!(s, "infeasible ticks       {}", self.infeasible_ticks);
        let a = &self.audits;
        let flag = |b: bool| if b { "pass" } else { "FAIL" };
        let _ = writeln!(
            s,
            "audits: collision {} connectivity {} clearance {} occlusion {} slacks {} completed {}",
            flag(a.collision),
            flag(a.connectivity),
            flag(a.obstacle_clearance),
            flag(a.occlusion),
            flag(a.slacks),
            flag(a.completed)
        );
        s
    }
}
