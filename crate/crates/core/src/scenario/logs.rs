//! CSV logs written during a run, one file per stream.
//!
//! Every row type derives both `Serialize` and `Deserialize`, so reports can
//! be recomputed from a run directory alone.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const DETECTIONS: &str = "detections.csv";
pub const ESTIMATES: &str = "estimates.csv";
pub const NMPC: &str = "nmpc.csv";
pub const CONSTRAINTS: &str = "constraints.csv";
pub const FILTER: &str = "filter.csv";
pub const TRUTH: &str = "truth.csv";
pub const TARGET: &str = "target.csv";
pub const CONFIG: &str = "config.json";
pub const REPORT: &str = "report.json";
/// Plot-ready tables live in this subdirectory.
pub const PLOTS: &str = "plots";
pub const PLOT_FEATURES: &str = "features.csv";
pub const PLOT_DEPTH: &str = "depth.csv";
pub const PLOT_PAIRS: &str = "pairwise_distance.csv";
pub const PLOT_OBSTACLES: &str = "obstacle_clearance.csv";
pub const PLOT_OCCLUSION: &str = "occlusion_angle.csv";
pub const PLOT_SLACKS: &str = "slacks.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub tick: u64,
    pub t: f64,
    pub agent: usize,
    pub valid: bool,
    pub dropout: String,
    pub u: f64,
    pub v: f64,
    pub d: f64,
    pub psi: f64,
    pub r_cx: f64,
    pub r_cy: f64,
    pub r_cz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub t: f64,
    pub agent: usize,
    pub initialized: bool,
    pub updated: bool,
    pub clamped: bool,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub psi: f64,
    pub r_qx: f64,
    pub r_qy: f64,
    pub r_qz: f64,
    pub v_qx: f64,
    pub v_qy: f64,
    pub v_qz: f64,
    pub cov_trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmpcRow {
    pub t: f64,
    pub agent: usize,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The previous plan, shifted, was used instead of a fresh solution.
    pub fallback: bool,
    pub u0_vcx: f64,
    pub u0_vcy: f64,
    pub u0_vcz: f64,
    pub u0_wcy: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub eps4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub t: f64,
    pub agent: usize,
    pub kind: String,
    pub partner: String,
    pub h: f64,
    pub b: f64,
    pub slack: f64,
    pub escape: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub t: f64,
    pub agent: usize,
    pub du_norm: f64,
    pub status: String,
    pub min_slack_safety: Option<f64>,
    pub min_slack_conn: Option<f64>,
    pub min_slack_occl: Option<f64>,
    pub cuts: usize,
}

/// Ground-truth agent pose and the command applied from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub tick: u64,
    pub t: f64,
    pub agent: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub tick: u64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub t: f64,
    pub agent: usize,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub psi: f64,
    pub x1_est: f64,
    pub x2_est: f64,
    pub x3_est: f64,
    pub psi_est: f64,
    pub x1_ref: f64,
    pub x2_ref: f64,
    pub x3_ref: f64,
    pub psi_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub t: f64,
    pub agent: usize,
    pub depth: f64,
    pub depth_est: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub t: f64,
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearanceRow {
    pub t: f64,
    pub agent: usize,
    pub obstacle: usize,
    pub clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRow {
    pub t: f64,
    pub agent: usize,
    pub obstacle: usize,
    pub theta_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackRow {
    pub t: f64,
    pub agent: usize,
    pub kind: String,
    pub partner: String,
    pub slack: f64,
}

type Sink = csv::Writer<BufWriter<File>>;

fn sink(path: PathBuf) -> Result<Sink, csv::Error> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// Open writers for every log of one run.
pub struct RunLogs {
    pub detections: Sink,
    pub estimates: Sink,
    pub nmpc: Sink,
    pub constraints: Sink,
    pub filter: Sink,
    pub truth: Sink,
    pub target: Sink,
    pub features: Sink,
    pub depth: Sink,
    pub pairs: Sink,
    pub clearance: Sink,
    pub occlusion: Sink,
    pub slacks: Sink,
}

impl RunLogs {
    pub fn create(dir: &Path) -> Result<Self, csv::Error> {
        let plots = dir.join(PLOTS);
        std::fs::create_dir_all(&plots)?;
        Ok(Self {
            detections: sink(dir.join(DETECTIONS))?,
            estimates: sink(dir.join(ESTIMATES))?,
            nmpc: sink(dir.join(NMPC))?,
            constraints: sink(dir.join(CONSTRAINTS))?,
            filter: sink(dir.join(FILTER))?,
            truth: sink(dir.join(TRUTH))?,
            target: sink(dir.join(TARGET))?,
            features: sink(plots.join(PLOT_FEATURES))?,
            depth: sink(plots.join(PLOT_DEPTH))?,
            pairs: sink(plots.join(PLOT_PAIRS))?,
            clearance: sink(plots.join(PLOT_OBSTACLES))?,
            occlusion: sink(plots.join(PLOT_OCCLUSION))?,
            slacks: sink(plots.join(PLOT_SLACKS))?,
        })
    }

    pub fn flush(&mut self) -> Result<(), std::io::Error> {
        for w in [
            &mut self.detections,
            &mut self.estimates,
            &mut self.nmpc,
            &mut self.constraints,
            &mut self.filter,
            &mut self.truth,
            &mut self.target,
            &mut self.features,
            &mut self.depth,
            &mut self.pairs,
            &mut self.clearance,
            &mut self.occlusion,
            &mut self.slacks,
        ] {
            w.flush()?;
        }
        Ok(())
    }
}

/// Reads every row of a CSV log.
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
