//! Scenario files.
//!
//! A scenario is a TOML document. Every parameter block has defaults, so a
//! file only needs the agents, the target script and the obstacles. Angles are
//! radians unless written as strings with a `deg` or `rad` suffix.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cbf::CbfParams;
use crate::estimator::UkfConfig;
use crate::geometry::{FeatureState, Vec3};
use crate::nmpc::NmpcConfig;
use crate::vision::{CameraIntrinsics, NoiseSpec};
use crate::world::{Obstacle, TargetScript, DEFAULT_DT};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("override {path}: {reason}")]
    Override { path: String, reason: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    #[serde(deserialize_with = "crate::geometry::de_angle")]
    pub psi: f64,
}

impl Reference {
    pub fn features(&self) -> FeatureState {
        FeatureState::new(self.x1, self.x2, self.x3, self.psi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub position: Vec3,
    /// Initial yaw; when omitted the camera faces the target.
    #[serde(default, deserialize_with = "crate::geometry::de_opt_angle")]
    pub yaw: Option<f64>,
    pub reference: Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// Length of the motion-fit window, seconds.
    pub window: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { window: 1.0 }
    }
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub camera: CameraIntrinsics,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub ukf: UkfConfig,
    #[serde(default)]
    pub nmpc: NmpcConfig,
    #[serde(default)]
    pub cbf: CbfParams,
    #[serde(default)]
    pub motion: MotionConfig,
    pub target: TargetScript,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text` after applying dotted-path overrides such as
    /// `("cbf.gamma_o", "0.5")`. Values are read as TOML literals, falling back
    /// to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut doc: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (path, value) in overrides {
            apply_override(&mut doc, path, value)?;
        }
        let cfg: ScenarioConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.agents.is_empty() {
            return bad("at least one agent is required".into());
        }
        if !(self.motion.window > 0.0) {
            return bad("motion.window must be positive".into());
        }
        self.camera.validate().map_err(ConfigError::Invalid)?;
        self.noise.validate().map_err(ConfigError::Invalid)?;
        self.ukf.validate().map_err(ConfigError::Invalid)?;
        self.nmpc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cbf.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for seg in &self.target.segments {
            if !(seg.duration() >= 0.0 && seg.speed() >= 0.0) {
                return bad("target segments need non-negative duration and speed".into());
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            let r = a.reference;
            let vals = [r.x1, r.x2, r.x3];
            for k in 0..3 {
                if !(self.nmpc.s_lower[k] <= vals[k] && vals[k] <= self.nmpc.s_upper[k]) {
                    return bad(format!(
                        "agent {i}: reference component {} = {} outside [{}, {}]",
                        k + 1,
                        vals[k],
                        self.nmpc.s_lower[k],
                        self.nmpc.s_upper[k]
                    ));
                }
            }
            if !(r.psi.abs() <= std::f64::consts::PI) {
                return bad(format!("agent {i}: reference psi {} outside [-π, π]", r.psi));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.half_extents.iter().all(|h| *h > 0.0)) {
                return bad(format!("obstacle {i}: half extents must be positive"));
            }
        }
        Ok(())
    }

    /// Canonical JSON form, used for hashing and stored with each run.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Initial yaw of agent `i`: configured, or facing the target's start.
    pub fn initial_yaw(&self, i: usize) -> f64 {
        let a = &self.agents[i];
        a.yaw.unwrap_or_else(|| {
            let d = self.target.position - a.position;
            d.y.atan2(d.x)
        })
    }
}

fn parse_literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Sets `path` (dot separated; numeric parts index arrays) to `value`,
/// creating intermediate tables as needed.
pub fn apply_override(doc: &mut toml::Value, path: &str, value: &str) -> Result<(), ConfigError> {
    let err = |reason: String| ConfigError::Override {
        path: path.to_string(),
        reason,
    };
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty path component".into()));
    }
    let mut node = doc;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), parse_literal(value));
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| err(format!("{part:?} is not an array index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| err(format!("index {idx} out of range ({len})")))?;
                if last {
                    *slot = parse_literal(value);
                    return Ok(());
                }
                slot
            }
            _ => return Err(err(format!("{part:?} is not inside a table or array"))),
        };
    }
    unreachable!("loop returns on the last component")
}
