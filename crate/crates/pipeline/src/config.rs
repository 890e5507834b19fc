//! Flat `key = value` run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mlio_core::features::FeatureParams;
use mlio_core::posegraph::{GraphParams, LoopParams};
use mlio_core::precal::CalibParams;
use mlio_core::swo::SwoConfig;
use serde::{Deserialize, Serialize};

use crate::PipelineError;

/// Sensor combination, as in the paper's comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Spinning + solid-state + IMU.
    Hvi,
    /// Spinning + IMU.
    Vi,
    /// Solid-state + IMU.
    Hi,
}

impl Mode {
    pub fn uses_spinning(&self) -> bool {
        matches!(self, Self::Hvi | Self::Vi)
    }

    pub fn uses_solid_state(&self) -> bool {
        matches!(self, Self::Hvi | Self::Hi)
    }
}

impl FromStr for Mode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hvi" => Ok(Self::Hvi),
            "vi" => Ok(Self::Vi),
            "hi" => Ok(Self::Hi),
            _ => Err(PipelineError::Config(format!("unknown mode '{s}' (expected hvi, vi or hi)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hvi => "hvi",
            Self::Vi => "vi",
            Self::Hi => "hi",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Estimate the spinning→solid-state extrinsic even when the manifest
    /// provides one.
    pub calibrate: bool,
    pub calib: CalibParams,
    pub features: FeatureParams,
    /// Voxel leaves applied to merged keyframe features (m).
    pub edge_leaf: f64,
    pub plane_leaf: f64,
    pub swo: SwoConfig,
    pub loop_closure: bool,
    pub loops: LoopParams,
    pub graph: GraphParams,
    /// Estimate the initial gyro bias from the first frame, assuming rest.
    pub init_gyro_bias: bool,
    /// State magnitude treated as divergence.
    pub divergence_norm: f64,
    /// Run every stage on one thread.
    pub serial: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hvi,
            calibrate: false,
            calib: CalibParams::default(),
            features: FeatureParams::default(),
            edge_leaf: 0.2,
            plane_leaf: 0.4,
            swo: SwoConfig::default(),
            loop_closure: false,
            loops: LoopParams::default(),
            graph: GraphParams::default(),
            init_gyro_bias: true,
            divergence_norm: 1e6,
            serial: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value.parse().map_err(|_| PipelineError::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, PipelineError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(PipelineError::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

impl PipelineConfig {
    /// Every recognised key.
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "calibrate",
        "calib.frames",
        "calib.voxel",
        "calib.fine_voxel",
        "calib.refine_corr_dist",
        "calib.min_corr_dist",
        "calib.thickness_k",
        "calib.thickness_voxel_scale",
        "calib.start_rotation_deg",
        "calib.start_translation",
        "gicp.k",
        "gicp.epsilon",
        "gicp.max_corr_dist",
        "gicp.max_iter",
        "gicp.tol",
        "gicp.min_points",
        "features.d_th",
        "features.k_neigh",
        "features.near_range",
        "features.edge_threshold",
        "features.plane_ratio",
        "features.plane_residual",
        "features.line_ratio",
        "features.corner_angle_deg",
        "features.edge_leaf",
        "features.plane_leaf",
        "swo.tau",
        "swo.key_angle_deg",
        "swo.key_dt",
        "swo.max_outer",
        "swo.max_inner",
        "swo.param_tol",
        "swo.huber",
        "swo.corr_radius",
        "swo.edge_nn",
        "swo.plane_nn",
        "swo.plane_max_dev",
        "swo.lidar_sigma",
        "swo.map_window",
        "loop.enabled",
        "loop.search_radius",
        "loop.min_gap",
        "loop.max_fitness",
        "loop.min_inliers",
        "loop.max_candidates",
        "icp.max_corr_dist",
        "icp.max_iter",
        "icp.tol",
        "graph.max_iter",
        "graph.tol",
        "init.gyro_bias",
        "divergence_norm",
        "serial",
    ];

    /// Sets one key. `swo.huber = 0` disables the robust loss.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "mode" => self.mode = v.parse()?,
            "calibrate" => self.calibrate = parse_bool(k, v)?,
            "calib.frames" => self.calib.frames = parse(k, v)?,
            "calib.voxel" => self.calib.voxel = parse(k, v)?,
            "calib.fine_voxel" => self.calib.fine_voxel = parse(k, v)?,
            "calib.refine_corr_dist" => self.calib.refine_corr_dist = parse(k, v)?,
            "calib.min_corr_dist" => self.calib.min_corr_dist = parse(k, v)?,
            "calib.thickness_k" => self.calib.thickness_k = parse(k, v)?,
            "calib.thickness_voxel_scale" => self.calib.thickness_voxel_scale = parse(k, v)?,
            "calib.start_rotation_deg" => self.calib.start_rotation = parse::<f64>(k, v)?.to_radians(),
            "calib.start_translation" => self.calib.start_translation = parse(k, v)?,
            "gicp.k" => self.calib.gicp.k = parse(k, v)?,
            "gicp.epsilon" => self.calib.gicp.epsilon = parse(k, v)?,
            "gicp.max_corr_dist" => self.calib.gicp.max_corr_dist = parse(k, v)?,
            "gicp.max_iter" => self.calib.gicp.max_iter = parse(k, v)?,
            "gicp.tol" => self.calib.gicp.tol = parse(k, v)?,
            "gicp.min_points" => self.calib.gicp.min_points = parse(k, v)?,
            "features.d_th" => self.features.d_th = parse(k, v)?,
            "features.k_neigh" => self.features.k_neigh = parse(k, v)?,
            "features.near_range" => self.features.near_range = parse(k, v)?,
            "features.edge_threshold" => self.features.edge_threshold = parse(k, v)?,
            "features.plane_ratio" => self.features.plane_ratio = parse(k, v)?,
            "features.plane_residual" => self.features.plane_residual = parse(k, v)?,
            "features.line_ratio" => self.features.line_ratio = parse(k, v)?,
            "features.corner_angle_deg" => self.features.corner_angle_deg = parse(k, v)?,
            "features.edge_leaf" => self.edge_leaf = parse(k, v)?,
            "features.plane_leaf" => self.plane_leaf = parse(k, v)?,
            "swo.tau" => self.swo.tau = parse(k, v)?,
            "swo.key_angle_deg" => self.swo.key_angle_deg = parse(k, v)?,
            "swo.key_dt" => self.swo.key_dt = parse(k, v)?,
            "swo.max_outer" => self.swo.max_outer = parse(k, v)?,
            "swo.max_inner" => self.swo.max_inner = parse(k, v)?,
            "swo.param_tol" => self.swo.param_tol = parse(k, v)?,
            "swo.huber" => {
                let d: f64 = parse(k, v)?;
                self.swo.huber = (d > 0.0).then_some(d);
            }
            "swo.corr_radius" => self.swo.corr_radius = parse(k, v)?,
            "swo.edge_nn" => self.swo.edge_nn = parse(k, v)?,
            "swo.plane_nn" => self.swo.plane_nn = parse(k, v)?,
            "swo.plane_max_dev" => self.swo.plane_max_dev = parse(k, v)?,
            "swo.lidar_sigma" => self.swo.lidar_sigma = parse(k, v)?,
            "swo.map_window" => self.swo.map_window = parse(k, v)?,
            "loop.enabled" => self.loop_closure = parse_bool(k, v)?,
            "loop.search_radius" => self.loops.search_radius = parse(k, v)?,
            "loop.min_gap" => self.loops.min_gap = parse(k, v)?,
            "loop.max_fitness" => self.loops.max_fitness = parse(k, v)?,
            "loop.min_inliers" => self.loops.min_inliers = parse(k, v)?,
            "loop.max_candidates" => self.loops.max_candidates = parse(k, v)?,
            "icp.max_corr_dist" => self.loops.icp.max_corr_dist = parse(k, v)?,
            "icp.max_iter" => self.loops.icp.max_iter = parse(k, v)?,
            "icp.tol" => self.loops.icp.tol = parse(k, v)?,
            "graph.max_iter" => self.graph.max_iter = parse(k, v)?,
            "graph.tol" => self.graph.tol = parse(k, v)?,
            "init.gyro_bias" => self.init_gyro_bias = parse_bool(k, v)?,
            "divergence_norm" => self.divergence_norm = parse(k, v)?,
            "serial" => self.serial = parse_bool(k, v)?,
            _ => return Err(PipelineError::Config(format!("unknown key '{k}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` assignments.
    pub fn apply<'a>(&mut self, assignments: impl IntoIterator<Item = &'a str>) -> Result<(), PipelineError> {
        for a in assignments {
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("expected key=value, got '{a}'")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses a config file: one `key = value` per line, `#` comments.
    pub fn parse_text(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| PipelineError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.swo.tau < 2 {
            return bad("swo.tau must be at least 2");
        }
        if !(self.edge_leaf > 0.0 && self.plane_leaf > 0.0) {
            return bad("voxel leaves must be positive");
        }
        if !(self.features.d_th > 0.0 && self.features.near_range > 0.0 && self.features.k_neigh > 0) {
            return bad("feature parameters must be positive");
        }
        let c = &self.calib;
        if !(c.voxel > 0.0 && c.fine_voxel > 0.0 && c.min_corr_dist > 0.0 && c.refine_corr_dist > 0.0 && c.gicp.max_corr_dist > 0.0) {
            return bad("calibration voxels and correspondence radii must be positive");
        }
        if !(c.thickness_voxel_scale >= 0.0) {
            return bad("calib.thickness_voxel_scale must be non-negative");
        }
        if !(self.swo.lidar_sigma > 0.0) {
            return bad("swo.lidar_sigma must be positive");
        }
        Ok(())
    }
}
