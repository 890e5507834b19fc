//! Serializable run outcome.

use mlio_core::precal::ExtrinsicSet;
use mlio_core::swo::WindowStats;
use mlio_core::Posed;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, PipelineConfig};
use crate::eval::Metrics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub t: f64,
    pub keyframe: usize,
    /// `[tx ty tz qw qx qy qz]` of the IMU body in the world frame.
    pub pose: [f64; 7],
}

impl TrajectoryEntry {
    pub fn pose(&self) -> Posed {
        Posed::from_record(&self.pose)
    }
}

/// Per-keyframe counts and optimizer statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    /// Index of the primary-stream frame.
    pub frame: usize,
    pub keyframe: usize,
    pub t: f64,
    pub raw_spinning: usize,
    pub spinning_edges: usize,
    pub spinning_planes: usize,
    pub raw_solid: usize,
    pub solid_edges: usize,
    pub solid_planes: usize,
    pub bad_solid: bool,
    /// Merged and downsampled counts fed to the window.
    pub merged_edges: usize,
    pub merged_planes: usize,
    pub window: WindowStats,
}

/// Accumulated wall-clock time per stage over all keyframes (ms).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub keyframes: usize,
    pub load_ms: f64,
    /// Temporal alignment, preintegration and undistortion.
    pub preprocess_ms: f64,
    /// Extraction, bad-frame test, merge and downsampling.
    pub features_ms: f64,
    /// Window optimization, marginalization and map update.
    pub optimization_ms: f64,
    pub graph_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    fn per(&self, v: f64) -> f64 {
        if self.keyframes == 0 {
            0.0
        } else {
            v / self.keyframes as f64
        }
    }

    pub fn preprocess_per_frame(&self) -> f64 {
        self.per(self.preprocess_ms)
    }

    pub fn features_per_frame(&self) -> f64 {
        self.per(self.features_ms)
    }

    pub fn optimization_per_frame(&self) -> f64 {
        self.per(self.optimization_ms)
    }

    pub fn total_per_frame(&self) -> f64 {
        self.per(self.total_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicRecord {
    pub h_to_i: [f64; 7],
    pub v_to_h: [f64; 7],
    pub v_to_i: [f64; 7],
    pub calibrated: bool,
    /// GICP fitness (m²) when calibrated.
    pub fitness: Option<f64>,
}

impl ExtrinsicRecord {
    pub fn new(set: &ExtrinsicSet, fitness: Option<f64>) -> Self {
        Self {
            h_to_i: set.h_to_i().to_record(),
            v_to_h: set.v_to_h().to_record(),
            v_to_i: set.v_to_i().to_record(),
            calibrated: fitness.is_some(),
            fitness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub from: usize,
    pub to: usize,
    pub measurement: [f64; 7],
    pub graph_initial_cost: f64,
    pub graph_final_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub frame: usize,
    pub t: f64,
    pub reason: String,
    pub last_good_frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub mode: Mode,
    pub frames_seen: usize,
    pub keyframes: usize,
    pub trajectory: Vec<TrajectoryEntry>,
    pub metrics: Option<Metrics>,
    pub bad_frames: usize,
    pub frames: Vec<FrameStats>,
    pub loop_closures: Vec<LoopRecord>,
    pub extrinsics: ExtrinsicRecord,
    pub diverged: Option<Divergence>,
    pub timing: StageTimings,
    pub config: PipelineConfig,
}

impl RunReport {
    pub fn is_diverged(&self) -> bool {
        self.diverged.is_some()
    }

    pub fn poses(&self) -> Vec<(f64, Posed)> {
        self.trajectory.iter().map(|e| (e.t, e.pose())).collect()
    }

    /// The report with wall-clock timings and the serial flag cleared, for
    /// comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.timing = StageTimings::default();
        r.config.serial = false;
        r
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    /// Trajectory as `t,px,py,pz,qw,qx,qy,qz` CSV.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("t,px,py,pz,qw,qx,qy,qz\n");
        for e in &self.trajectory {
            let cols: Vec<String> = std::iter::once(e.t).chain(e.pose).map(|v| format!("{v:?}")).collect();
            s.push_str(&cols.join(","));
            s.push('\n');
        }
        s
    }
}
