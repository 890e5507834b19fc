//! End-to-end orchestration: calibration, temporal alignment,
//! preintegration, undistortion, feature fusion, keyframe gating, window
//! optimization and the pose-graph backend.

use std::collections::BTreeMap;
use std::time::Instant;

use mlio_core::dataset::{Dataset, ScanStream};
use mlio_core::features::{
    detect_bad_frame, extract_features, merge_features, voxel_downsample2, FeatureCloud,
};
use mlio_core::geom::NAV_DIM;
use mlio_core::imu::{
    gravity_aligned_attitude, predict_state, preintegrate, undistort_scan, ImuNoise, PreintegratedImu,
    SweepMotion,
};
use mlio_core::posegraph::{add_keyframe_node, detect_loop, optimize_graph, PoseGraph};
use mlio_core::precal::{align_time_domain, calibrate_extrinsics, AlignmentQueue, ExtrinsicSet, GicpResult};
use mlio_core::swo::{
    imu_rotation_angle, marginalize_oldest, optimize_window, select_keyframe, update_local_map, Keyframe,
    LocalFeatureMap, MarginalPrior, Vector15,
};
use mlio_core::types::{imu_window, ImuSample, Scan, SensorKind};
use mlio_core::{NavStated, Posed};
use nalgebra::Vector3;

use crate::config::{Mode, PipelineConfig};
use crate::eval::evaluate;
use crate::map::{map_points, MapPoint};
use crate::report::{Divergence, ExtrinsicRecord, FrameStats, LoopRecord, RunReport, StageTimings, TrajectoryEntry};
use crate::PipelineError;

/// Duration of the assumed-stationary prefix used for initialization (s).
pub const INIT_WINDOW: f64 = 0.5;

/// Information of the prior anchoring the first keyframe, in tangent order
/// `[δθ, δp, δv, δb_a, δb_g]`.
fn anchor_information() -> Vector15 {
    let mut d = Vector15::zeros();
    for i in 0..NAV_DIM {
        d[i] = match i / 3 {
            0 | 1 => 1e8,
            2 => 1e4,
            3 => 4e2,
            _ => 1e4,
        };
    }
    d
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// World-frame feature map at the final keyframe poses.
    pub map: Vec<MapPoint>,
    pub graph: PoseGraph,
}

/// Runs the pipeline. With `cfg.serial` every parallel stage executes on a
/// single-thread pool; results are identical either way.
pub fn run_pipeline(ds: &Dataset, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    if cfg.serial {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
        pool.install(|| Runner::new(ds, cfg)?.run())
    } else {
        Runner::new(ds, cfg)?.run()
    }
}

/// Estimates the spinning→solid-state extrinsic from the first
/// `cfg.calib.frames` sweeps of both streams.
pub fn calibrate_dataset(ds: &Dataset, cfg: &PipelineConfig) -> Result<(ExtrinsicSet, GicpResult), PipelineError> {
    let (Some(v), Some(h)) = (&ds.spinning, &ds.solid_state) else {
        return Err(PipelineError::Data("calibration needs both LiDAR streams".into()));
    };
    let n = cfg.calib.frames;
    let load = |s: &ScanStream| -> Result<Vec<Scan>, PipelineError> {
        (0..n.min(s.len())).map(|i| s.load(i).map_err(PipelineError::from)).collect()
    };
    let init = ds.manifest.v_to_h().unwrap_or_else(Posed::identity);
    let (vs, hs) = (load(v)?, load(h)?);
    Ok(calibrate_extrinsics(&vs, &hs, &ds.manifest.h_to_i(), &init, &cfg.calib)?)
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    ds: &'a Dataset,
    imu: &'a [ImuSample],
    noise: ImuNoise,
    g: Vector3<f64>,
    primary: &'a ScanStream,
    primary_kind: SensorKind,
    secondary: Option<&'a ScanStream>,
    extr: ExtrinsicSet,
    extr_record: ExtrinsicRecord,
    queue: AlignmentQueue,
    next_secondary: usize,
    window: Vec<Keyframe>,
    prior: MarginalPrior,
    map: LocalFeatureMap,
    graph: PoseGraph,
    finished: Vec<(usize, f64, FeatureCloud)>,
    frames: Vec<FrameStats>,
    loops: Vec<LoopRecord>,
    timing: StageTimings,
    bad_frames: usize,
    frames_seen: usize,
    last_good: Option<usize>,
}

/// Processing outcome of one keyframe.
enum Step {
    Ok,
    Diverged(String),
}

impl<'a> Runner<'a> {
    fn new(ds: &'a Dataset, cfg: &'a PipelineConfig) -> Result<Self, PipelineError> {
        let missing = |what: &str| PipelineError::Data(format!("mode {} needs the {what} stream", cfg.mode));
        let (primary_kind, primary, secondary) = match cfg.mode {
            Mode::Hvi => (
                SensorKind::Spinning,
                ds.spinning.as_ref().ok_or_else(|| missing("spinning"))?,
                Some(ds.solid_state.as_ref().ok_or_else(|| missing("solid-state"))?),
            ),
            Mode::Vi => (SensorKind::Spinning, ds.spinning.as_ref().ok_or_else(|| missing("spinning"))?, None),
            Mode::Hi => (SensorKind::SolidState, ds.solid_state.as_ref().ok_or_else(|| missing("solid-state"))?, None),
        };
        let h_to_i = ds.manifest.h_to_i();
        let (extr, fitness) = match (cfg.mode, ds.manifest.v_to_h()) {
            (Mode::Hvi, v_to_h) if cfg.calibrate || v_to_h.is_none() => {
                let (set, res) = calibrate_dataset(ds, cfg)?;
                (set, Some(res.fitness))
            }
            (Mode::Vi, None) => {
                return Err(PipelineError::Data("mode vi needs the spinning→solid-state extrinsic in the manifest".into()))
            }
            (_, v_to_h) => (ExtrinsicSet::new(h_to_i, v_to_h.unwrap_or_else(Posed::identity)), None),
        };
        if ds.imu.len() < 2 {
            return Err(PipelineError::Data("IMU series has fewer than 2 samples".into()));
        }
        Ok(Self {
            cfg,
            ds,
            imu: &ds.imu,
            noise: ds.manifest.imu.noise,
            g: ds.manifest.gravity(),
            primary,
            primary_kind,
            secondary,
            extr,
            extr_record: ExtrinsicRecord::new(&extr, fitness),
            queue: AlignmentQueue::new(),
            next_secondary: 0,
            window: Vec::new(),
            prior: MarginalPrior::empty(),
            map: LocalFeatureMap::new(cfg.swo.map_window),
            graph: PoseGraph::new(),
            finished: Vec::new(),
            frames: Vec::new(),
            loops: Vec::new(),
            timing: StageTimings::default(),
            bad_frames: 0,
            frames_seen: 0,
            last_good: None,
        })
    }

    fn mount(&self, kind: SensorKind) -> Posed {
        match kind {
            SensorKind::Spinning => self.extr.v_to_i(),
            SensorKind::SolidState => self.extr.h_to_i(),
        }
    }

    fn window_delta(&self, t0: f64, t1: f64, state: &NavStated) -> Option<Result<PreintegratedImu, PipelineError>> {
        let w = imu_window(self.imu, t0, t1)?;
        Some(preintegrate(&w, &mlio_core::imu::Bias::of(state), &self.noise).map_err(PipelineError::from))
    }

    /// Stationary initialization: gravity-aligned attitude with zero yaw,
    /// zero velocity and the mean gyro reading as gyro bias.
    fn initial_state(&self, t_end: f64) -> NavStated {
        let samples: Vec<&ImuSample> = self.imu.iter().take_while(|s| s.t <= t_end + 1e-9).collect();
        let n = samples.len().max(1) as f64;
        let acc = samples.iter().fold(Vector3::zeros(), |a, s| a + s.accel) / n;
        let gyro = samples.iter().fold(Vector3::zeros(), |a, s| a + s.gyro) / n;
        let mut x = NavStated::identity();
        x.q = gravity_aligned_attitude(&acc);
        if self.cfg.init_gyro_bias {
            x.bg = gyro;
        }
        x
    }

    fn run(mut self) -> Result<RunOutput, PipelineError> {
        let t_run = Instant::now();
        let imu_t0 = self.imu[0].t;
        let imu_t1 = self.imu[self.imu.len() - 1].t;
        let entries = &self.primary.entries;
        let Some(first) = entries.iter().position(|e| e.t_start >= imu_t0 - 1e-9 && e.t_end >= imu_t0 + INIT_WINDOW)
        else {
            return Err(PipelineError::Data("no primary frame after the initialization window".into()));
        };
        let mut diverged = None;
        let state0 = self.initial_state(entries[first].t_end);
        self.prior = MarginalPrior::anchor(0, &state0, &anchor_information());
        self.frames_seen = first + 1;
        match self.process(first, 0, state0, None)? {
            Step::Ok => self.last_good = Some(first),
            Step::Diverged(reason) => diverged = Some(self.divergence(first, reason)),
        }
        let mut next_id = 1;
        if diverged.is_none() {
            for i in first + 1..entries.len() {
                let e = &entries[i];
                if e.t_end > imu_t1 + 1e-9 {
                    break;
                }
                self.frames_seen = i + 1;
                let last = self.window.last().expect("window holds the latest keyframe");
                let (t_last, last_state) = (last.t, last.state);
                let Some(delta) = self.window_delta(t_last, e.t_end, &last_state) else { break };
                let delta = delta?;
                if !select_keyframe(imu_rotation_angle(&delta), e.t_end - t_last, &self.cfg.swo) {
                    continue;
                }
                let pred = predict_state(&last_state, &delta, &self.g);
                let step = if self.healthy(&pred) {
                    self.process(i, next_id, pred, Some(delta))?
                } else {
                    Step::Diverged("IMU prediction left the valid state range".into())
                };
                match step {
                    Step::Ok => self.last_good = Some(i),
                    Step::Diverged(reason) => {
                        diverged = Some(self.divergence(i, reason));
                        break;
                    }
                }
                next_id += 1;
            }
        }
        let pending: Vec<Keyframe> = std::mem::take(&mut self.window);
        for kf in pending {
            if self.healthy(&kf.state) {
                self.finalize(kf)?;
            }
        }
        self.timing.total_ms = ms(t_run);
        self.finish(diverged)
    }

    fn divergence(&self, frame: usize, reason: String) -> Divergence {
        Divergence { frame, t: self.primary.entries[frame].t_end, reason, last_good_frame: self.last_good }
    }

    fn healthy(&self, x: &NavStated) -> bool {
        x.is_finite() && x.max_abs() < self.cfg.divergence_norm
    }

    /// Loads, deskews, extracts and optimizes one keyframe.
    fn process(
        &mut self,
        frame: usize,
        id: usize,
        pred: NavStated,
        delta: Option<PreintegratedImu>,
    ) -> Result<Step, PipelineError> {
        let cfg = self.cfg;
        let t_load = Instant::now();
        let primary = self.primary.load(frame)?;
        let secondary_scans = match self.secondary {
            Some(h) => {
                let mut scans = Vec::new();
                while self.next_secondary < h.len() && h.entries[self.next_secondary].t_start <= primary.t_end {
                    let k = self.next_secondary;
                    self.next_secondary += 1;
                    if h.entries[k].t_end >= primary.t_start {
                        scans.push(h.load(k)?);
                    }
                }
                scans
            }
            None => Vec::new(),
        };
        self.timing.load_ms += ms(t_load);

        let t_pre = Instant::now();
        let Some(sweep_delta) = self.window_delta(primary.t_start, primary.t_end, &pred) else {
            return Err(PipelineError::Data(format!("IMU does not cover frame {frame}")));
        };
        let motion = SweepMotion::from_end_state(&sweep_delta?, &pred, &self.g);
        let deskew_primary = undistort_scan(&primary, &motion.with_extrinsic(self.mount(self.primary_kind)))?;
        let deskew_secondary = if self.secondary.is_some() {
            for s in &secondary_scans {
                self.queue.push_scan(s)?;
            }
            let cut = align_time_domain(&mut self.queue, &primary);
            Some(undistort_scan(&cut, &motion.with_extrinsic(self.extr.h_to_i()))?)
        } else {
            None
        };
        self.timing.preprocess_ms += ms(t_pre);

        let t_feat = Instant::now();
        let fp = &cfg.features;
        let mut stats = FrameStats { frame, keyframe: id, t: primary.t_end, ..Default::default() };
        let f_primary = extract_features(&deskew_primary, self.primary_kind, fp);
        let f_secondary = deskew_secondary.as_ref().map(|s| extract_features(s, SensorKind::SolidState, fp));
        let (f_v, f_h, raw_v, raw_h) = match self.primary_kind {
            SensorKind::Spinning => (Some(&f_primary), f_secondary.as_ref(), primary.len(), deskew_secondary.as_ref().map_or(0, Scan::len)),
            SensorKind::SolidState => (None, Some(&f_primary), 0, primary.len()),
        };
        let bad = f_h.is_some_and(|h| detect_bad_frame(h, fp));
        if bad {
            self.bad_frames += 1;
        }
        stats.raw_spinning = raw_v;
        stats.raw_solid = raw_h;
        if let Some(v) = f_v {
            (stats.spinning_edges, stats.spinning_planes) = (v.edges.len(), v.planes.len());
        }
        if let Some(h) = f_h {
            (stats.solid_edges, stats.solid_planes) = (h.edges.len(), h.planes.len());
        }
        stats.bad_solid = bad;
        let merged = merge_features(f_v, f_h, &self.extr, bad)?;
        let features = voxel_downsample2(&merged, cfg.edge_leaf, cfg.plane_leaf)?;
        stats.merged_edges = features.edges.len();
        stats.merged_planes = features.planes.len();
        self.timing.features_ms += ms(t_feat);

        let t_opt = Instant::now();
        self.window.push(Keyframe { id, t: primary.t_end, features, delta, state: pred });
        let result = optimize_window(&mut self.window, &self.map, &self.prior, &self.g, &cfg.swo);
        let outcome = match result {
            Err(e) => Step::Diverged(e.to_string()),
            Ok(ws) => {
                stats.window = ws;
                if self.window.iter().all(|k| self.healthy(&k.state)) {
                    Step::Ok
                } else {
                    Step::Diverged("window state is non-finite or exceeds the divergence norm".into())
                }
            }
        };
        if let Step::Diverged(_) = outcome {
            self.window.pop();
            self.timing.optimization_ms += ms(t_opt);
            self.frames.push(stats);
            self.timing.keyframes += 1;
            return Ok(outcome);
        }
        let newest = self.window.last().unwrap();
        update_local_map(&mut self.map, newest, &newest.state);
        let mut retired = None;
        if self.window.len() >= cfg.swo.tau {
            match marginalize_oldest(&self.window, &self.map, &self.prior, &self.g, &cfg.swo) {
                Ok(p) => self.prior = p,
                Err(e) => {
                    self.timing.optimization_ms += ms(t_opt);
                    self.frames.push(stats);
                    self.timing.keyframes += 1;
                    return Ok(Step::Diverged(e.to_string()));
                }
            }
            retired = Some(self.window.remove(0));
        }
        self.timing.optimization_ms += ms(t_opt);

        let t_graph = Instant::now();
        if let Some(kf) = retired {
            self.finalize(kf)?;
        }
        self.timing.graph_ms += ms(t_graph);
        self.frames.push(stats);
        self.timing.keyframes += 1;
        Ok(Step::Ok)
    }

    /// Moves a keyframe out of the window into the pose graph, running loop
    /// detection when enabled.
    fn finalize(&mut self, kf: Keyframe) -> Result<(), PipelineError> {
        add_keyframe_node(&mut self.graph, kf.id, &kf.state, None)?;
        self.graph.attach_cloud(kf.id, kf.features.all_positions())?;
        if self.cfg.loop_closure {
            if let Some(edge) = detect_loop(&self.graph, kf.id, &self.cfg.loops, None)? {
                let (from, to, measurement) = (edge.i, edge.j, edge.measurement.to_record());
                self.graph.add_edge(edge)?;
                let sol = optimize_graph(&self.graph, &self.cfg.graph)?;
                self.graph.set_poses(&sol.poses);
                self.loops.push(LoopRecord {
                    from,
                    to,
                    measurement,
                    graph_initial_cost: sol.initial_cost,
                    graph_final_cost: sol.final_cost,
                });
            }
        }
        self.finished.push((kf.id, kf.t, kf.features));
        Ok(())
    }

    fn finish(self, diverged: Option<Divergence>) -> Result<RunOutput, PipelineError> {
        let nodes: &BTreeMap<usize, Posed> = self.graph.nodes();
        let mut trajectory = Vec::with_capacity(self.finished.len());
        let mut map = Vec::new();
        for (id, t, features) in &self.finished {
            let pose = nodes[id];
            trajectory.push(TrajectoryEntry { t: *t, keyframe: *id, pose: pose.to_record() });
            map.extend(map_points(features, &pose));
        }
        let metrics = match (&self.ds.groundtruth, &diverged) {
            (Some(gt), None) if !trajectory.is_empty() => {
                let est: Vec<(f64, Posed)> = trajectory.iter().map(|e| (e.t, e.pose())).collect();
                Some(evaluate(&est, gt)?)
            }
            _ => None,
        };
        let report = RunReport {
            dataset: self.ds.manifest.name.clone(),
            mode: self.cfg.mode,
            frames_seen: self.frames_seen,
            keyframes: trajectory.len(),
            trajectory,
            metrics,
            bad_frames: self.bad_frames,
            frames: self.frames,
            loop_closures: self.loops,
            extrinsics: self.extr_record,
            diverged,
            timing: self.timing,
            config: self.cfg.clone(),
        };
        Ok(RunOutput { report, map, graph: self.graph })
    }
}
