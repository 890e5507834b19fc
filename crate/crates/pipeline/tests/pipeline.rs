use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use mlio_core::dataset::{Dataset, DatasetError, ScanEntry, ScanLoader, ScanStream};
use mlio_core::types::{SensorKind, TimedPoint};
use mlio_core::Posed;
use mlio_core::Quatd;
use mlio_pipeline::map::LABEL_PLANE;
use mlio_pipeline::{evaluate, read_ply, run_pipeline, write_ply, Mode, PipelineConfig};
use mlio_simkit::scene::{self, Scenario};
use nalgebra::Vector3;

fn config(mode: Mode) -> PipelineConfig {
    PipelineConfig { mode, ..PipelineConfig::default() }
}

fn path_length(gt: &[(f64, Posed)]) -> f64 {
    gt.windows(2).map(|w| (w[1].1.translation - w[0].1.translation).norm()).sum()
}

/// Transform taking the estimator's world frame onto the simulator's.
fn first_pose_alignment(traj: &[(f64, Posed)], gt: &[(f64, Posed)]) -> Posed {
    let (t0, est0) = traj[0];
    let g = gt.iter().min_by(|a, b| (a.0 - t0).abs().total_cmp(&(b.0 - t0).abs())).unwrap();
    g.1.compose(&est0.inverse())
}

#[test]
fn static_noiseless_end_to_end_below_a_millimetre() {
    let ds = scene::static_scene().unwrap().noiseless().dataset().unwrap();
    for mode in [Mode::Hvi, Mode::Vi, Mode::Hi] {
        let out = run_pipeline(&ds, &config(mode)).unwrap();
        let m = out.report.metrics.expect("ground truth present");
        assert!(!out.report.is_diverged());
        assert!(m.end_to_end_error_m < 1e-3, "{mode}: {}", m.end_to_end_error_m);
    }
}

#[test]
fn office_loop_hvi_within_half_percent_of_path() {
    let sc = scene::office().unwrap();
    let ds = sc.dataset().unwrap();
    let out = run_pipeline(&ds, &config(Mode::Hvi)).unwrap();
    let gt = ds.groundtruth.as_ref().unwrap();
    let m = out.report.metrics.unwrap();
    let bound = 0.005 * path_length(gt);
    assert!(m.end_to_end_error_m < bound, "{} vs {bound}", m.end_to_end_error_m);
    assert!(out.report.keyframes >= 10);
    let t: Vec<f64> = out.report.trajectory.iter().map(|e| e.t).collect();
    assert!(t.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(evaluate(&out.report.poses(), gt).unwrap(), m);
}

#[test]
fn office_map_wall_is_flat_after_export() {
    let ds = scene::office().unwrap().dataset().unwrap();
    let out = run_pipeline(&ds, &config(Mode::Hvi)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.ply");
    write_ply(&path, &out.map).unwrap();
    let map = read_ply(&path).unwrap();
    assert_eq!(map, out.map);
    let align = first_pose_alignment(&out.report.poses(), ds.groundtruth.as_ref().unwrap());
    let wall: Vec<Vector3<f64>> = map
        .iter()
        .filter(|p| p.label == LABEL_PLANE)
        .map(|p| align.apply(&Vector3::new(p.xyz[0] as f64, p.xyz[1] as f64, p.xyz[2] as f64)))
        .filter(|p| (p.x - 6.0).abs() < 0.15 && p.y.abs() < 4.0 && p.z > -0.9 && p.z < 1.5)
        .collect();
    assert!(wall.len() > 100, "{} wall points", wall.len());
    let rms = (wall.iter().map(|p| (p.x - 6.0).powi(2)).sum::<f64>() / wall.len() as f64).sqrt();
    assert!(rms < 0.03, "wall RMS {rms}");
}

#[test]
fn corridor_hi_engages_bad_frame_gate() {
    let ds = scene::corridor().unwrap().truncated(10.0).unwrap().dataset().unwrap();
    let out = run_pipeline(&ds, &config(Mode::Hi)).unwrap();
    assert!(out.report.bad_frames > 0);
    assert_eq!(out.report.bad_frames, out.report.frames.iter().filter(|f| f.bad_solid).count());
}

#[test]
fn feature_counts_never_exceed_raw_points() {
    let ds = scene::office().unwrap().truncated(8.0).unwrap().dataset().unwrap();
    let out = run_pipeline(&ds, &config(Mode::Hvi)).unwrap();
    assert!(!out.report.frames.is_empty());
    for f in &out.report.frames {
        assert!(f.raw_spinning > 0 && f.raw_solid > 0);
        assert!(f.spinning_edges + f.spinning_planes <= f.raw_spinning, "{f:?}");
        assert!(f.solid_edges + f.solid_planes <= f.raw_solid, "{f:?}");
    }
}

#[test]
fn serial_and_parallel_runs_are_bit_identical() {
    let ds = scene::office().unwrap().truncated(8.0).unwrap().dataset().unwrap();
    let a = run_pipeline(&ds, &config(Mode::Hvi)).unwrap();
    let b = run_pipeline(&ds, &PipelineConfig { serial: true, ..config(Mode::Hvi) }).unwrap();
    let c = run_pipeline(&ds, &config(Mode::Hvi)).unwrap();
    assert_eq!(a.report.without_timing(), b.report.without_timing());
    assert_eq!(a.report.without_timing(), c.report.without_timing());
    assert_eq!(a.report.trajectory_csv(), b.report.trajectory_csv());
    assert_eq!(a.map, b.map);
}

struct CountingLoader {
    inner: Arc<dyn ScanLoader>,
    calls: Arc<AtomicUsize>,
}

impl ScanLoader for CountingLoader {
    fn load(&self, index: usize, entry: &ScanEntry) -> Result<Vec<TimedPoint>, DatasetError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.load(index, entry)
    }
}

fn counted(sc: &Scenario, kind: SensorKind, calls: &Arc<AtomicUsize>) -> ScanStream {
    let inner = Arc::new(mlio_simkit::SimLoader {
        world: sc.world.clone(),
        trajectory: sc.trajectory.clone(),
        model: *sc.model(kind),
        mount: sc.mount(kind),
    });
    let entries = sc.manifest().stream(kind).unwrap().scans.clone();
    ScanStream::new(*sc.model(kind), entries, Arc::new(CountingLoader { inner, calls: calls.clone() }))
}

fn counted_dataset(sc: &Scenario) -> (Dataset, Arc<AtomicUsize>, Arc<AtomicUsize>) {
    let (spin, solid) = (Arc::new(AtomicUsize::new(0)), Arc::new(AtomicUsize::new(0)));
    let ds = Dataset::from_parts(
        sc.manifest(),
        Some(counted(sc, SensorKind::Spinning, &spin)),
        Some(counted(sc, SensorKind::SolidState, &solid)),
        sc.simulate_imu().unwrap(),
        Some(sc.groundtruth().unwrap()),
    )
    .unwrap();
    (ds, spin, solid)
}

#[test]
fn single_sensor_modes_never_load_the_other_stream() {
    let sc = scene::office().unwrap().truncated(5.0).unwrap();
    let (ds, spin, solid) = counted_dataset(&sc);
    run_pipeline(&ds, &config(Mode::Vi)).unwrap();
    assert!(spin.load(Ordering::SeqCst) > 0);
    assert_eq!(solid.load(Ordering::SeqCst), 0);

    let (ds, spin, solid) = counted_dataset(&sc);
    run_pipeline(&ds, &config(Mode::Hi)).unwrap();
    assert!(solid.load(Ordering::SeqCst) > 0);
    assert_eq!(spin.load(Ordering::SeqCst), 0);

    let (ds, spin, solid) = counted_dataset(&sc);
    run_pipeline(&ds, &config(Mode::Hvi)).unwrap();
    assert!(spin.load(Ordering::SeqCst) > 0 && solid.load(Ordering::SeqCst) > 0);
}

#[test]
fn vi_without_known_extrinsic_is_rejected() {
    let sc = scene::office().unwrap().truncated(5.0).unwrap();
    let mut ds = sc.dataset().unwrap();
    ds.manifest.extrinsic_v_to_h = None;
    assert!(run_pipeline(&ds, &config(Mode::Vi)).is_err());
}

#[test]
fn hvi_calibrates_when_extrinsic_unknown() {
    let sc = scene::office().unwrap().truncated(5.0).unwrap();
    let mut ds = sc.dataset().unwrap();
    ds.manifest.extrinsic_v_to_h = None;
    let out = run_pipeline(&ds, &config(Mode::Hvi)).unwrap();
    assert!(out.report.extrinsics.calibrated);
    let est = Posed::from_record(&out.report.extrinsics.v_to_h);
    let err = sc.v_to_h.inverse().compose(&est);
    assert!(err.translation.norm() < 2e-2, "{:?}", err.translation);
    assert!(err.rotation.angle_to(&Quatd::identity()).to_degrees() < 0.5);
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let ds = scene::static_scene().unwrap().truncated(2.0).unwrap().dataset().unwrap();
    let mut cfg = config(Mode::Hvi);
    cfg.set("swo.tau", "1").unwrap();
    assert!(run_pipeline(&ds, &cfg).is_err());
}

#[test]
fn office_loop_closure_is_deterministic_and_reduces_graph_cost() {
    let ds = scene::office().unwrap().dataset().unwrap();
    let mut cfg = config(Mode::Hvi);
    cfg.set("loop.enabled", "true").unwrap();
    let a = run_pipeline(&ds, &cfg).unwrap();
    let b = run_pipeline(&ds, &cfg).unwrap();
    assert!(!a.report.loop_closures.is_empty());
    assert_eq!(a.report.loop_closures, b.report.loop_closures);
    assert_eq!(a.graph.loop_count(), a.report.loop_closures.len());
    for l in &a.report.loop_closures {
        assert!(l.graph_final_cost <= l.graph_initial_cost);
    }
    let bound = 0.005 * path_length(ds.groundtruth.as_ref().unwrap());
    assert!(a.report.metrics.unwrap().end_to_end_error_m < bound);
}

#[test]
fn noiseless_hall_loop_stays_within_half_percent() {
    let ds = scene::hall().unwrap().noiseless().dataset().unwrap();
    let out = run_pipeline(&ds, &config(Mode::Hvi)).unwrap();
    let gt = ds.groundtruth.as_ref().unwrap();
    let bound = 0.005 * path_length(gt);
    assert!(out.report.keyframes >= 30, "{} keyframes", out.report.keyframes);
    let align = first_pose_alignment(&out.report.poses(), gt);
    let worst = out
        .report
        .poses()
        .iter()
        .map(|(t, p)| {
            let g = gt.iter().min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs())).unwrap();
            (align.compose(p).translation - g.1.translation).norm()
        })
        .fold(0.0, f64::max);
    assert!(worst < bound, "worst keyframe error {worst} vs {bound}");
}
