//! Ground-truth world, trajectory and LiDAR/IMU simulator producing
//! datasets in the pipeline's on-disk format.

pub mod imu;
pub mod scene;
pub mod sensor;
pub mod trajectory;
pub mod world;

use std::path::Path;
use std::sync::Arc;

use mlio_core::dataset::{
    self, Dataset, DatasetError, ImuManifest, Manifest, ScanEntry, ScanLoader, ScanStream, StreamManifest,
    FORMAT_VERSION, GROUNDTRUTH_FILE, IMU_FILE,
};
use mlio_core::imu::ImuNoise;
use mlio_core::types::{ImuSample, Scan, SensorKind, SensorModel, TimedPoint};
use mlio_core::Posed;
use rayon::prelude::*;
use thiserror::Error;

pub use imu::{simulate_imu, ImuSpec};
pub use scene::{SceneKind, Scenario};
pub use sensor::{simulate_scan, simulate_scan_labeled, simulate_scan_mounted, solid_state_model, spinning_model};
pub use trajectory::{Kinematics, TrajectorySpec};
pub use world::{Patch, World};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("patch edge vectors are parallel")]
    DegeneratePatch,
    #[error("time {t} outside trajectory span [{start}, {end}]")]
    OutOfSpan { t: f64, start: f64, end: f64 },
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Simulates scans on demand; the scan's start time selects the sweep.
#[derive(Debug, Clone)]
pub struct SimLoader {
    pub world: Arc<World>,
    pub trajectory: Arc<TrajectorySpec>,
    pub model: SensorModel,
    pub mount: Posed,
}

impl ScanLoader for SimLoader {
    fn load(&self, _index: usize, entry: &ScanEntry) -> Result<Vec<TimedPoint>, DatasetError> {
        simulate_scan_mounted(&self.world, &self.model, &self.trajectory, &self.mount, entry.t_start)
            .map(|s| s.points)
            .map_err(|e| DatasetError::Source(e.to_string()))
    }
}

impl Scenario {
    fn loader(&self, kind: SensorKind) -> SimLoader {
        SimLoader {
            world: self.world.clone(),
            trajectory: self.trajectory.clone(),
            model: *self.model(kind),
            mount: self.mount(kind),
        }
    }

    /// Scan listing; point counts are unknown until a scan is simulated and
    /// are recorded as zero.
    fn entries(&self, kind: SensorKind) -> Vec<ScanEntry> {
        let period = self.model(kind).period();
        self.sweep_starts(kind)
            .into_iter()
            .enumerate()
            .map(|(i, t)| ScanEntry { file: dataset::scan_file_name(kind, i), t_start: t, t_end: t + period, points: 0 })
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        let stream = |kind| StreamManifest { model: *self.model(kind), scans: self.entries(kind) };
        Manifest {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            gravity: self.imu.gravity.into(),
            extrinsic_h_to_i: self.h_to_i.to_record(),
            extrinsic_v_to_h: Some(self.v_to_h.to_record()),
            spinning: Some(stream(SensorKind::Spinning)),
            solid_state: Some(stream(SensorKind::SolidState)),
            imu: ImuManifest {
                file: IMU_FILE.to_string(),
                rate: self.imu.rate,
                noise: self.imu.noise.unwrap_or(ImuNoise::default()),
            },
            groundtruth: Some(GROUNDTRUTH_FILE.to_string()),
        }
    }

    pub fn simulate_imu(&self) -> Result<Vec<ImuSample>, SimError> {
        simulate_imu(&self.trajectory, &self.imu)
    }

    pub fn simulate_sweep(&self, kind: SensorKind, sweep_start: f64) -> Result<Scan, SimError> {
        simulate_scan_mounted(&self.world, self.model(kind), &self.trajectory, &self.mount(kind), sweep_start)
    }

    /// In-memory dataset whose scans are simulated lazily on load.
    pub fn dataset(&self) -> Result<Dataset, SimError> {
        let manifest = self.manifest();
        let stream = |kind| {
            ScanStream::new(*self.model(kind), self.entries(kind), Arc::new(self.loader(kind)) as Arc<dyn ScanLoader>)
        };
        Ok(Dataset::from_parts(
            manifest,
            Some(stream(SensorKind::Spinning)),
            Some(stream(SensorKind::SolidState)),
            self.simulate_imu()?,
            Some(self.groundtruth()?),
        )?)
    }

    /// Simulates every sweep and writes the dataset directory. Sweeps are
    /// generated in parallel and written as they complete.
    pub fn write(&self, dir: &Path) -> Result<Manifest, SimError> {
        std::fs::create_dir_all(dir)
            .map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
        let mut manifest = self.manifest();
        for kind in [SensorKind::Spinning, SensorKind::SolidState] {
            let entries: Vec<ScanEntry> = self
                .entries(kind)
                .into_par_iter()
                .map(|mut e| -> Result<ScanEntry, SimError> {
                    let scan = self.simulate_sweep(kind, e.t_start)?;
                    dataset::write_scan_file(&dir.join(&e.file), &scan.points)?;
                    e.points = scan.points.len();
                    Ok(e)
                })
                .collect::<Result<_, _>>()?;
            let sm = match kind {
                SensorKind::Spinning => manifest.spinning.as_mut(),
                SensorKind::SolidState => manifest.solid_state.as_mut(),
            };
            sm.expect("simulated streams are always present").scans = entries;
        }
        dataset::write_imu_csv(&dir.join(IMU_FILE), &self.simulate_imu()?)?;
        dataset::write_pose_csv(&dir.join(GROUNDTRUTH_FILE), &self.groundtruth()?)?;
        dataset::write_manifest(dir, &manifest)?;
        Ok(manifest)
    }
}

/// Writes already simulated streams in the dataset format.
pub fn write_dataset(
    dir: &Path,
    manifest: Manifest,
    spinning: &[Scan],
    solid_state: &[Scan],
    imu: &[ImuSample],
    groundtruth: Option<&[(f64, Posed)]>,
) -> Result<Manifest, SimError> {
    Ok(dataset::write_dataset(dir, manifest, spinning, solid_state, imu, groundtruth)?)
}
