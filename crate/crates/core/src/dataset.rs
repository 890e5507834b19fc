//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.json`, one binary file per scan
//! (21-byte little-endian records: f64 timestamp, f32 x/y/z, u8 ring),
//! `imu.csv` (`t,wx,wy,wz,ax,ay,az`) and optionally `groundtruth.csv`
//! (`t,px,py,pz,qw,qx,qy,qz`). Scans are loaded on demand through a
//! [`ScanLoader`], so in-memory and simulated sources share one interface.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imu::ImuNoise;
use crate::types::{ImuSample, Scan, SensorKind, SensorModel, TimedPoint};
use crate::Posed;

pub const FORMAT_VERSION: u32 = 1;
pub const RECORD_BYTES: usize = 21;
pub const MANIFEST: &str = "manifest.json";
pub const IMU_FILE: &str = "imu.csv";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.csv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: missing file")]
    Missing { path: PathBuf },
    #[error("{path}: truncated record at byte offset {offset}")]
    Truncated { path: PathBuf, offset: u64 },
    #[error("{path}: expected {expected} points, found {found}")]
    CountMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{path}: line {line}: {msg}")]
    Csv { path: PathBuf, line: u64, msg: String },
    #[error("{path}: timestamp {t} at {location} is not monotone")]
    NonMonotonic { path: PathBuf, location: String, t: f64 },
    #[error("scan index {index} out of range for {stream} stream of {len} scans")]
    ScanIndex { stream: String, index: usize, len: usize },
    #[error("{0}")]
    Source(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub file: String,
    pub t_start: f64,
    pub t_end: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub model: SensorModel,
    pub scans: Vec<ScanEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuManifest {
    pub file: String,
    pub rate: f64,
    pub noise: ImuNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    pub gravity: [f64; 3],
    /// Solid-state→IMU, `[tx ty tz qw qx qy qz]`.
    pub extrinsic_h_to_i: [f64; 7],
    /// Spinning→solid-state when known.
    #[serde(default)]
    pub extrinsic_v_to_h: Option<[f64; 7]>,
    #[serde(default)]
    pub spinning: Option<StreamManifest>,
    #[serde(default)]
    pub solid_state: Option<StreamManifest>,
    pub imu: ImuManifest,
    #[serde(default)]
    pub groundtruth: Option<String>,
}

impl Manifest {
    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    pub fn h_to_i(&self) -> Posed {
        Posed::from_record(&self.extrinsic_h_to_i)
    }

    pub fn v_to_h(&self) -> Option<Posed> {
        self.extrinsic_v_to_h.as_ref().map(Posed::from_record)
    }

    pub fn stream(&self, kind: SensorKind) -> Option<&StreamManifest> {
        match kind {
            SensorKind::Spinning => self.spinning.as_ref(),
            SensorKind::SolidState => self.solid_state.as_ref(),
        }
    }
}

pub fn scan_file_name(kind: SensorKind, index: usize) -> String {
    match kind {
        SensorKind::Spinning => format!("spinning_{index:05}.bin"),
        SensorKind::SolidState => format!("solid_{index:05}.bin"),
    }
}

pub fn encode_points(points: &[TimedPoint]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(points.len() * RECORD_BYTES);
    for p in points {
        buf.extend_from_slice(&p.t.to_le_bytes());
        for c in p.xyz {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.push(p.ring);
    }
    buf
}

/// Decodes records; a trailing partial record is reported with its offset.
pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<TimedPoint>, DatasetError> {
    let whole = bytes.len() / RECORD_BYTES;
    if whole * RECORD_BYTES != bytes.len() {
        return Err(DatasetError::Truncated { path: path.to_path_buf(), offset: (whole * RECORD_BYTES) as u64 });
    }
    Ok(bytes
        .chunks_exact(RECORD_BYTES)
        .map(|r| {
            let f = |o: usize| f32::from_le_bytes(r[o..o + 4].try_into().unwrap());
            TimedPoint { t: f64::from_le_bytes(r[0..8].try_into().unwrap()), xyz: [f(8), f(12), f(16)], ring: r[20] }
        })
        .collect())
}

pub fn write_scan_file(path: &Path, points: &[TimedPoint]) -> Result<(), DatasetError> {
    fs::write(path, encode_points(points)).map_err(io_err(path))
}

pub fn read_scan_file(path: &Path) -> Result<Vec<TimedPoint>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing { path: path.to_path_buf() });
    }
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    decode_points(&bytes, path)
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    t: f64,
    wx: f64,
    wy: f64,
    wz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> DatasetError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    DatasetError::Csv { path: path.to_path_buf(), line, msg: e.to_string() }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl Iterator<Item = T>) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(u64, T)>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing { path: path.to_path_buf() });
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let mut out = Vec::new();
    for rec in r.deserialize::<T>() {
        let line = out.len() as u64 + 2;
        out.push((line, rec.map_err(|e| csv_err(path, e))?));
    }
    Ok(out)
}

pub fn write_imu_csv(path: &Path, imu: &[ImuSample]) -> Result<(), DatasetError> {
    write_rows(
        path,
        &["t", "wx", "wy", "wz", "ax", "ay", "az"],
        imu.iter().map(|s| ImuRow {
            t: s.t,
            wx: s.gyro.x,
            wy: s.gyro.y,
            wz: s.gyro.z,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
        }),
    )
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, DatasetError> {
    let rows: Vec<(u64, ImuRow)> = read_rows(path)?;
    let mut out: Vec<ImuSample> = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        if out.last().is_some_and(|p| r.t <= p.t) {
            return Err(DatasetError::NonMonotonic { path: path.to_path_buf(), location: format!("line {line}"), t: r.t });
        }
        out.push(ImuSample::new(r.t, Vector3::new(r.wx, r.wy, r.wz), Vector3::new(r.ax, r.ay, r.az)));
    }
    Ok(out)
}

pub fn write_pose_csv(path: &Path, poses: &[(f64, Posed)]) -> Result<(), DatasetError> {
    write_rows(
        path,
        &["t", "px", "py", "pz", "qw", "qx", "qy", "qz"],
        poses.iter().map(|(t, p)| {
            let r = p.to_record();
            PoseRow { t: *t, px: r[0], py: r[1], pz: r[2], qw: r[3], qx: r[4], qy: r[5], qz: r[6] }
        }),
    )
}

pub fn read_pose_csv(path: &Path) -> Result<Vec<(f64, Posed)>, DatasetError> {
    let rows: Vec<(u64, PoseRow)> = read_rows(path)?;
    let mut out: Vec<(f64, Posed)> = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        if out.last().is_some_and(|p| r.t < p.0) {
            return Err(DatasetError::NonMonotonic { path: path.to_path_buf(), location: format!("line {line}"), t: r.t });
        }
        out.push((r.t, Posed::from_record(&[r.px, r.py, r.pz, r.qw, r.qx, r.qy, r.qz])));
    }
    Ok(out)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), DatasetError> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| DatasetError::Manifest { path: path.clone(), msg: e.to_string() })?;
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(DatasetError::Missing { path });
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest { path: path.clone(), msg: e.to_string() })?;
    if m.format_version != FORMAT_VERSION {
        return Err(DatasetError::Manifest { path, msg: format!("unsupported format_version {}", m.format_version) });
    }
    Ok(m)
}

/// Produces the points of one scan on demand.
pub trait ScanLoader: Send + Sync {
    fn load(&self, index: usize, entry: &ScanEntry) -> Result<Vec<TimedPoint>, DatasetError>;
}

/// Reads scan files relative to a dataset directory.
#[derive(Debug, Clone)]
pub struct FileLoader {
    pub dir: PathBuf,
}

impl ScanLoader for FileLoader {
    fn load(&self, _index: usize, entry: &ScanEntry) -> Result<Vec<TimedPoint>, DatasetError> {
        let path = self.dir.join(&entry.file);
        let points = read_scan_file(&path)?;
        if points.len() != entry.points {
            return Err(DatasetError::CountMismatch { path, expected: entry.points, found: points.len() });
        }
        Ok(points)
    }
}

/// Scans held in memory.
#[derive(Debug, Clone)]
pub struct MemoryLoader {
    pub scans: Vec<Vec<TimedPoint>>,
}

impl ScanLoader for MemoryLoader {
    fn load(&self, index: usize, _entry: &ScanEntry) -> Result<Vec<TimedPoint>, DatasetError> {
        self.scans.get(index).cloned().ok_or(DatasetError::ScanIndex {
            stream: "memory".into(),
            index,
            len: self.scans.len(),
        })
    }
}

/// One LiDAR stream: listing plus loader.
#[derive(Clone)]
pub struct ScanStream {
    pub model: SensorModel,
    pub entries: Vec<ScanEntry>,
    loader: Arc<dyn ScanLoader>,
    origin: PathBuf,
}

impl std::fmt::Debug for ScanStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScanStream").field("model", &self.model).field("scans", &self.entries.len()).finish()
    }
}

impl ScanStream {
    pub fn new(model: SensorModel, entries: Vec<ScanEntry>, loader: Arc<dyn ScanLoader>) -> Self {
        Self { model, entries, loader, origin: PathBuf::from("<memory>") }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads and validates scan `index`: point timestamps must be
    /// non-decreasing.
    pub fn load(&self, index: usize) -> Result<Scan, DatasetError> {
        let entry = self.entries.get(index).ok_or_else(|| DatasetError::ScanIndex {
            stream: format!("{:?}", self.model.kind),
            index,
            len: self.entries.len(),
        })?;
        let points = self.loader.load(index, entry)?;
        if let Some(k) = points.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(DatasetError::NonMonotonic {
                path: self.origin.join(&entry.file),
                location: format!("byte offset {}", (k + 1) * RECORD_BYTES),
                t: points[k + 1].t,
            });
        }
        Ok(Scan::new(entry.t_start, entry.t_end, points))
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if let Some(k) = self.entries.windows(2).position(|w| w[1].t_start <= w[0].t_start) {
            return Err(DatasetError::NonMonotonic {
                path: self.origin.join(MANIFEST),
                location: format!("scan entry {}", k + 1),
                t: self.entries[k + 1].t_start,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub spinning: Option<ScanStream>,
    pub solid_state: Option<ScanStream>,
    pub imu: Vec<ImuSample>,
    pub groundtruth: Option<Vec<(f64, Posed)>>,
}

impl Dataset {
    /// Assembles a dataset from parts, checking stream ordering.
    pub fn from_parts(
        manifest: Manifest,
        spinning: Option<ScanStream>,
        solid_state: Option<ScanStream>,
        imu: Vec<ImuSample>,
        groundtruth: Option<Vec<(f64, Posed)>>,
    ) -> Result<Self, DatasetError> {
        for s in spinning.iter().chain(solid_state.iter()) {
            s.validate()?;
        }
        Ok(Self { manifest, spinning, solid_state, imu, groundtruth })
    }

    pub fn stream(&self, kind: SensorKind) -> Option<&ScanStream> {
        match kind {
            SensorKind::Spinning => self.spinning.as_ref(),
            SensorKind::SolidState => self.solid_state.as_ref(),
        }
    }
}

/// Opens a dataset directory. Listed files must exist; IMU and ground truth
/// are read eagerly, scans lazily.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest = read_manifest(dir)?;
    let loader: Arc<dyn ScanLoader> = Arc::new(FileLoader { dir: dir.to_path_buf() });
    let mut streams = Vec::new();
    for sm in [&manifest.spinning, &manifest.solid_state] {
        streams.push(match sm {
            Some(sm) => {
                for e in &sm.scans {
                    let path = dir.join(&e.file);
                    if !path.exists() {
                        return Err(DatasetError::Missing { path });
                    }
                }
                let mut s = ScanStream::new(sm.model, sm.scans.clone(), loader.clone());
                s.origin = dir.to_path_buf();
                Some(s)
            }
            None => None,
        });
    }
    let imu = read_imu_csv(&dir.join(&manifest.imu.file))?;
    let groundtruth = match &manifest.groundtruth {
        Some(f) => Some(read_pose_csv(&dir.join(f))?),
        None => None,
    };
    let solid = streams.pop().unwrap();
    let spin = streams.pop().unwrap();
    Dataset::from_parts(manifest, spin, solid, imu, groundtruth)
}

/// Writes every stream, the IMU series, ground truth and the manifest.
/// Scan listings in `manifest` are regenerated from `scans`.
pub fn write_dataset(
    dir: &Path,
    mut manifest: Manifest,
    spinning: &[Scan],
    solid_state: &[Scan],
    imu: &[ImuSample],
    groundtruth: Option<&[(f64, Posed)]>,
) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write_stream = |kind: SensorKind, scans: &[Scan]| -> Result<Vec<ScanEntry>, DatasetError> {
        scans
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let file = scan_file_name(kind, i);
                write_scan_file(&dir.join(&file), &s.points)?;
                Ok(ScanEntry { file, t_start: s.t_start, t_end: s.t_end, points: s.points.len() })
            })
            .collect()
    };
    if let Some(sm) = manifest.spinning.as_mut() {
        sm.scans = write_stream(SensorKind::Spinning, spinning)?;
    }
    if let Some(sm) = manifest.solid_state.as_mut() {
        sm.scans = write_stream(SensorKind::SolidState, solid_state)?;
    }
    write_imu_csv(&dir.join(&manifest.imu.file), imu)?;
    match groundtruth {
        Some(gt) => {
            let name = manifest.groundtruth.clone().unwrap_or_else(|| GROUNDTRUTH_FILE.to_string());
            write_pose_csv(&dir.join(&name), gt)?;
            manifest.groundtruth = Some(name);
        }
        None => manifest.groundtruth = None,
    }
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Quatd;

    fn model(kind: SensorKind) -> SensorModel {
        SensorModel {
            kind,
            h_fov: 360.0,
            v_fov: 30.0,
            channels_or_lines: 16,
            rate: 10.0,
            points_per_sweep: 3,
            range_max: 100.0,
            range_noise_sigma: 0.0,
            pattern_seed: 0,
        }
    }

    fn manifest() -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            name: "test".into(),
            gravity: [0.0, 0.0, -9.81],
            extrinsic_h_to_i: Posed::identity().to_record(),
            extrinsic_v_to_h: None,
            spinning: Some(StreamManifest { model: model(SensorKind::Spinning), scans: vec![] }),
            solid_state: None,
            imu: ImuManifest { file: IMU_FILE.into(), rate: 200.0, noise: ImuNoise::default() },
            groundtruth: None,
        }
    }

    fn scans() -> Vec<Scan> {
        (0..3)
            .map(|k| {
                let t0 = k as f64 * 0.1;
                Scan::new(
                    t0,
                    t0 + 0.1,
                    (0..3).map(|i| TimedPoint::new(t0 + i as f64 * 0.01, &Vector3::new(1.1 * i as f64, -0.3, 2.0 / 3.0), i as u8)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let imu: Vec<_> = (0..5).map(|i| ImuSample::new(i as f64 * 0.005, Vector3::new(0.1, 1.0 / 3.0, 0.0), Vector3::new(0.0, 0.0, 9.81))).collect();
        let gt = vec![(0.0, Posed::identity()), (0.1, Posed::new(Quatd::from_yaw(0.1), Vector3::new(1.0 / 7.0, 0.0, 0.0)))];
        let m = write_dataset(dir.path(), manifest(), &scans(), &[], &imu, Some(&gt)).unwrap();
        assert_eq!(m.spinning.as_ref().unwrap().scans.len(), 3);
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        for (i, s) in scans().iter().enumerate() {
            assert_eq!(&ds.spinning.as_ref().unwrap().load(i).unwrap(), s);
        }
        assert_eq!(ds.imu, imu);
        let back = ds.groundtruth.unwrap();
        assert_eq!(back[1].0, 0.1);
        assert_eq!(back[1].1.to_record(), gt[1].1.to_record());
        assert!(ds.solid_state.is_none());
    }

    #[test]
    fn empty_imu_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), manifest(), &scans(), &[], &[], None).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert!(ds.imu.is_empty());
        let text = fs::read_to_string(dir.path().join(IMU_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn truncated_scan_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), manifest(), &scans(), &[], &[], None).unwrap();
        let path = dir.path().join(scan_file_name(SensorKind::Spinning, 1));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        let err = ds.spinning.as_ref().unwrap().load(1).unwrap_err();
        assert!(matches!(err, DatasetError::Truncated { offset: 42, .. }), "{err}");
        assert!(err.to_string().contains("byte offset 42"));
    }

    #[test]
    fn missing_imu_names_path() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), manifest(), &scans(), &[], &[], None).unwrap();
        fs::remove_file(dir.path().join(IMU_FILE)).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("imu.csv"), "{err}");
    }

    #[test]
    fn non_monotone_imu_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let imu = vec![
            ImuSample::new(0.0, Vector3::zeros(), Vector3::zeros()),
            ImuSample::new(0.01, Vector3::zeros(), Vector3::zeros()),
            ImuSample::new(0.005, Vector3::zeros(), Vector3::zeros()),
        ];
        write_dataset(dir.path(), manifest(), &scans(), &[], &imu, None).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::NonMonotonic { .. }));
        assert!(err.to_string().contains("line 4"), "{err}");
    }
}
