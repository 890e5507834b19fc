//! Union feature extraction for spinning and solid-state scans.
//!
//! Points are grouped into rings (channels or scan lines), ordered by
//! emission time, checked for depth continuity and then labeled from the
//! scatter of a window along the ring: smooth runs become plane points,
//! creases between two line fits become corner points and surface ends in
//! front of a depth jump become break points. Corners and breaks together
//! form the edge set.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::precal::ExtrinsicSet;
use crate::types::{Scan, SensorKind, TimedPoint};

/// Ring id marking a point whose channel is unknown.
pub const RING_UNKNOWN: u8 = u8::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("feature cloud in frame {got:?}, expected {expected:?}")]
    FrameMismatch { expected: Frame, got: Frame },
    #[error("voxel leaf must be positive, got {0}")]
    InvalidLeaf(f64),
}

/// Coordinate frame a feature cloud is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    /// spinning LiDAR
    V,
    /// solid-state LiDAR
    H,
    /// IMU / body
    I,
    /// world
    W,
}

impl Frame {
    pub fn of(kind: SensorKind) -> Self {
        match kind {
            SensorKind::Spinning => Frame::V,
            SensorKind::SolidState => Frame::H,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    /// Continuity depth threshold (m).
    pub d_th: f64,
    /// Window half-width along the ring.
    pub k_neigh: usize,
    /// Points closer than this are ignored by the bad-frame test (m).
    pub near_range: f64,
    /// Minimum edge count for a usable solid-state frame.
    pub edge_threshold: usize,
    /// Maximum λ2/λ1 of a window for plane candidacy.
    pub plane_ratio: f64,
    /// Maximum RMS distance of window points from their line fit (m).
    pub plane_residual: f64,
    /// Maximum λ2/λ1 of each half-window in the corner test.
    pub line_ratio: f64,
    /// Minimum angle between the two half-window lines at a corner (deg).
    pub corner_angle_deg: f64,
    /// Channel layout used when spinning points carry no ring id.
    pub channels: usize,
    pub channel_spacing_deg: f64,
    pub lowest_channel_deg: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            d_th: 0.3,
            k_neigh: 5,
            near_range: 2.0,
            edge_threshold: 100,
            plane_ratio: 0.05,
            plane_residual: 0.02,
            line_ratio: 0.1,
            corner_angle_deg: 30.0,
            channels: 16,
            channel_spacing_deg: 2.0,
            lowest_channel_deg: -15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ring {
    pub id: u8,
    pub points: Vec<TimedPoint>,
}

/// Scan points grouped by ring, each ring sorted by timestamp.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RingSet {
    pub rings: Vec<Ring>,
    /// Points whose elevation fell outside the channel span and were clamped.
    pub clamped: usize,
}

impl RingSet {
    pub fn point_count(&self) -> usize {
        self.rings.iter().map(|r| r.points.len()).sum()
    }
}

/// Channel index of a spinning point from its elevation angle (floor rule at
/// bucket boundaries). Returns the index and whether it was clamped.
pub fn channel_of(p: &Vector3<f64>, params: &FeatureParams) -> (u8, bool) {
    let elev = p.z.atan2((p.x * p.x + p.y * p.y).sqrt()).to_degrees();
    let lower = params.lowest_channel_deg - params.channel_spacing_deg / 2.0;
    let idx = ((elev - lower) / params.channel_spacing_deg).floor();
    let max = params.channels as f64 - 1.0;
    if idx < 0.0 {
        (0, true)
    } else if idx > max {
        (max as u8, true)
    } else {
        (idx as u8, false)
    }
}

pub fn organize_scan(scan: &Scan, kind: SensorKind, params: &FeatureParams) -> RingSet {
    let mut groups: std::collections::BTreeMap<u8, Vec<TimedPoint>> = Default::default();
    let mut clamped = 0;
    for pt in &scan.points {
        let mut pt = *pt;
        if pt.ring == RING_UNKNOWN && kind == SensorKind::Spinning {
            let (ch, c) = channel_of(&pt.pos(), params);
            clamped += c as usize;
            pt.ring = ch;
        }
        groups.entry(pt.ring).or_default().push(pt);
    }
    let rings = groups
        .into_iter()
        .map(|(id, mut points)| {
            points.sort_by(|a, b| a.t.total_cmp(&b.t));
            Ring { id, points }
        })
        .collect();
    RingSet { rings, clamped }
}

/// A point is continuous when its depth differs from both ring neighbours by
/// less than `d_th` (endpoints test their single neighbour).
pub fn mark_continuity(ring: &[TimedPoint], d_th: f64) -> Vec<bool> {
    let depth: Vec<f64> = ring.iter().map(TimedPoint::depth).collect();
    let n = depth.len();
    (0..n)
        .map(|i| {
            let prev_ok = i == 0 || (depth[i] - depth[i - 1]).abs() < d_th;
            let next_ok = i + 1 >= n || (depth[i] - depth[i + 1]).abs() < d_th;
            n == 1 || (prev_ok && next_ok)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointLabel {
    None,
    Plane,
    Corner,
    Break,
}

/// Eigenvalues (descending) and principal eigenvector of a symmetric 3×3.
pub(crate) fn sym3_eigen(a: &Matrix3<f64>) -> ([f64; 3], Vector3<f64>) {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let (e1, e2, e3);
    if p1 <= 1e-30 * (a.norm_squared() + 1e-300) {
        let mut d = [(a[(0, 0)], 0usize), (a[(1, 1)], 1), (a[(2, 2)], 2)];
        d.sort_by(|x, y| y.0.total_cmp(&x.0));
        let mut v = Vector3::zeros();
        v[d[0].1] = 1.0;
        return ([d[0].0, d[1].0, d[2].0], v);
    } else {
        let q = a.trace() / 3.0;
        let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = (a - Matrix3::identity() * q) / p;
        let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        e1 = q + 2.0 * p * phi.cos();
        e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        e2 = 3.0 * q - e1 - e3;
    }
    let m = a - Matrix3::identity() * e1;
    let (r0, r1, r2) = (m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose());
    let cands = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = cands.iter().max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared())).unwrap();
    let v = if best.norm_squared() > 0.0 { best.normalize() } else { Vector3::x() };
    ([e1, e2, e3], v)
}

/// Scatter statistics of a point run.
struct Scatter {
    eig: [f64; 3],
    dir: Vector3<f64>,
}

fn scatter(pts: &[Vector3<f64>]) -> Scatter {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = pts.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    }) / n;
    let (eig, dir) = sym3_eigen(&cov);
    Scatter { eig, dir }
}

/// Labels every point of one time-ordered ring.
pub fn classify_points(ring: &[TimedPoint], continuity: &[bool], params: &FeatureParams) -> Vec<PointLabel> {
    let n = ring.len();
    let pos: Vec<Vector3<f64>> = ring.iter().map(TimedPoint::pos).collect();
    let depth: Vec<f64> = pos.iter().map(|p| p.norm()).collect();
    let k = params.k_neigh;
    let mut labels = vec![PointLabel::None; n];
    let mut corner_angle = vec![0.0f64; n];
    let cos_corner = params.corner_angle_deg.to_radians().cos();

    let smooth = |a: usize, b: usize| (depth[a] - depth[b]).abs() < params.d_th;

    for i in 0..n {
        if !continuity[i] {
            continue;
        }
        let mut lo = i;
        while lo > 0 && i - lo < k && smooth(lo - 1, lo) {
            lo -= 1;
        }
        let mut hi = i;
        while hi + 1 < n && hi - i < k && smooth(hi, hi + 1) {
            hi += 1;
        }

        // surface end in front of a depth jump
        let near_end = |j: usize, beyond: Option<usize>| -> bool {
            !continuity[j] && beyond.is_some_and(|b| depth[b] - depth[j] >= params.d_th)
        };
        let left_break = i > 0 && near_end(i - 1, (i >= 2).then(|| i - 2));
        let right_break = i + 1 < n && near_end(i + 1, (i + 2 < n).then_some(i + 2));
        if left_break || right_break {
            labels[i] = PointLabel::Break;
            continue;
        }

        if hi - lo + 1 < 3 {
            continue;
        }

        if i - lo >= 2 && hi - i >= 2 {
            let l = scatter(&pos[lo..=i]);
            let r = scatter(&pos[i..=hi]);
            let line_like = |s: &Scatter| s.eig[0] > 0.0 && s.eig[1] / s.eig[0] < params.line_ratio;
            if line_like(&l) && line_like(&r) {
                let c = l.dir.dot(&r.dir).abs();
                if c < cos_corner {
                    corner_angle[i] = c.clamp(-1.0, 1.0).acos();
                    labels[i] = PointLabel::Corner;
                    continue;
                }
            }
        }

        let w = scatter(&pos[lo..=hi]);
        let residual = (w.eig[1].max(0.0) + w.eig[2].max(0.0)).sqrt();
        if w.eig[0] > 0.0 && w.eig[1] / w.eig[0] < params.plane_ratio && residual < params.plane_residual {
            labels[i] = PointLabel::Plane;
        }
    }

    // keep only the sharpest corner among nearby candidates
    let suppress = (k / 2).max(1);
    let snapshot = labels.clone();
    for i in 0..n {
        if snapshot[i] != PointLabel::Corner {
            continue;
        }
        let lo = i.saturating_sub(suppress);
        let hi = (i + suppress).min(n - 1);
        let dominated = (lo..=hi).any(|j| {
            j != i
                && snapshot[j] == PointLabel::Corner
                && (corner_angle[j] > corner_angle[i] || (corner_angle[j] == corner_angle[i] && j < i))
        });
        if dominated {
            labels[i] = PointLabel::None;
        }
    }
    labels
}

/// Edge sub-type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    /// where two surfaces meet
    Line,
    /// where a surface ends in front of a depth jump
    Break,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint {
    pub p: Vector3<f64>,
    pub t: f64,
    pub ring: u8,
    /// `None` for plane points.
    pub edge: Option<EdgeKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    pub frame: Frame,
    pub edges: Vec<FeaturePoint>,
    pub planes: Vec<FeaturePoint>,
}

impl FeatureCloud {
    pub fn empty(frame: Frame) -> Self {
        Self { frame, edges: Vec::new(), planes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.edges.len() + self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies `pose` to every point and retags the frame.
    pub fn transformed(&self, pose: &crate::Posed, frame: Frame) -> Self {
        let map = |v: &Vec<FeaturePoint>| {
            v.iter().map(|f| FeaturePoint { p: pose.apply(&f.p), ..*f }).collect::<Vec<_>>()
        };
        Self { frame, edges: map(&self.edges), planes: map(&self.planes) }
    }

    pub fn edge_positions(&self) -> Vec<Vector3<f64>> {
        self.edges.iter().map(|f| f.p).collect()
    }

    pub fn plane_positions(&self) -> Vec<Vector3<f64>> {
        self.planes.iter().map(|f| f.p).collect()
    }

    pub fn all_positions(&self) -> Vec<Vector3<f64>> {
        self.edges.iter().chain(&self.planes).map(|f| f.p).collect()
    }
}

/// Runs the full ring → continuity → classification chain on one scan in
/// its own sensor frame. Output is ordered by (ring, timestamp).
pub fn extract_features(scan: &Scan, kind: SensorKind, params: &FeatureParams) -> FeatureCloud {
    let rings = organize_scan(scan, kind, params);
    let per_ring: Vec<(Vec<FeaturePoint>, Vec<FeaturePoint>)> = rings
        .rings
        .par_iter()
        .map(|ring| {
            let cont = mark_continuity(&ring.points, params.d_th);
            let labels = classify_points(&ring.points, &cont, params);
            let mut edges = Vec::new();
            let mut planes = Vec::new();
            for (pt, label) in ring.points.iter().zip(labels) {
                let fp = |edge| FeaturePoint { p: pt.pos(), t: pt.t, ring: pt.ring, edge };
                match label {
                    PointLabel::Plane => planes.push(fp(None)),
                    PointLabel::Corner => edges.push(fp(Some(EdgeKind::Line))),
                    PointLabel::Break => edges.push(fp(Some(EdgeKind::Break))),
                    PointLabel::None => {}
                }
            }
            (edges, planes)
        })
        .collect();
    let mut out = FeatureCloud::empty(Frame::of(kind));
    for (e, p) in per_ring {
        out.edges.extend(e);
        out.planes.extend(p);
    }
    out
}

/// Solid-state bad-frame test: drop points nearer than `near_range` and
/// flag the frame when fewer than `edge_threshold` edges remain.
pub fn detect_bad_frame(f_h: &FeatureCloud, params: &FeatureParams) -> bool {
    debug_assert_eq!(f_h.frame, Frame::H);
    usable_edge_count(f_h, params) < params.edge_threshold
}

pub fn usable_edge_count(f_h: &FeatureCloud, params: &FeatureParams) -> usize {
    f_h.edges.iter().filter(|e| e.p.norm() >= params.near_range).count()
}

/// Fuses per-sensor feature clouds into the IMU frame. A bad solid-state
/// frame contributes nothing.
pub fn merge_features(
    f_v: Option<&FeatureCloud>,
    f_h: Option<&FeatureCloud>,
    extr: &ExtrinsicSet,
    bad_h: bool,
) -> Result<FeatureCloud, FeatureError> {
    let mut out = FeatureCloud::empty(Frame::I);
    if let Some(v) = f_v {
        if v.frame != Frame::V {
            return Err(FeatureError::FrameMismatch { expected: Frame::V, got: v.frame });
        }
        let t = v.transformed(&extr.v_to_i(), Frame::I);
        out.edges.extend(t.edges);
        out.planes.extend(t.planes);
    }
    if let Some(h) = f_h {
        if h.frame != Frame::H {
            return Err(FeatureError::FrameMismatch { expected: Frame::H, got: h.frame });
        }
        if !bad_h {
            let t = h.transformed(&extr.h_to_i(), Frame::I);
            out.edges.extend(t.edges);
            out.planes.extend(t.planes);
        }
    }
    Ok(out)
}

fn voxel_key(p: &Vector3<f64>, leaf: f64) -> (i64, i64, i64) {
    ((p.x / leaf).floor() as i64, (p.y / leaf).floor() as i64, (p.z / leaf).floor() as i64)
}

/// One centroid per occupied voxel, in order of first occupancy. Timestamp,
/// ring and edge kind come from the first point in each voxel.
pub fn downsample_points(points: &[FeaturePoint], leaf: f64) -> Vec<FeaturePoint> {
    let mut index: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(points.len());
    let mut acc: Vec<(FeaturePoint, Vector3<f64>, usize)> = Vec::new();
    for fp in points {
        let key = voxel_key(&fp.p, leaf);
        match index.get(&key) {
            Some(&slot) => {
                acc[slot].1 += fp.p;
                acc[slot].2 += 1;
            }
            None => {
                index.insert(key, acc.len());
                acc.push((*fp, fp.p, 1));
            }
        }
    }
    acc.into_iter().map(|(first, sum, n)| FeaturePoint { p: sum / n as f64, ..first }).collect()
}

/// Voxel-grid centroids of a raw cloud, in order of first occupancy.
pub fn voxel_grid(points: &[Vector3<f64>], leaf: f64) -> Vec<Vector3<f64>> {
    let mut index: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(points.len());
    let mut acc: Vec<(Vector3<f64>, usize)> = Vec::new();
    for p in points {
        let slot = *index.entry(voxel_key(p, leaf)).or_insert_with(|| {
            acc.push((Vector3::zeros(), 0));
            acc.len() - 1
        });
        acc[slot].0 += p;
        acc[slot].1 += 1;
    }
    acc.into_iter().map(|(s, n)| s / n as f64).collect()
}

pub fn voxel_downsample(cloud: &FeatureCloud, leaf: f64) -> Result<FeatureCloud, FeatureError> {
    voxel_downsample2(cloud, leaf, leaf)
}

/// Separate leaves for edges and planes.
pub fn voxel_downsample2(cloud: &FeatureCloud, edge_leaf: f64, plane_leaf: f64) -> Result<FeatureCloud, FeatureError> {
    for leaf in [edge_leaf, plane_leaf] {
        if !(leaf > 0.0) {
            return Err(FeatureError::InvalidLeaf(leaf));
        }
    }
    Ok(FeatureCloud {
        frame: cloud.frame,
        edges: downsample_points(&cloud.edges, edge_leaf),
        planes: downsample_points(&cloud.planes, plane_leaf),
    })
}
