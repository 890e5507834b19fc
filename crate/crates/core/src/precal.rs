//! Spatial-temporal calibration between the two LiDARs.
//!
//! The spinning→solid-state extrinsic is estimated with GICP on clouds
//! accumulated while the platform is stationary, then chained with the
//! factory solid-state→IMU extrinsic. The solid-state point stream is
//! re-cut so that every emitted frame covers exactly the time interval of a
//! spinning sweep.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kdtree::KdTree;
use crate::types::{PointCloud, Scan, TimedPoint};
use crate::{Posed, Quatd};

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("need {need} frames, only {have} available")]
    TooFewFrames { need: usize, have: usize },
    #[error("frame count must be at least 1")]
    ZeroFrames,
    #[error("insufficient points: source {source_len}, target {target_len}, need {min}")]
    InsufficientPoints { source_len: usize, target_len: usize, min: usize },
    #[error("no correspondences within {max_corr_dist} m after {iterations} iterations")]
    NoCorrespondences { max_corr_dist: f64, iterations: usize, last: Box<Posed> },
    #[error("queue point at {t} precedes queue back {back}")]
    OutOfOrder { t: f64, back: f64 },
}

/// Extrinsics relating the two LiDARs and the IMU. The spinning→IMU
/// transform is always derived from the other two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicSet {
    h_to_i: Posed,
    v_to_h: Posed,
    v_to_i: Posed,
}

impl ExtrinsicSet {
    pub fn new(h_to_i: Posed, v_to_h: Posed) -> Self {
        Self { h_to_i, v_to_h, v_to_i: chain_extrinsics(&v_to_h, &h_to_i) }
    }

    pub fn h_to_i(&self) -> Posed {
        self.h_to_i
    }

    pub fn v_to_h(&self) -> Posed {
        self.v_to_h
    }

    pub fn v_to_i(&self) -> Posed {
        self.v_to_i
    }

    pub fn with_v_to_h(&self, v_to_h: Posed) -> Self {
        Self::new(self.h_to_i, v_to_h)
    }
}

/// Spinning→IMU extrinsic: a point goes spinning→solid-state→IMU.
pub fn chain_extrinsics(v_to_h: &Posed, h_to_i: &Posed) -> Posed {
    h_to_i.compose(v_to_h)
}

/// Concatenates the points of the first `n` scans.
pub fn accumulate_frames(scans: &[Scan], n: usize) -> Result<PointCloud, CalibError> {
    if n == 0 {
        return Err(CalibError::ZeroFrames);
    }
    if scans.len() < n {
        return Err(CalibError::TooFewFrames { need: n, have: scans.len() });
    }
    Ok(scans[..n].iter().flat_map(|s| s.points.iter().map(TimedPoint::pos)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GicpParams {
    /// Neighbours used for each point covariance.
    pub k: usize,
    /// Smallest regularized covariance eigenvalue.
    pub epsilon: f64,
    pub max_corr_dist: f64,
    pub max_iter: usize,
    /// Convergence threshold on the update norm.
    pub tol: f64,
    pub min_points: usize,
}

impl Default for GicpParams {
    fn default() -> Self {
        Self { k: 20, epsilon: 1e-3, max_corr_dist: 1.0, max_iter: 50, tol: 1e-6, min_points: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GicpResult {
    /// Maps source points into the target frame.
    pub pose: Posed,
    /// Mean squared correspondence distance (m²).
    pub fitness: f64,
    pub iterations: usize,
    pub converged: bool,
    pub correspondences: usize,
}

fn neighbourhood_covariance(tree: &KdTree, p: &Vector3<f64>, k: usize) -> Matrix3<f64> {
    let nn = tree.knn(p, k.max(3));
    let n = nn.len() as f64;
    let mean = nn.iter().fold(Vector3::zeros(), |a, &(j, _)| a + tree.point(j)) / n;
    nn.iter().fold(Matrix3::zeros(), |a: Matrix3<f64>, &(j, _)| {
        let d = tree.point(j) - mean;
        a + d * d.transpose()
    }) / n
}

/// Per-point covariances with eigenvalues replaced by (1, 1, ε).
fn plane_covariances(tree: &KdTree, params: &GicpParams) -> Vec<Matrix3<f64>> {
    tree.points()
        .par_iter()
        .map(|p| {
            let eig = SymmetricEigen::new(neighbourhood_covariance(tree, p, params.k));
            let smallest = eig.eigenvalues.imin();
            let mut diag = Vector3::repeat(1.0);
            diag[smallest] = params.epsilon;
            eig.eigenvectors * Matrix3::from_diagonal(&diag) * eig.eigenvectors.transpose()
        })
        .collect()
}

/// Median RMS thickness of `k`-point neighbourhoods about every `stride`-th
/// point: the out-of-plane spread of the surfaces, i.e. their range noise.
pub fn surface_thickness(cloud: &[Vector3<f64>], k: usize, stride: usize) -> f64 {
    if cloud.len() < k.max(3) {
        return 0.0;
    }
    let tree = KdTree::build(cloud.to_vec());
    let mut t: Vec<f64> = cloud
        .par_iter()
        .step_by(stride.max(1))
        .map(|p| {
            let cov = neighbourhood_covariance(&tree, p, k);
            SymmetricEigen::new(cov).eigenvalues.min().max(0.0).sqrt()
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[t.len() / 2]
}

fn correspondence_stats(source: &[Vector3<f64>], target: &KdTree, pose: &Posed, max_dist: f64) -> (usize, f64) {
    let d2: Vec<f64> = source
        .par_iter()
        .filter_map(|a| target.knn_within(&pose.apply(a), 1, max_dist).first().map(|x| x.1))
        .collect();
    let n = d2.len();
    (n, if n == 0 { f64::INFINITY } else { d2.iter().sum::<f64>() / n as f64 })
}

/// Plane-to-plane GICP. Gauss-Newton with a left perturbation
/// `T ← (Exp(ω), υ)·T`.
pub fn gicp_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    init: &Posed,
    params: &GicpParams,
) -> Result<GicpResult, CalibError> {
    if source.len() < params.min_points || target.len() < params.min_points {
        return Err(CalibError::InsufficientPoints {
            source_len: source.len(),
            target_len: target.len(),
            min: params.min_points,
        });
    }
    let src_tree = KdTree::build(source.to_vec());
    let tgt_tree = KdTree::build(target.to_vec());
    let src_cov = plane_covariances(&src_tree, params);
    let tgt_cov = plane_covariances(&tgt_tree, params);

    let mut pose = *init;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        iterations += 1;
        let rot = pose.rotation.to_matrix();
        let terms: Vec<(Matrix6<f64>, Vector6<f64>)> = source
            .par_iter()
            .enumerate()
            .filter_map(|(i, a)| {
                let ta = pose.apply(a);
                let &(j, _) = tgt_tree.knn_within(&ta, 1, params.max_corr_dist).first()?;
                let d = tgt_tree.point(j) - ta;
                let c = tgt_cov[j] + rot * src_cov[i] * rot.transpose();
                let m = c.try_inverse()?;
                let mut jac = nalgebra::Matrix3x6::zeros();
                jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&crate::geom::skew(&ta));
                jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
                let jtm = jac.transpose() * m;
                Some((jtm * jac, jtm * d))
            })
            .collect();
        if terms.is_empty() {
            return Err(CalibError::NoCorrespondences {
                max_corr_dist: params.max_corr_dist,
                iterations,
                last: Box::new(pose),
            });
        }
        let (h, g) = terms.iter().fold((Matrix6::zeros(), Vector6::zeros()), |(h, g), (hi, gi)| (h + hi, g + gi));
        let damped = h + Matrix6::identity() * (1e-12 * h.trace().max(1e-12));
        let Some(xi) = damped.cholesky().map(|c| c.solve(&(-g))) else {
            break;
        };
        let step = Posed::new(Quatd::exp(&xi.fixed_rows::<3>(0).into_owned()), xi.fixed_rows::<3>(3).into_owned());
        pose = step.compose(&pose);
        if xi.norm() < params.tol {
            converged = true;
            break;
        }
    }
    let (correspondences, fitness) = correspondence_stats(source, &tgt_tree, &pose, params.max_corr_dist);
    if correspondences == 0 {
        return Err(CalibError::NoCorrespondences {
            max_corr_dist: params.max_corr_dist,
            iterations,
            last: Box::new(pose),
        });
    }
    Ok(GicpResult { pose, fitness, iterations, converged, correspondences })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibParams {
    /// Stationary frames accumulated per sensor.
    pub frames: usize,
    /// Voxel leaf for the screening stages.
    pub voxel: f64,
    /// Voxel leaf for the refinement stages.
    pub fine_voxel: f64,
    /// Radius at which screening hands over to refinement (m).
    pub refine_corr_dist: f64,
    /// Smallest correspondence radius of the schedule (m).
    pub min_corr_dist: f64,
    /// Neighbourhood size for the source surface thickness estimate.
    pub thickness_k: usize,
    /// The refinement grid is at least this multiple of the source surface
    /// thickness, so noisy surfaces are not fitted below their noise.
    pub thickness_voxel_scale: f64,
    /// Rotation offset of the extra starting guesses about each axis (rad).
    pub start_rotation: f64,
    /// Translation offset of the extra starting guesses along each axis (m).
    pub start_translation: f64,
    pub gicp: GicpParams,
}

impl Default for CalibParams {
    fn default() -> Self {
        Self {
            frames: 10,
            voxel: 0.1,
            fine_voxel: 0.02,
            refine_corr_dist: 0.25,
            min_corr_dist: 0.1,
            thickness_k: 200,
            thickness_voxel_scale: 3.0,
            start_rotation: 6f64.to_radians(),
            start_translation: 0.3,
            gicp: GicpParams::default(),
        }
    }
}

impl CalibParams {
    /// Correspondence radii halving from `max_corr_dist` down to `min_corr_dist`.
    pub fn schedule(&self) -> Vec<f64> {
        let mut radii = vec![self.gicp.max_corr_dist];
        let mut r = self.gicp.max_corr_dist / 2.0;
        while r > self.min_corr_dist {
            radii.push(r);
            r /= 2.0;
        }
        if self.min_corr_dist < self.gicp.max_corr_dist {
            radii.push(self.min_corr_dist);
        }
        radii
    }

    /// The initial guess followed by ± offsets about and along each axis.
    pub fn starts(&self, init: &Posed) -> Vec<Posed> {
        let mut starts = vec![*init];
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut e = Vector3::zeros();
                e[axis] = sign;
                starts.push(Posed::new(Quatd::exp(&(e * self.start_rotation)), Vector3::zeros()).compose(init));
                starts.push(Posed::new(Quatd::identity(), e * self.start_translation).compose(init));
            }
        }
        starts
    }
}

fn gicp_stages(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    init: &Posed,
    radii: &[f64],
    params: &GicpParams,
) -> Result<GicpResult, CalibError> {
    let mut pose = *init;
    let mut last = None;
    for &r in radii {
        let res = gicp_align(source, target, &pose, &GicpParams { max_corr_dist: r, ..*params })?;
        pose = res.pose;
        last = Some(res);
    }
    Ok(last.expect("non-empty radius schedule"))
}

/// Estimates the spinning→solid-state extrinsic from stationary frames of
/// both sensors and returns the completed extrinsic set.
///
/// The narrow-FoV solid-state cloud is registered onto the panoramic
/// spinning cloud and the returned pose is the inverse of that alignment.
/// Every starting guess runs the screening radii on the coarse grid; the one
/// with the most correspondences at the hand-over radius is refined on a
/// fine grid no smaller than the solid-state surface thickness allows.
/// Shrinking the radius drops solid-state points outside the
/// spinning field of view.
pub fn calibrate_extrinsics(
    v_scans: &[Scan],
    h_scans: &[Scan],
    h_to_i: &Posed,
    init_v_to_h: &Posed,
    params: &CalibParams,
) -> Result<(ExtrinsicSet, GicpResult), CalibError> {
    let target = accumulate_frames(v_scans, params.frames)?;
    let source = accumulate_frames(h_scans, params.frames)?;
    let voxel = crate::features::voxel_grid;
    let radii = params.schedule();
    let screen: Vec<f64> = radii.iter().copied().filter(|&r| r >= params.refine_corr_dist).collect();
    let refine: Vec<f64> = radii.iter().copied().filter(|&r| r <= params.refine_corr_dist).collect();
    let (coarse_src, coarse_tgt) = (voxel(&source, params.voxel), voxel(&target, params.voxel));
    let mut best: Option<GicpResult> = None;
    let mut first_err = None;
    for start in params.starts(&init_v_to_h.inverse()) {
        match gicp_stages(&coarse_src, &coarse_tgt, &start, &screen, &params.gicp) {
            Ok(res) if best.map_or(true, |b| res.correspondences > b.correspondences) => best = Some(res),
            Ok(_) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some(best) = best else {
        return Err(first_err.expect("at least one start"));
    };
    let mut res = if refine.is_empty() {
        best
    } else {
        let thickness = surface_thickness(&source, params.thickness_k, 50);
        let leaf = params.fine_voxel.max(params.thickness_voxel_scale * thickness);
        let (fine_src, fine_tgt) = (voxel(&source, leaf), voxel(&target, leaf));
        gicp_stages(&fine_src, &fine_tgt, &best.pose, &refine, &params.gicp)?
    };
    res.pose = res.pose.inverse();
    Ok((ExtrinsicSet::new(*h_to_i, res.pose), res))
}

/// Timestamps from azimuth for spinning scans lacking them: the fraction of
/// a turn swept since the first point, scaled to the sweep duration.
pub fn synthesize_timestamps(scan: &Scan) -> Scan {
    let Some(first) = scan.points.first() else {
        return scan.clone();
    };
    let az0 = (first.xyz[1] as f64).atan2(first.xyz[0] as f64);
    let dur = scan.t_end - scan.t_start;
    let tau = std::f64::consts::TAU;
    let points = scan
        .points
        .iter()
        .map(|p| {
            let az = (p.xyz[1] as f64).atan2(p.xyz[0] as f64);
            let frac = (az - az0).rem_euclid(tau) / tau;
            TimedPoint { t: scan.t_start + dur * frac, ..*p }
        })
        .collect();
    Scan { points, ..*scan }
}

/// Timestamp-ordered buffer of solid-state points awaiting a spinning sweep.
#[derive(Debug, Clone, Default)]
pub struct AlignmentQueue {
    points: VecDeque<TimedPoint>,
    pushed: usize,
    dropped: usize,
    emitted: usize,
}

impl AlignmentQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: TimedPoint) -> Result<(), CalibError> {
        if let Some(back) = self.points.back() {
            if p.t < back.t {
                return Err(CalibError::OutOfOrder { t: p.t, back: back.t });
            }
        }
        self.points.push_back(p);
        self.pushed += 1;
        Ok(())
    }

    /// Pushes a scan's points, sorting them by timestamp first.
    pub fn push_scan(&mut self, scan: &Scan) -> Result<(), CalibError> {
        let mut pts = scan.points.clone();
        pts.sort_by(|a, b| a.t.total_cmp(&b.t));
        pts.into_iter().try_for_each(|p| self.push(p))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn front_time(&self) -> Option<f64> {
        self.points.front().map(|p| p.t)
    }

    pub fn back_time(&self) -> Option<f64> {
        self.points.back().map(|p| p.t)
    }

    pub fn pushed(&self) -> usize {
        self.pushed
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn iter(&self) -> impl Iterator<Item = &TimedPoint> {
        self.points.iter()
    }

    /// Drops points older than `t` without emitting them.
    pub fn discard_before(&mut self, t: f64) {
        while self.points.front().is_some_and(|p| p.t < t) {
            self.points.pop_front();
            self.dropped += 1;
        }
    }
}

/// Cuts the solid-state frame sharing the spinning sweep's time interval:
/// queued points before the sweep are dropped, points inside are emitted
/// and later points stay queued.
pub fn align_time_domain(queue: &mut AlignmentQueue, v_scan: &Scan) -> Scan {
    let (t_ms, t_me) = (v_scan.t_start, v_scan.t_end);
    queue.discard_before(t_ms);
    let mut out = Vec::new();
    while queue.points.front().is_some_and(|p| p.t <= t_me) {
        out.push(queue.points.pop_front().unwrap());
    }
    queue.emitted += out.len();
    Scan::new(t_ms, t_me, out)
}
