//! Keyframe selection and the tightly coupled sliding-window optimizer.
//!
//! The window holds the last τ keyframe states. Each state is constrained by
//! point-to-edge and point-to-plane terms against a world-frame local map,
//! by preintegrated IMU terms to its neighbours and by the prior left behind
//! when older states were marginalized out.

use std::borrow::Cow;
use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, RowVector6, SMatrix, SVector, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureCloud;
use crate::geom::{right_jacobian, right_jacobian_inv, skew, NAV_DIM};
use crate::imu::{Bias, PreintegratedImu};
use crate::kdtree::KdTree;
use crate::{NavStated, Posed, Quatd};

pub type Vector15 = SVector<f64, NAV_DIM>;
pub type Matrix15 = SMatrix<f64, NAV_DIM, NAV_DIM>;

#[derive(Debug, Error, PartialEq)]
pub enum SwoError {
    #[error("window holds {len} keyframes, limit is {tau}")]
    WindowTooLarge { len: usize, tau: usize },
    #[error("prior refers to keyframe {0} which is not in the window")]
    PriorOutsideWindow(usize),
    #[error("cost diverged at outer {outer}, inner {inner}; accepted costs {costs:?}")]
    Diverged { outer: usize, inner: usize, costs: Vec<f64> },
    #[error("cannot marginalize a window of {0} keyframes")]
    WindowTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwoConfig {
    /// Window size in keyframes.
    pub tau: usize,
    pub key_angle_deg: f64,
    pub key_dt: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub param_tol: f64,
    /// Huber threshold on LiDAR residuals (m); `None` disables the robust loss.
    pub huber: Option<f64>,
    pub corr_radius: f64,
    pub edge_nn: usize,
    pub plane_nn: usize,
    /// Plane fits with any neighbour farther than this are rejected (m).
    pub plane_max_dev: f64,
    /// Standard deviation assigned to LiDAR residuals (m).
    pub lidar_sigma: f64,
    /// Keyframes kept in the local map.
    pub map_window: usize,
}

impl Default for SwoConfig {
    fn default() -> Self {
        Self {
            tau: 4,
            key_angle_deg: 30.0,
            key_dt: 2.0,
            max_outer: 4,
            max_inner: 10,
            param_tol: 1e-6,
            huber: Some(0.1),
            corr_radius: 1.0,
            edge_nn: 2,
            plane_nn: 5,
            plane_max_dev: 0.05,
            lidar_sigma: 0.05,
            map_window: 20,
        }
    }
}

/// A new keyframe is due once the IMU-propagated rotation or the elapsed
/// time exceeds its threshold.
pub fn select_keyframe(imu_drift_angle: f64, dt_since_last: f64, cfg: &SwoConfig) -> bool {
    imu_drift_angle > cfg.key_angle_deg.to_radians() || dt_since_last > cfg.key_dt
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub t: f64,
    /// Deskewed features in the IMU frame.
    pub features: FeatureCloud,
    /// Preintegration from the previous keyframe.
    pub delta: Option<PreintegratedImu>,
    pub state: NavStated,
}

/// Correspondence line through two map edge points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeMatch {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

impl EdgeMatch {
    /// Distance from `pw` to the line.
    pub fn residual(&self, pw: &Vector3<f64>) -> f64 {
        self.residual_vec(pw).norm()
    }

    /// Perpendicular offset scaled cross product; its norm is the distance.
    pub fn residual_vec(&self, pw: &Vector3<f64>) -> Vector3<f64> {
        (pw - self.b).cross(&(pw - self.a)) / (self.b - self.a).norm()
    }

    /// ∂residual_vec/∂pw (constant).
    pub fn jacobian_vec(&self) -> Matrix3<f64> {
        skew(&(self.a - self.b)) / (self.b - self.a).norm()
    }
}

/// Minimum ratio of the two in-plane covariance eigenvalues of a plane fit.
pub const PLANE_MIN_SPREAD: f64 = 0.01;

/// Plane in Hesse normal form `nᵀx + d = 0`, `‖n‖ = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub d: f64,
}

impl PlaneFit {
    /// From coefficients of `nᵀx + 1 = 0`.
    pub fn from_coefficients(n: &Vector3<f64>) -> Self {
        let len = n.norm();
        Self { normal: n / len, d: 1.0 / len }
    }

    /// Least-squares fit; `None` when the points are close to collinear
    /// (second covariance eigenvalue below [`PLANE_MIN_SPREAD`] of the first)
    /// or when any point lies farther than `max_dev` from the plane.
    pub fn fit(points: &[Vector3<f64>], max_dev: f64) -> Option<Self> {
        if points.len() < 3 {
            return None;
        }
        let n = points.len() as f64;
        let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
        let cov = points.iter().fold(Matrix3::zeros(), |a: Matrix3<f64>, p| {
            let d = p - mean;
            a + d * d.transpose()
        }) / n;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        if !(eig.eigenvalues[order[1]] > PLANE_MIN_SPREAD * eig.eigenvalues[order[0]]) {
            return None;
        }
        let normal = eig.eigenvectors.column(order[2]).into_owned();
        let plane = Self { normal, d: -normal.dot(&mean) };
        points.iter().all(|p| plane.signed_distance(p).abs() <= max_dev).then_some(plane)
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.d
    }
}

/// ∂pw/∂[δθ, δt] for `pw = R p + t` under right rotation perturbation.
fn point_jacobian(q: &Quatd, p_body: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut j = nalgebra::Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-q.to_matrix() * skew(p_body)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

#[derive(Debug, Clone)]
struct MapEntry {
    kf_id: usize,
    edges: Vec<Vector3<f64>>,
    planes: Vec<Vector3<f64>>,
}

/// World-frame feature points of the most recent keyframes, indexed by
/// kd-trees rebuilt on every insertion.
#[derive(Debug, Clone)]
pub struct LocalFeatureMap {
    window: usize,
    entries: VecDeque<MapEntry>,
    edge_owner: Vec<usize>,
    plane_owner: Vec<usize>,
    edge_tree: KdTree,
    plane_tree: KdTree,
}

impl LocalFeatureMap {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            entries: VecDeque::new(),
            edge_owner: Vec::new(),
            plane_owner: Vec::new(),
            edge_tree: KdTree::default(),
            plane_tree: KdTree::default(),
        }
    }

    /// Map built directly from world-frame points (one pseudo keyframe).
    pub fn from_points(edges: Vec<Vector3<f64>>, planes: Vec<Vector3<f64>>) -> Self {
        let mut m = Self::new(1);
        m.entries.push_back(MapEntry { kf_id: 0, edges, planes });
        m.rebuild();
        m
    }

    fn rebuild(&mut self) {
        let mut edges = Vec::new();
        let mut planes = Vec::new();
        self.edge_owner.clear();
        self.plane_owner.clear();
        for e in &self.entries {
            edges.extend_from_slice(&e.edges);
            planes.extend_from_slice(&e.planes);
            self.edge_owner.extend(std::iter::repeat(e.kf_id).take(e.edges.len()));
            self.plane_owner.extend(std::iter::repeat(e.kf_id).take(e.planes.len()));
        }
        self.edge_tree = KdTree::build(edges);
        self.plane_tree = KdTree::build(planes);
    }

    /// Inserts body-frame features placed at `pose`, then evicts keyframes
    /// beyond the window.
    pub fn insert(&mut self, kf_id: usize, features: &FeatureCloud, pose: &Posed) {
        let t = |v: &[crate::features::FeaturePoint]| v.iter().map(|f| pose.apply(&f.p)).collect::<Vec<_>>();
        self.entries.push_back(MapEntry { kf_id, edges: t(&features.edges), planes: t(&features.planes) });
        while self.entries.len() > self.window {
            self.entries.pop_front();
        }
        self.rebuild();
    }

    /// Copy of the map without the points of keyframe `kf_id`.
    pub fn without(&self, kf_id: usize) -> Self {
        let mut m = Self::new(self.window);
        m.entries = self.entries.iter().filter(|e| e.kf_id != kf_id).cloned().collect();
        m.rebuild();
        m
    }

    pub fn contains(&self, kf_id: usize) -> bool {
        self.entries.iter().any(|e| e.kf_id == kf_id)
    }

    pub fn keyframe_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.kf_id).collect()
    }

    pub fn edges(&self) -> &[Vector3<f64>] {
        self.edge_tree.points()
    }

    pub fn planes(&self) -> &[Vector3<f64>] {
        self.plane_tree.points()
    }

    pub fn edge_owners(&self) -> &[usize] {
        &self.edge_owner
    }

    pub fn plane_owners(&self) -> &[usize] {
        &self.plane_owner
    }

    pub fn edge_tree(&self) -> &KdTree {
        &self.edge_tree
    }

    pub fn plane_tree(&self) -> &KdTree {
        &self.plane_tree
    }

    pub fn len(&self) -> usize {
        self.edge_owner.len() + self.plane_owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn match_edge(&self, pw: &Vector3<f64>, cfg: &SwoConfig) -> Option<EdgeMatch> {
        let nn = self.edge_tree.knn_within(pw, cfg.edge_nn.max(2), cfg.corr_radius);
        if nn.len() < 2 {
            return None;
        }
        let (a, b) = (*self.edge_tree.point(nn[0].0), *self.edge_tree.point(nn[1].0));
        ((b - a).norm() >= 1e-6).then_some(EdgeMatch { a, b })
    }

    pub fn match_plane(&self, pw: &Vector3<f64>, cfg: &SwoConfig) -> Option<PlaneFit> {
        let nn = self.plane_tree.knn_within(pw, cfg.plane_nn, cfg.corr_radius);
        if nn.len() < cfg.plane_nn.max(3) {
            return None;
        }
        let pts: Vec<_> = nn.iter().map(|&(i, _)| *self.plane_tree.point(i)).collect();
        PlaneFit::fit(&pts, cfg.plane_max_dev)
    }
}

pub fn update_local_map(map: &mut LocalFeatureMap, kf: &Keyframe, state: &NavStated) {
    map.insert(kf.id, &kf.features, &state.pose());
}

/// Point-to-edge distance of body point `p_i` and its gradient with
/// respect to `[δθ, δt]`.
pub fn edge_residual(
    state: &NavStated,
    p_i: &Vector3<f64>,
    map: &LocalFeatureMap,
    cfg: &SwoConfig,
) -> Option<(f64, RowVector6<f64>)> {
    let pw = state.pose().apply(p_i);
    let m = map.match_edge(&pw, cfg)?;
    let rv = m.residual_vec(&pw);
    let r = rv.norm();
    let jv = m.jacobian_vec() * point_jacobian(&state.q, p_i);
    let grad = if r > 0.0 { (rv.transpose() * jv) / r } else { RowVector6::zeros() };
    Some((r, grad))
}

/// Point-to-plane distance of body point `p_i` and its gradient with
/// respect to `[δθ, δt]`.
pub fn plane_residual(
    state: &NavStated,
    p_i: &Vector3<f64>,
    map: &LocalFeatureMap,
    cfg: &SwoConfig,
) -> Option<(f64, RowVector6<f64>)> {
    let pw = state.pose().apply(p_i);
    let plane = map.match_plane(&pw, cfg)?;
    let s = plane.signed_distance(&pw);
    let grad = plane.normal.transpose() * point_jacobian(&state.q, p_i) * s.signum();
    Some((s.abs(), grad))
}

/// Inertial residual `[δθ, δv, δp, δb_a, δb_g]` and its Jacobians with
/// respect to both states' tangents (unweighted).
#[derive(Debug, Clone, PartialEq)]
pub struct ImuResidual {
    pub r: Vector15,
    pub j_i: Matrix15,
    pub j_j: Matrix15,
}

// residual row blocks
const R_TH: usize = 0;
const R_V: usize = 3;
const R_P: usize = 6;
const R_BA: usize = 9;
const R_BG: usize = 12;
// state tangent blocks
const S_TH: usize = 0;
const S_P: usize = 3;
const S_V: usize = 6;
const S_BA: usize = 9;
const S_BG: usize = 12;

pub fn imu_residual(xi: &NavStated, xj: &NavStated, delta: &PreintegratedImu, g: &Vector3<f64>) -> ImuResidual {
    let dt = delta.dt_total;
    let dbg = xi.bg - delta.bias_lin.gyro;
    let (dq, dv, dp) = delta.corrected(&Bias::of(xi));
    let ri = xi.q.to_matrix();
    let rit = ri.transpose();
    let err_q = dq.inverse() * xi.q.inverse() * xj.q;
    let r_th = err_q.log();
    let vel = xj.v - xi.v - g * dt;
    let pos = xj.p - xi.p - xi.v * dt - g * (0.5 * dt * dt);

    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(R_TH).copy_from(&r_th);
    r.fixed_rows_mut::<3>(R_V).copy_from(&(rit * vel - dv));
    r.fixed_rows_mut::<3>(R_P).copy_from(&(rit * pos - dp));
    r.fixed_rows_mut::<3>(R_BA).copy_from(&(xj.ba - xi.ba));
    r.fixed_rows_mut::<3>(R_BG).copy_from(&(xj.bg - xi.bg));

    let jr_inv = right_jacobian_inv(&r_th);
    let mut j_i = Matrix15::zeros();
    let mut j_j = Matrix15::zeros();
    let set = |m: &mut Matrix15, row: usize, col: usize, b: Matrix3<f64>| {
        m.fixed_view_mut::<3, 3>(row, col).copy_from(&b);
    };
    let rj = xj.q.to_matrix();
    set(&mut j_i, R_TH, S_TH, -jr_inv * rj.transpose() * ri);
    let corr = delta.jq_bg * dbg;
    set(
        &mut j_i,
        R_TH,
        S_BG,
        -jr_inv * err_q.inverse().to_matrix() * right_jacobian(&corr) * delta.jq_bg,
    );
    set(&mut j_j, R_TH, S_TH, jr_inv);

    set(&mut j_i, R_V, S_TH, skew(&(rit * vel)));
    set(&mut j_i, R_V, S_V, -rit);
    set(&mut j_i, R_V, S_BA, -delta.jv_ba);
    set(&mut j_i, R_V, S_BG, -delta.jv_bg);
    set(&mut j_j, R_V, S_V, rit);

    set(&mut j_i, R_P, S_TH, skew(&(rit * pos)));
    set(&mut j_i, R_P, S_P, -rit);
    set(&mut j_i, R_P, S_V, -rit * dt);
    set(&mut j_i, R_P, S_BA, -delta.jp_ba);
    set(&mut j_i, R_P, S_BG, -delta.jp_bg);
    set(&mut j_j, R_P, S_P, rit);

    set(&mut j_i, R_BA, S_BA, -Matrix3::identity());
    set(&mut j_j, R_BA, S_BA, Matrix3::identity());
    set(&mut j_i, R_BG, S_BG, -Matrix3::identity());
    set(&mut j_j, R_BG, S_BG, Matrix3::identity());

    ImuResidual { r, j_i, j_j }
}

/// Square-root information `L` (`Lᵀ L = Σ⁻¹`) of the inertial residual:
/// preintegration covariance plus bias random walk over the interval.
pub fn imu_sqrt_information(delta: &PreintegratedImu) -> Matrix15 {
    let dt = delta.dt_total.max(1e-9);
    let mut cov = Matrix15::zeros();
    cov.fixed_view_mut::<9, 9>(0, 0).copy_from(&delta.covariance);
    let ba = delta.noise.accel_bias_walk.powi(2) * dt;
    let bg = delta.noise.gyro_bias_walk.powi(2) * dt;
    for i in 0..3 {
        cov[(R_BA + i, R_BA + i)] += ba;
        cov[(R_BG + i, R_BG + i)] += bg;
    }
    let cov = (cov + cov.transpose()) * 0.5 + Matrix15::identity() * 1e-15;
    let info = cov.try_inverse().unwrap_or_else(Matrix15::identity);
    let info = (info + info.transpose()) * 0.5;
    match info.cholesky() {
        Some(c) => c.l().transpose(),
        None => Matrix15::identity(),
    }
}

/// Linearized prior `½ δᵀHδ + bᵀδ` over keyframes `ids`, with
/// `δ = x ⊟ x₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior {
    pub ids: Vec<usize>,
    pub x0: Vec<NavStated>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Set when the eliminated block needed damping to invert.
    pub damped: bool,
}

impl MarginalPrior {
    pub fn empty() -> Self {
        Self { ids: Vec::new(), x0: Vec::new(), h: DMatrix::zeros(0, 0), b: DVector::zeros(0), damped: false }
    }

    /// Diagonal prior anchoring a single keyframe at `x0`.
    pub fn anchor(id: usize, x0: &NavStated, info_diag: &Vector15) -> Self {
        Self {
            ids: vec![id],
            x0: vec![*x0],
            h: DMatrix::from_diagonal(&DVector::from_column_slice(info_diag.as_slice())),
            b: DVector::zeros(NAV_DIM),
            damped: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn delta(&self, states: &[&NavStated]) -> DVector<f64> {
        let mut d = DVector::zeros(self.ids.len() * NAV_DIM);
        for (k, (x, x0)) in states.iter().zip(&self.x0).enumerate() {
            d.rows_mut(k * NAV_DIM, NAV_DIM).copy_from(&x.boxminus(x0));
        }
        d
    }

    /// Prior cost for the given states (ordered as `ids`).
    pub fn cost(&self, states: &[&NavStated]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let d = self.delta(states);
        0.5 * d.dot(&(&self.h * &d)) + self.b.dot(&d)
    }

    /// Gradient `Hδ + b` at the given states.
    pub fn gradient(&self, states: &[&NavStated]) -> DVector<f64> {
        if self.is_empty() {
            return DVector::zeros(0);
        }
        let d = self.delta(states);
        &self.h * d + &self.b
    }

    /// Smallest eigenvalue of the symmetrized information matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let h = (&self.h + self.h.transpose()) * 0.5;
        h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Eliminates the first `m` variables of `(H, b)` by Schur complement.
/// Returns the reduced system and whether the eliminated block was damped.
pub fn schur_complement(h: &DMatrix<f64>, b: &DVector<f64>, m: usize) -> (DMatrix<f64>, DVector<f64>, bool) {
    let n = h.nrows();
    let r = n - m;
    let hmm = h.view((0, 0), (m, m)).into_owned();
    let hmr = h.view((0, m), (m, r)).into_owned();
    let hrm = h.view((m, 0), (r, m)).into_owned();
    let hrr = h.view((m, m), (r, r)).into_owned();
    let bm = b.rows(0, m).into_owned();
    let br = b.rows(m, r).into_owned();
    let sym = (&hmm + hmm.transpose()) * 0.5;
    let (inv, damped) = match sym.clone().cholesky() {
        Some(c) => (c.inverse(), false),
        None => {
            let damped = sym + DMatrix::identity(m, m) * 1e-9;
            let inv = damped
                .clone()
                .cholesky()
                .map(|c| c.inverse())
                .or_else(|| damped.pseudo_inverse(1e-12).ok())
                .unwrap_or_else(|| DMatrix::zeros(m, m));
            (inv, true)
        }
    };
    let hr = &hrr - &hrm * &inv * &hmr;
    let hr = (&hr + hr.transpose()) * 0.5;
    let bred = &br - &hrm * &inv * &bm;
    (hr, bred, damped)
}

/// One LiDAR term with its correspondence frozen for an outer iteration.
#[derive(Debug, Clone, Copy)]
enum LidarTerm {
    Edge { p: Vector3<f64>, m: EdgeMatch },
    Plane { p: Vector3<f64>, plane: PlaneFit },
}

impl LidarTerm {
    /// Residual (1 or 3 rows used) and Jacobian wrt `[δθ, δt]`.
    fn eval(&self, state: &NavStated) -> (Vector3<f64>, nalgebra::Matrix3x6<f64>, usize) {
        let pose = state.pose();
        match self {
            LidarTerm::Edge { p, m } => {
                let pw = pose.apply(p);
                (m.residual_vec(&pw), m.jacobian_vec() * point_jacobian(&state.q, p), 3)
            }
            LidarTerm::Plane { p, plane } => {
                let pw = pose.apply(p);
                let mut r = Vector3::zeros();
                r[0] = plane.signed_distance(&pw);
                let mut j = nalgebra::Matrix3x6::zeros();
                j.row_mut(0).copy_from(&(plane.normal.transpose() * point_jacobian(&state.q, p)));
                (r, j, 1)
            }
        }
    }
}

fn huber_weight(r2: f64, huber: Option<f64>) -> (f64, f64) {
    match huber {
        Some(d) if r2 > d * d => {
            let r = r2.sqrt();
            (2.0 * d * r - d * d, d / r)
        }
        _ => (r2, 1.0),
    }
}

#[derive(Debug, Clone, Default)]
struct Associations {
    terms: Vec<Vec<LidarTerm>>,
    edges: usize,
    planes: usize,
    skipped_edges: usize,
    skipped_planes: usize,
}

/// Per-keyframe matching maps: a keyframe already inserted into the map is
/// matched against the map without its own points.
fn matching_maps<'m>(window: &[Keyframe], map: &'m LocalFeatureMap) -> Vec<Cow<'m, LocalFeatureMap>> {
    window
        .iter()
        .map(|kf| if map.contains(kf.id) { Cow::Owned(map.without(kf.id)) } else { Cow::Borrowed(map) })
        .collect()
}

fn associate(window: &[Keyframe], maps: &[Cow<'_, LocalFeatureMap>], cfg: &SwoConfig) -> Associations {
    let mut out = Associations::default();
    for (kf, map) in window.iter().zip(maps) {
        if map.is_empty() {
            out.terms.push(Vec::new());
            continue;
        }
        let pose = kf.state.pose();
        let edges: Vec<Option<LidarTerm>> = kf
            .features
            .edges
            .par_iter()
            .map(|f| map.match_edge(&pose.apply(&f.p), cfg).map(|m| LidarTerm::Edge { p: f.p, m }))
            .collect();
        let planes: Vec<Option<LidarTerm>> = kf
            .features
            .planes
            .par_iter()
            .map(|f| map.match_plane(&pose.apply(&f.p), cfg).map(|plane| LidarTerm::Plane { p: f.p, plane }))
            .collect();
        let ne = edges.iter().flatten().count();
        let np = planes.iter().flatten().count();
        out.edges += ne;
        out.planes += np;
        out.skipped_edges += edges.len() - ne;
        out.skipped_planes += planes.len() - np;
        out.terms.push(edges.into_iter().chain(planes).flatten().collect());
    }
    out
}

const CHUNK: usize = 256;

/// Cost, Hessian and gradient of one keyframe's LiDAR terms on its pose
/// block. Chunked summation keeps results independent of thread count.
fn lidar_system(terms: &[LidarTerm], state: &NavStated, cfg: &SwoConfig) -> (f64, Matrix6<f64>, Vector6<f64>) {
    let inv_var = 1.0 / (cfg.lidar_sigma * cfg.lidar_sigma);
    let chunks: Vec<(f64, Matrix6<f64>, Vector6<f64>)> = terms
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = (0.0, Matrix6::zeros(), Vector6::zeros());
            for t in chunk {
                let (r, j, rows) = t.eval(state);
                let r = r.rows(0, rows).into_owned();
                let j = j.rows(0, rows).into_owned();
                let (rho, w) = huber_weight(r.norm_squared(), cfg.huber);
                acc.0 += 0.5 * rho * inv_var;
                acc.1 += j.transpose() * &j * (w * inv_var);
                acc.2 += j.transpose() * r * (w * inv_var);
            }
            acc
        })
        .collect();
    chunks
        .into_iter()
        .fold((0.0, Matrix6::zeros(), Vector6::zeros()), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2))
}

fn lidar_cost(terms: &[LidarTerm], state: &NavStated, cfg: &SwoConfig) -> f64 {
    let inv_var = 1.0 / (cfg.lidar_sigma * cfg.lidar_sigma);
    let chunks: Vec<f64> = terms
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|t| {
                    let (r, _, rows) = t.eval(state);
                    0.5 * huber_weight(r.rows(0, rows).norm_squared(), cfg.huber).0 * inv_var
                })
                .sum::<f64>()
        })
        .collect();
    chunks.into_iter().sum()
}

fn prior_indices(window: &[Keyframe], prior: &MarginalPrior) -> Result<Vec<usize>, SwoError> {
    prior
        .ids
        .iter()
        .map(|id| window.iter().position(|k| k.id == *id).ok_or(SwoError::PriorOutsideWindow(*id)))
        .collect()
}

struct System {
    cost: f64,
    h: DMatrix<f64>,
    g: DVector<f64>,
}

fn build_system(
    window: &[Keyframe],
    states: &[NavStated],
    assoc: &Associations,
    prior: &MarginalPrior,
    prior_idx: &[usize],
    g: &Vector3<f64>,
    cfg: &SwoConfig,
    with_jacobians: bool,
) -> System {
    let n = window.len() * NAV_DIM;
    let mut sys = System { cost: 0.0, h: DMatrix::zeros(0, 0), g: DVector::zeros(0) };
    if with_jacobians {
        sys.h = DMatrix::zeros(n, n);
        sys.g = DVector::zeros(n);
    }

    if !prior.is_empty() {
        let ps: Vec<&NavStated> = prior_idx.iter().map(|&i| &states[i]).collect();
        sys.cost += prior.cost(&ps);
        if with_jacobians {
            let grad = prior.gradient(&ps);
            for (a, &ia) in prior_idx.iter().enumerate() {
                let ga = grad.rows(a * NAV_DIM, NAV_DIM);
                let mut dst = sys.g.rows_mut(ia * NAV_DIM, NAV_DIM);
                dst += ga;
                for (b, &ib) in prior_idx.iter().enumerate() {
                    let blk = prior.h.view((a * NAV_DIM, b * NAV_DIM), (NAV_DIM, NAV_DIM));
                    let mut dst = sys.h.view_mut((ia * NAV_DIM, ib * NAV_DIM), (NAV_DIM, NAV_DIM));
                    dst += blk;
                }
            }
        }
    }

    for k in 1..window.len() {
        let Some(delta) = &window[k].delta else { continue };
        let res = imu_residual(&states[k - 1], &states[k], delta, g);
        let l = imu_sqrt_information(delta);
        let r = l * res.r;
        sys.cost += 0.5 * r.norm_squared();
        if with_jacobians {
            let ji = l * res.j_i;
            let jj = l * res.j_j;
            let (a, b) = ((k - 1) * NAV_DIM, k * NAV_DIM);
            let mut add = |row: usize, col: usize, m: Matrix15| {
                let mut v = sys.h.view_mut((row, col), (NAV_DIM, NAV_DIM));
                v += m;
            };
            add(a, a, ji.transpose() * ji);
            add(a, b, ji.transpose() * jj);
            add(b, a, jj.transpose() * ji);
            add(b, b, jj.transpose() * jj);
            let mut ga = sys.g.rows_mut(a, NAV_DIM);
            ga += ji.transpose() * r;
            let mut gb = sys.g.rows_mut(b, NAV_DIM);
            gb += jj.transpose() * r;
        }
    }

    for (k, terms) in assoc.terms.iter().enumerate() {
        if terms.is_empty() {
            continue;
        }
        if with_jacobians {
            let (c, h6, g6) = lidar_system(terms, &states[k], cfg);
            sys.cost += c;
            let o = k * NAV_DIM;
            let mut v = sys.h.view_mut((o, o), (6, 6));
            v += h6;
            let mut gv = sys.g.rows_mut(o, 6);
            gv += g6;
        } else {
            sys.cost += lidar_cost(terms, &states[k], cfg);
        }
    }
    sys
}

/// Per-window optimization statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Costs of accepted steps, one list per outer iteration (each starts
    /// with the cost after re-association).
    pub accepted_costs: Vec<Vec<f64>>,
    pub edge_terms: usize,
    pub plane_terms: usize,
    pub skipped_edges: usize,
    pub skipped_planes: usize,
    /// No LiDAR correspondence anywhere in the window; states kept at their
    /// IMU predictions.
    pub imu_only: bool,
}

/// Levenberg-Marquardt over all window states. States are updated in place.
pub fn optimize_window(
    window: &mut [Keyframe],
    map: &LocalFeatureMap,
    prior: &MarginalPrior,
    g: &Vector3<f64>,
    cfg: &SwoConfig,
) -> Result<WindowStats, SwoError> {
    if window.len() > cfg.tau {
        return Err(SwoError::WindowTooLarge { len: window.len(), tau: cfg.tau });
    }
    let prior_idx = prior_indices(window, prior)?;
    let mut stats = WindowStats::default();
    let mut states: Vec<NavStated> = window.iter().map(|k| k.state).collect();
    let mut lambda = 1e-4;
    let maps = matching_maps(window, map);

    for outer in 0..cfg.max_outer {
        for (kf, s) in window.iter_mut().zip(&states) {
            kf.state = *s;
        }
        let assoc = associate(window, &maps, cfg);
        if outer == 0 {
            stats.edge_terms = assoc.edges;
            stats.plane_terms = assoc.planes;
            stats.skipped_edges = assoc.skipped_edges;
            stats.skipped_planes = assoc.skipped_planes;
            if assoc.edges + assoc.planes == 0 {
                stats.imu_only = true;
                let c = build_system(window, &states, &assoc, prior, &prior_idx, g, cfg, false).cost;
                stats.initial_cost = c;
                stats.final_cost = c;
                return Ok(stats);
            }
        }
        stats.outer_iterations += 1;
        let mut sys = build_system(window, &states, &assoc, prior, &prior_idx, g, cfg, true);
        if outer == 0 {
            stats.initial_cost = sys.cost;
        }
        if !sys.cost.is_finite() {
            return Err(SwoError::Diverged { outer, inner: 0, costs: stats.accepted_costs.concat() });
        }
        let mut trace = vec![sys.cost];
        let mut outer_step = 0.0f64;
        let mut converged = false;
        for inner in 0..cfg.max_inner {
            stats.inner_iterations += 1;
            let n = sys.h.nrows();
            let mut damped = sys.h.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * (sys.h[(i, i)] + 1e-9);
            }
            let rhs = -&sys.g;
            let Some(step) = damped.clone().cholesky().map(|c| c.solve(&rhs)).or_else(|| damped.lu().solve(&rhs)) else {
                lambda *= 10.0;
                continue;
            };
            if !step.iter().all(|v| v.is_finite()) {
                return Err(SwoError::Diverged { outer, inner, costs: stats.accepted_costs.concat() });
            }
            let candidate: Vec<NavStated> = states
                .iter()
                .enumerate()
                .map(|(k, s)| s.boxplus(&Vector15::from_iterator(step.rows(k * NAV_DIM, NAV_DIM).iter().copied())))
                .collect();
            let cost = build_system(window, &candidate, &assoc, prior, &prior_idx, g, cfg, false).cost;
            if !cost.is_finite() {
                lambda *= 10.0;
                continue;
            }
            if cost <= sys.cost {
                states = candidate;
                lambda = (lambda / 10.0).max(1e-12);
                outer_step = outer_step.max(step.norm());
                trace.push(cost);
                if step.norm() < cfg.param_tol {
                    converged = true;
                    break;
                }
                sys = build_system(window, &states, &assoc, prior, &prior_idx, g, cfg, true);
            } else {
                lambda *= 10.0;
                if step.norm() < cfg.param_tol {
                    converged = true;
                    break;
                }
            }
        }
        stats.final_cost = *trace.last().unwrap();
        stats.accepted_costs.push(trace);
        if converged && outer_step < cfg.param_tol {
            break;
        }
    }
    for (kf, s) in window.iter_mut().zip(&states) {
        kf.state = *s;
    }
    Ok(stats)
}

/// Schur-complements the oldest window state out of the factors touching
/// it: the current prior, its inertial link to the next state and its own
/// LiDAR terms. The result is linearized at the current estimates.
pub fn marginalize_oldest(
    window: &[Keyframe],
    map: &LocalFeatureMap,
    prior: &MarginalPrior,
    g: &Vector3<f64>,
    cfg: &SwoConfig,
) -> Result<MarginalPrior, SwoError> {
    if window.len() < 2 {
        return Err(SwoError::WindowTooSmall(window.len()));
    }
    let prior_idx = prior_indices(window, prior)?;
    let states: Vec<NavStated> = window.iter().map(|k| k.state).collect();
    // restrict to factors connected to the oldest state
    let mut assoc = associate(&window[..1], &matching_maps(&window[..1], map), cfg);
    assoc.terms.resize(window.len(), Vec::new());
    let connected_prior = if prior_idx.contains(&0) { prior.clone() } else { MarginalPrior::empty() };
    let cp_idx = if connected_prior.is_empty() { Vec::new() } else { prior_idx.clone() };
    let mut link: Vec<Keyframe> = window.to_vec();
    for kf in link.iter_mut().skip(2) {
        kf.delta = None;
    }
    let sys = build_system(&link, &states, &assoc, &connected_prior, &cp_idx, g, cfg, true);
    let (h, b, damped) = schur_complement(&sys.h, &sys.g, NAV_DIM);
    let mut out = MarginalPrior {
        ids: window[1..].iter().map(|k| k.id).collect(),
        x0: states[1..].to_vec(),
        h,
        b,
        damped,
    };
    // carry forward the part of the old prior not touching the oldest state
    if !prior.is_empty() && !prior_idx.contains(&0) {
        let ps: Vec<&NavStated> = prior_idx.iter().map(|&i| &states[i]).collect();
        let grad = prior.gradient(&ps);
        for (a, &ia) in prior_idx.iter().enumerate() {
            let mut bv = out.b.rows_mut((ia - 1) * NAV_DIM, NAV_DIM);
            bv += grad.rows(a * NAV_DIM, NAV_DIM);
            for (c, &ic) in prior_idx.iter().enumerate() {
                let blk = prior.h.view((a * NAV_DIM, c * NAV_DIM), (NAV_DIM, NAV_DIM)).into_owned();
                let mut hv = out.h.view_mut(((ia - 1) * NAV_DIM, (ic - 1) * NAV_DIM), (NAV_DIM, NAV_DIM));
                hv += blk;
            }
        }
    }
    Ok(out)
}

/// Relative rotation angle accumulated by a preintegration, in radians.
pub fn imu_rotation_angle(delta: &PreintegratedImu) -> f64 {
    delta.delta_q.angle_to(&Quatd::identity())
}
