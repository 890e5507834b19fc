//! Keyframe pose graph with odometry and ICP-verified loop edges.
//!
//! Edge residuals are `[t_e, Log(R_e)]` of `E = T_ij⁻¹ T_i⁻¹ T_j`; node
//! poses are perturbed as `R ← R Exp(δθ)`, `t ← t + δt`. The lowest node id
//! is held fixed as the gauge.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{right_jacobian_inv, skew};
use crate::kdtree::KdTree;
use crate::{NavStated, Posed, Quatd};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {0} already exists")]
    DuplicateNode(usize),
    #[error("node {0} does not exist")]
    MissingNode(usize),
    #[error("graph is disconnected from node {root}; orphans {orphans:?}")]
    Disconnected { root: usize, orphans: Vec<usize> },
    #[error("information matrix of edge {i}->{j} is not symmetric positive semi-definite")]
    BadInformation { i: usize, j: usize },
    #[error("graph has no nodes")]
    Empty,
    #[error("malformed graph text at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("ICP: {0}")]
    Icp(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// Relative-pose constraint from node `i` to node `j`. Information is
/// ordered `[translation, rotation]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub measurement: Posed,
    pub info: Matrix6<f64>,
    pub kind: EdgeKind,
}

/// `diag(1e2·I_trans, 1e4·I_rot)`.
pub fn default_information() -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(1e2, 1e2, 1e2, 1e4, 1e4, 1e4))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    nodes: BTreeMap<usize, Posed>,
    edges: Vec<GraphEdge>,
    clouds: BTreeMap<usize, Vec<Vector3<f64>>>,
    last: Option<usize>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &BTreeMap<usize, Posed> {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn node(&self, id: usize) -> Option<&Posed> {
        self.nodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn loop_count(&self) -> usize {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Loop).count()
    }

    /// Adds a node without any edge.
    pub fn add_node(&mut self, id: usize, pose: Posed) -> Result<(), GraphError> {
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateNode(id));
        }
        self.nodes.insert(id, pose);
        self.last = Some(id);
        Ok(())
    }

    pub fn add_edge(&mut self, edge: GraphEdge) -> Result<(), GraphError> {
        for id in [edge.i, edge.j] {
            if !self.nodes.contains_key(&id) {
                return Err(GraphError::MissingNode(id));
            }
        }
        let sym = (edge.info - edge.info.transpose()).norm() <= 1e-9 * edge.info.norm().max(1.0);
        let psd = edge.info.symmetric_eigenvalues().iter().all(|&e| e >= -1e-9);
        if !sym || !psd {
            return Err(GraphError::BadInformation { i: edge.i, j: edge.j });
        }
        self.edges.push(edge);
        Ok(())
    }

    /// Keeps a body-frame point cloud for loop verification.
    pub fn attach_cloud(&mut self, id: usize, cloud: Vec<Vector3<f64>>) -> Result<(), GraphError> {
        if !self.nodes.contains_key(&id) {
            return Err(GraphError::MissingNode(id));
        }
        self.clouds.insert(id, cloud);
        Ok(())
    }

    pub fn cloud(&self, id: usize) -> Option<&[Vector3<f64>]> {
        self.clouds.get(&id).map(Vec::as_slice)
    }

    pub fn set_poses(&mut self, poses: &BTreeMap<usize, Posed>) {
        for (id, p) in poses {
            if let Some(n) = self.nodes.get_mut(id) {
                *n = *p;
            }
        }
    }

    /// Total weighted squared error `Σ rᵀ Λ r`.
    pub fn cost(&self) -> f64 {
        graph_cost(&self.nodes, &self.edges)
    }

    /// Plain-text export: `NODE id tx ty tz qw qx qy qz` and
    /// `EDGE i j tx ty tz qw qx qy qz` followed by the 21 upper-triangular
    /// information values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, p) in &self.nodes {
            let r = p.to_record();
            let _ = writeln!(s, "NODE {id} {}", join(&r));
        }
        for e in &self.edges {
            let r = e.measurement.to_record();
            let mut info = Vec::with_capacity(21);
            for a in 0..6 {
                for b in a..6 {
                    info.push(e.info[(a, b)]);
                }
            }
            let _ = writeln!(s, "EDGE {} {} {} {}", e.i, e.j, join(&r), join(&info));
        }
        s
    }

    /// Parses [`PoseGraph::to_text`] output. The format does not carry edge
    /// kinds: edges between consecutive ids are read back as odometry.
    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut g = Self::new();
        for (n, line) in text.lines().enumerate() {
            let err = |msg: &str| GraphError::Parse { line: n + 1, msg: msg.to_string() };
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.is_empty() {
                continue;
            }
            let nums = |from: usize| -> Result<Vec<f64>, GraphError> {
                tok[from..].iter().map(|t| t.parse::<f64>().map_err(|_| err("bad number"))).collect()
            };
            let id = |k: usize| -> Result<usize, GraphError> { tok.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| err("bad id")) };
            match tok[0] {
                "NODE" => {
                    let v = nums(2)?;
                    let r: [f64; 7] = v.try_into().map_err(|_| err("NODE needs 7 values"))?;
                    g.add_node(id(1)?, Posed::from_record(&r))?;
                }
                "EDGE" => {
                    let v = nums(3)?;
                    if v.len() != 28 {
                        return Err(err("EDGE needs 28 values"));
                    }
                    let r: [f64; 7] = v[..7].try_into().unwrap();
                    let mut info = Matrix6::zeros();
                    let mut k = 7;
                    for a in 0..6 {
                        for b in a..6 {
                            info[(a, b)] = v[k];
                            info[(b, a)] = v[k];
                            k += 1;
                        }
                    }
                    let (i, j) = (id(1)?, id(2)?);
                    let kind = if j == i + 1 { EdgeKind::Odometry } else { EdgeKind::Loop };
                    g.add_edge(GraphEdge { i, j, measurement: Posed::from_record(&r), info, kind })?;
                }
                _ => return Err(err("unknown record")),
            }
        }
        Ok(g)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Adds a keyframe node and an odometry edge from the previously added node
/// carrying their relative pose.
pub fn add_keyframe_node(
    graph: &mut PoseGraph,
    kf_id: usize,
    state: &NavStated,
    info: Option<Matrix6<f64>>,
) -> Result<(), GraphError> {
    if graph.nodes.contains_key(&kf_id) {
        return Err(GraphError::DuplicateNode(kf_id));
    }
    let prev = graph.last;
    let pose = state.pose();
    graph.add_node(kf_id, pose)?;
    if let Some(p) = prev {
        let measurement = graph.nodes[&p].between(&pose);
        graph.add_edge(GraphEdge {
            i: p,
            j: kf_id,
            measurement,
            info: info.unwrap_or_else(default_information),
            kind: EdgeKind::Odometry,
        })?;
    }
    Ok(())
}

/// Residual `[t_e, Log(R_e)]` and Jacobians wrt `[δθ, δt]` of both nodes.
pub fn edge_residual(ti: &Posed, tj: &Posed, meas: &Posed) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let ri = ti.rotation.to_matrix();
    let rj = tj.rotation.to_matrix();
    let rij_t = meas.rotation.to_matrix().transpose();
    let rel = ri.transpose() * (tj.translation - ti.translation);
    let te = rij_t * (rel - meas.translation);
    let re = meas.rotation.inverse() * ti.rotation.inverse() * tj.rotation;
    let phi = re.log();
    let jr_inv = right_jacobian_inv(&phi);

    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&te);
    r.fixed_rows_mut::<3>(3).copy_from(&phi);

    let mut ji = Matrix6::zeros();
    let mut jj = Matrix6::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rij_t * skew(&rel)));
    ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rij_t * ri.transpose()));
    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-jr_inv * rj.transpose() * ri));
    jj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rij_t * ri.transpose()));
    jj.fixed_view_mut::<3, 3>(3, 0).copy_from(&jr_inv);
    (r, ji, jj)
}

fn graph_cost(nodes: &BTreeMap<usize, Posed>, edges: &[GraphEdge]) -> f64 {
    edges
        .iter()
        .map(|e| {
            let (r, _, _) = edge_residual(&nodes[&e.i], &nodes[&e.j], &e.measurement);
            r.dot(&(e.info * r))
        })
        .sum()
}

fn retract(p: &Posed, d: &[f64]) -> Posed {
    let dth = Vector3::new(d[0], d[1], d[2]);
    let dt = Vector3::new(d[3], d[4], d[5]);
    Posed::new(p.rotation.boxplus(&dth), p.translation + dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSolution {
    pub poses: BTreeMap<usize, Posed>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Gauss-Newton over all nodes except the lowest id.
pub fn optimize_graph(graph: &PoseGraph, params: &GraphParams) -> Result<GraphSolution, GraphError> {
    let root = *graph.nodes.keys().next().ok_or(GraphError::Empty)?;
    check_connected(graph, root)?;
    let free: Vec<usize> = graph.nodes.keys().copied().filter(|&id| id != root).collect();
    let index: BTreeMap<usize, usize> = free.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let n = free.len() * 6;
    let mut poses = graph.nodes.clone();
    let initial_cost = graph_cost(&poses, &graph.edges);
    let mut cost = initial_cost;
    let mut iterations = 0;
    if n == 0 {
        return Ok(GraphSolution { poses, initial_cost, final_cost: cost, iterations });
    }
    while iterations < params.max_iter {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for e in &graph.edges {
            let (r, ji, jj) = edge_residual(&poses[&e.i], &poses[&e.j], &e.measurement);
            let blocks = [(index.get(&e.i), ji), (index.get(&e.j), jj)];
            for (a, ja) in &blocks {
                let Some(&a) = a else { continue };
                let mut gv = g.rows_mut(a * 6, 6);
                gv += ja.transpose() * e.info * r;
                for (b, jb) in &blocks {
                    let Some(&b) = b else { continue };
                    let mut hv = h.view_mut((a * 6, b * 6), (6, 6));
                    hv += ja.transpose() * e.info * jb;
                }
            }
        }
        for i in 0..n {
            h[(i, i)] += 1e-12;
        }
        let Some(step) = h.clone().cholesky().map(|c| c.solve(&(-&g))).or_else(|| h.lu().solve(&(-&g))) else {
            break;
        };
        // backtrack to keep the cost non-increasing
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..10 {
            let mut trial = poses.clone();
            for (&id, &k) in &index {
                let d: Vec<f64> = step.rows(k * 6, 6).iter().map(|v| v * scale).collect();
                trial.insert(id, retract(&poses[&id], &d));
            }
            let c = graph_cost(&trial, &graph.edges);
            if c <= cost {
                accepted = Some((trial, c));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, c)) = accepted else { break };
        poses = trial;
        cost = c;
        if step.norm() * scale < params.tol {
            break;
        }
    }
    Ok(GraphSolution { poses, initial_cost, final_cost: cost, iterations })
}

fn check_connected(graph: &PoseGraph, root: usize) -> Result<(), GraphError> {
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in &graph.edges {
        adj.entry(e.i).or_default().push(e.j);
        adj.entry(e.j).or_default().push(e.i);
    }
    let mut seen = BTreeSet::from([root]);
    let mut queue = VecDeque::from([root]);
    while let Some(n) = queue.pop_front() {
        for &m in adj.get(&n).into_iter().flatten() {
            if seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    let orphans: Vec<usize> = graph.nodes.keys().copied().filter(|id| !seen.contains(id)).collect();
    if orphans.is_empty() {
        Ok(())
    } else {
        Err(GraphError::Disconnected { root, orphans })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub max_corr_dist: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_corr_dist: 1.0, max_iter: 50, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub pose: Posed,
    /// Mean squared inlier distance (m²).
    pub fitness: f64,
    pub inliers: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Point-to-point ICP with closed-form (SVD) updates.
pub fn icp_point_to_point(
    source: &[Vector3<f64>],
    target: &KdTree,
    init: &Posed,
    params: &IcpParams,
) -> Result<IcpResult, GraphError> {
    let mut pose = *init;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        iterations += 1;
        let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = source
            .par_iter()
            .filter_map(|p| {
                let q = pose.apply(p);
                target.knn_within(&q, 1, params.max_corr_dist).first().map(|&(j, _)| (q, *target.point(j)))
            })
            .collect();
        if pairs.len() < 3 {
            return Err(GraphError::Icp(format!("{} correspondences", pairs.len())));
        }
        let n = pairs.len() as f64;
        let ms = pairs.iter().fold(Vector3::zeros(), |a, p| a + p.0) / n;
        let mt = pairs.iter().fold(Vector3::zeros(), |a, p| a + p.1) / n;
        let cov = pairs.iter().fold(Matrix3::zeros(), |a: Matrix3<f64>, (s, t)| a + (t - mt) * (s - ms).transpose());
        let svd = cov.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let r = u * d * vt;
        let step = Posed::new(Quatd::from_matrix(&r), mt - r * ms);
        pose = step.compose(&pose);
        let (angle, dist) = step.distance(&Posed::identity());
        if angle + dist < params.tol {
            converged = true;
            break;
        }
    }
    let d2: Vec<f64> = source
        .par_iter()
        .filter_map(|p| target.knn_within(&pose.apply(p), 1, params.max_corr_dist).first().map(|x| x.1))
        .collect();
    if d2.is_empty() {
        return Err(GraphError::Icp("no inliers".into()));
    }
    let fitness = d2.iter().sum::<f64>() / d2.len() as f64;
    Ok(IcpResult { pose, fitness, inliers: d2.len(), iterations, converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopParams {
    pub search_radius: f64,
    pub min_gap: usize,
    pub max_fitness: f64,
    pub min_inliers: usize,
    pub max_candidates: usize,
    pub icp: IcpParams,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            search_radius: 3.0,
            min_gap: 10,
            max_fitness: 0.05,
            min_inliers: 100,
            max_candidates: 3,
            icp: IcpParams::default(),
        }
    }
}

/// Searches earlier nodes near `current` and verifies the closest
/// candidates with ICP on their attached clouds. Returns a loop edge from
/// the accepted candidate to `current`.
pub fn detect_loop(
    graph: &PoseGraph,
    current: usize,
    params: &LoopParams,
    info: Option<Matrix6<f64>>,
) -> Result<Option<GraphEdge>, GraphError> {
    let cur_pose = *graph.node(current).ok_or(GraphError::MissingNode(current))?;
    let Some(cur_cloud) = graph.cloud(current) else {
        return Ok(None);
    };
    let mut candidates: Vec<(f64, usize)> = graph
        .nodes
        .iter()
        .filter(|(&id, _)| id < current && current - id >= params.min_gap)
        .map(|(&id, p)| ((p.translation - cur_pose.translation).norm(), id))
        .filter(|&(d, id)| d <= params.search_radius && graph.clouds.contains_key(&id))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, id) in candidates.iter().take(params.max_candidates) {
        let target = KdTree::build(graph.clouds[&id].clone());
        let init = graph.nodes[&id].between(&cur_pose);
        let Ok(res) = icp_point_to_point(cur_cloud, &target, &init, &params.icp) else {
            continue;
        };
        if res.fitness < params.max_fitness && res.inliers >= params.min_inliers {
            return Ok(Some(GraphEdge {
                i: id,
                j: current,
                measurement: res.pose,
                info: info.unwrap_or_else(default_information),
                kind: EdgeKind::Loop,
            }));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn node(x: f64, y: f64, yaw: f64) -> Posed {
        Posed::new(Quatd::from_yaw(yaw), Vector3::new(x, y, 0.0))
    }

    #[test]
    fn node_and_edge_bookkeeping() {
        let mut g = PoseGraph::new();
        add_keyframe_node(&mut g, 0, &NavStated::identity(), None).unwrap();
        assert_eq!((g.len(), g.edges().len()), (1, 0));
        let s1 = NavStated::from_pose(&Posed::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        add_keyframe_node(&mut g, 1, &s1, None).unwrap();
        assert!((g.edges()[0].measurement.translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(add_keyframe_node(&mut g, 1, &s1, None), Err(GraphError::DuplicateNode(1)));
    }

    #[test]
    fn odometry_chain_composes_to_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = PoseGraph::new();
        for k in 0..5 {
            let p = Posed::new(Quatd::exp(&Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))), Vector3::new(k as f64, rng.gen_range(-1.0..1.0), 0.3));
            add_keyframe_node(&mut g, k, &NavStated::from_pose(&p), None).unwrap();
        }
        let mut acc = g.nodes()[&0];
        for e in g.edges() {
            acc = acc.compose(&e.measurement);
            assert!(acc.approx_eq(&g.nodes()[&e.j], 1e-12));
        }
        assert!(g.cost() < 1e-20);
    }

    #[test]
    fn residual_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rp = |rng: &mut ChaCha8Rng| {
            Posed::new(
                Quatd::exp(&Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
                Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
            )
        };
        for _ in 0..50 {
            let (ti, tj, m) = (rp(&mut rng), rp(&mut rng), rp(&mut rng));
            let (_, ji, jj) = edge_residual(&ti, &tj, &m);
            let h = 1e-6;
            let mut fi = Matrix6::zeros();
            let mut fj = Matrix6::zeros();
            for k in 0..6 {
                let mut d = [0.0; 6];
                d[k] = h;
                let mut dm = [0.0; 6];
                dm[k] = -h;
                fi.set_column(k, &((edge_residual(&retract(&ti, &d), &tj, &m).0 - edge_residual(&retract(&ti, &dm), &tj, &m).0) / (2.0 * h)));
                fj.set_column(k, &((edge_residual(&ti, &retract(&tj, &d), &m).0 - edge_residual(&ti, &retract(&tj, &dm), &m).0) / (2.0 * h)));
            }
            assert!((ji - fi).norm() / fi.norm() < 1e-5);
            assert!((jj - fj).norm() / fj.norm() < 1e-5);
        }
    }

    #[test]
    fn consistent_chain_is_a_fixed_point() {
        let mut g = PoseGraph::new();
        for k in 0..4 {
            add_keyframe_node(&mut g, k, &NavStated::from_pose(&node(k as f64, 0.0, 0.1 * k as f64)), None).unwrap();
        }
        let sol = optimize_graph(&g, &GraphParams::default()).unwrap();
        assert!(sol.final_cost < 1e-20);
        for (id, p) in &sol.poses {
            assert!(p.approx_eq(&g.nodes()[id], 1e-12));
        }
    }

    #[test]
    fn triangle_with_contradiction() {
        let mut g = PoseGraph::new();
        g.add_node(0, node(0.0, 0.0, 0.0)).unwrap();
        g.add_node(1, node(1.0, 0.0, 0.0)).unwrap();
        g.add_node(2, node(1.0, 1.0, 0.0)).unwrap();
        let info = Matrix6::identity();
        let e = |i, j, m| GraphEdge { i, j, measurement: m, info, kind: EdgeKind::Odometry };
        g.add_edge(e(0, 1, node(1.0, 0.0, 0.0))).unwrap();
        g.add_edge(e(1, 2, node(0.0, 1.0, 0.0))).unwrap();
        g.add_edge(e(0, 2, node(1.3, 1.0, 0.0))).unwrap();
        let sol = optimize_graph(&g, &GraphParams::default()).unwrap();
        assert!(sol.final_cost < sol.initial_cost);
        assert_eq!(sol.poses[&0], g.nodes()[&0]);

        // dense oracle: nodes 1, 2 as absolute (rotation vector, translation),
        // Gauss-Newton with finite-difference Jacobians
        let unpack = |x: &DVector<f64>, k: usize| {
            Posed::new(
                Quatd::exp(&Vector3::new(x[6 * k], x[6 * k + 1], x[6 * k + 2])),
                Vector3::new(x[6 * k + 3], x[6 * k + 4], x[6 * k + 5]),
            )
        };
        let resid = |x: &DVector<f64>| {
            let poses = [g.nodes()[&0], unpack(x, 0), unpack(x, 1)];
            let mut r = DVector::zeros(18);
            for (k, e) in g.edges().iter().enumerate() {
                let err = e.measurement.inverse().compose(&poses[e.i].inverse()).compose(&poses[e.j]);
                r.rows_mut(6 * k, 3).copy_from(&err.translation);
                r.rows_mut(6 * k + 3, 3).copy_from(&err.rotation.log());
            }
            r
        };
        let mut x = DVector::zeros(12);
        x[3] = 1.0;
        x[9] = 1.0;
        x[10] = 1.0;
        for _ in 0..50 {
            let r0 = resid(&x);
            let mut jac = DMatrix::zeros(18, 12);
            for c in 0..12 {
                let mut xp = x.clone();
                xp[c] += 1e-7;
                let mut xm = x.clone();
                xm[c] -= 1e-7;
                jac.set_column(c, &((resid(&xp) - resid(&xm)) / 2e-7));
            }
            let step = (jac.transpose() * &jac).cholesky().unwrap().solve(&(-(jac.transpose() * r0)));
            x += &step;
            if step.norm() < 1e-12 {
                break;
            }
        }
        for k in 0..2 {
            let (da, dt) = unpack(&x, k).distance(&sol.poses[&(k + 1)]);
            assert!(da < 1e-6 && dt < 1e-6, "node {} da {da} dt {dt}", k + 1);
        }
    }

    #[test]
    fn disconnected_graph_lists_orphans() {
        let mut g = PoseGraph::new();
        for k in 0..3 {
            g.add_node(k, Posed::identity()).unwrap();
        }
        g.add_edge(GraphEdge { i: 0, j: 1, measurement: Posed::identity(), info: default_information(), kind: EdgeKind::Odometry }).unwrap();
        assert_eq!(optimize_graph(&g, &GraphParams::default()), Err(GraphError::Disconnected { root: 0, orphans: vec![2] }));
    }

    #[test]
    fn text_round_trip() {
        let mut g = PoseGraph::new();
        for k in 0..3 {
            add_keyframe_node(&mut g, k, &NavStated::from_pose(&node(k as f64, 0.5, 0.2)), None).unwrap();
        }
        let text = g.to_text();
        assert_eq!(text.lines().filter(|l| l.starts_with("EDGE")).count(), 2);
        assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 9);
        assert_eq!(text.lines().last().unwrap().split_whitespace().count(), 3 + 7 + 21);
        let back = PoseGraph::from_text(&text).unwrap();
        assert_eq!(back.nodes(), g.nodes());
        assert_eq!(back.edges(), g.edges());
    }

    fn room_cloud(rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..3000)
            .map(|i| {
                let (a, b) = (rng.gen_range(-4.0..4.0), rng.gen_range(-1.0..2.0));
                match i % 4 {
                    0 => Vector3::new(a, 3.0, b),
                    1 => Vector3::new(5.0, a * 0.7, b),
                    2 => Vector3::new(a, a * 0.3 - 3.0, b),
                    _ => Vector3::new(a, b * 1.5, -1.0),
                }
            })
            .collect()
    }

    #[test]
    fn loop_detection_recovers_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let world = room_cloud(&mut rng);
        let mut g = PoseGraph::new();
        for k in 0..12 {
            let x = if k < 6 { k as f64 } else { (11 - k) as f64 };
            g.add_node(k, node(x, 0.0, 0.0)).unwrap();
        }
        // node 11 truly sits at node 0 but carries 0.2 m of drift
        g.nodes.insert(11, node(0.2, 0.0, 0.0));
        g.attach_cloud(0, world.clone()).unwrap();
        g.attach_cloud(11, world.clone()).unwrap();
        let edge = detect_loop(&g, 11, &LoopParams::default(), None).unwrap().unwrap();
        assert_eq!((edge.i, edge.j, edge.kind), (0, 11, EdgeKind::Loop));
        assert!(edge.measurement.translation.norm() < 1e-2);
        let est = g.nodes()[&0].between(&g.nodes()[&11]);
        assert!(((est.translation - edge.measurement.translation).norm() - 0.2).abs() < 0.02);

        // no earlier node inside the radius
        g.nodes.insert(11, node(50.0, 0.0, 0.0));
        assert_eq!(detect_loop(&g, 11, &LoopParams::default(), None).unwrap(), None);
    }

    #[test]
    fn square_loop_correction() {
        // 40 nodes around a 10 m square, odometry with 1 % scale drift
        let truth: Vec<Posed> = (0..40)
            .map(|k| {
                let side = k / 10;
                let s = (k % 10) as f64;
                let (x, y) = match side {
                    0 => (s, 0.0),
                    1 => (10.0, s),
                    2 => (10.0 - s, 10.0),
                    _ => (0.0, 10.0 - s),
                };
                node(x, y, side as f64 * std::f64::consts::FRAC_PI_2)
            })
            .collect();
        let mut g = PoseGraph::new();
        let mut est = truth[0];
        g.add_node(0, est).unwrap();
        for k in 1..40 {
            let mut rel = truth[k - 1].between(&truth[k]);
            rel.translation *= 1.01;
            rel.rotation = rel.rotation * Quatd::from_yaw(0.002);
            est = est.compose(&rel);
            g.add_node(k, est).unwrap();
            g.add_edge(GraphEdge { i: k - 1, j: k, measurement: rel, info: default_information(), kind: EdgeKind::Odometry }).unwrap();
        }
        g.add_edge(GraphEdge { i: 39, j: 0, measurement: truth[39].between(&truth[0]), info: default_information(), kind: EdgeKind::Loop }).unwrap();
        let before = (g.nodes()[&39].translation - truth[39].translation).norm();
        let sol = optimize_graph(&g, &GraphParams::default()).unwrap();
        let after = (sol.poses[&39].translation - truth[39].translation).norm();
        assert!(after * 5.0 <= before, "before {before} after {after}");
        assert_eq!(sol.poses[&0], g.nodes()[&0]);
    }
}
