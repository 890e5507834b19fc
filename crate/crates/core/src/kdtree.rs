//! Static 3-D kd-tree for nearest-neighbour correspondence search.
//!
//! Built once over an owned point set; queries return `(index, squared
//! distance)` pairs ordered by distance, ties broken by index so results are
//! reproducible.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { lo: usize, hi: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, Default)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: Vec<Vector3<f64>>) -> Self {
        let mut tree = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        if !tree.points.is_empty() {
            let n = tree.points.len();
            tree.build_node(0, n);
        }
        tree
    }

    fn build_node(&mut self, lo: usize, hi: usize) -> usize {
        let id = self.nodes.len();
        if hi - lo <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { lo, hi });
            return id;
        }
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let dim = (max - min).imax();
        if max[dim] - min[dim] <= 0.0 {
            self.nodes.push(Node::Leaf { lo, hi });
            return id;
        }
        let mid = lo + (hi - lo) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][dim].total_cmp(&pts[b][dim]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(Node::Leaf { lo, hi });
        let left = self.build_node(lo, mid);
        let right = self.build_node(mid, hi);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        self.knn(q, 1).into_iter().next()
    }

    /// The `k` nearest points to `q`.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        self.knn_within(q, k, f64::INFINITY)
    }

    /// The `k` nearest points with distance at most `radius`.
    pub fn knn_within(&self, q: &Vector3<f64>, k: usize, radius: f64) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return best;
        }
        let r2 = if radius.is_finite() { radius * radius } else { f64::INFINITY };
        self.search(0, q, k, r2, &mut best);
        best
    }

    fn worst(best: &[(usize, f64)], k: usize, r2: f64) -> f64 {
        if best.len() < k {
            r2
        } else {
            best[best.len() - 1].1
        }
    }

    fn search(&self, node: usize, q: &Vector3<f64>, k: usize, r2: f64, best: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { lo, hi } => {
                for &i in &self.order[lo..hi] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 > Self::worst(best, k, r2) {
                        continue;
                    }
                    let key = (d2, i);
                    let pos = best.partition_point(|&(j, d)| (d, j) < key);
                    best.insert(pos, (i, d2));
                    if best.len() > k {
                        best.pop();
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, r2, best);
                if diff * diff <= Self::worst(best, k, r2) {
                    self.search(far, q, k, r2, best);
                }
            }
        }
    }
}
