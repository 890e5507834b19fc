//! Planar-patch world and ray casting.

use nalgebra::{Matrix2, Vector3};

use crate::SimError;

/// Finite parallelogram `corner + α·e1 + β·e2`, `α, β ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub corner: Vector3<f64>,
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
    normal: Vector3<f64>,
    dual1: Vector3<f64>,
    dual2: Vector3<f64>,
}

impl Patch {
    pub fn new(corner: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>) -> Result<Self, SimError> {
        let n = e1.cross(&e2);
        if n.norm() <= 1e-9 {
            return Err(SimError::DegeneratePatch);
        }
        let gram = Matrix2::new(e1.dot(&e1), e1.dot(&e2), e1.dot(&e2), e2.dot(&e2));
        let inv = gram.try_inverse().ok_or(SimError::DegeneratePatch)?;
        Ok(Self {
            corner,
            e1,
            e2,
            normal: n.normalize(),
            dual1: e1 * inv[(0, 0)] + e2 * inv[(0, 1)],
            dual2: e1 * inv[(1, 0)] + e2 * inv[(1, 1)],
        })
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.normal
    }

    /// Ray parameter of the hit, if any, within `(1e-6, max]`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max: f64) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.corner - origin)) / denom;
        if !(t > 1e-6 && t <= max) {
            return None;
        }
        let q = origin + dir * t - self.corner;
        let a = q.dot(&self.dual1);
        let b = q.dot(&self.dual2);
        const EPS: f64 = 1e-12;
        if (-EPS..=1.0 + EPS).contains(&a) && (-EPS..=1.0 + EPS).contains(&b) {
            Some(t)
        } else {
            None
        }
    }

    /// Distance from `p` to the patch's supporting plane.
    pub fn plane_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.corner)).abs()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct World {
    pub patches: Vec<Patch>,
}

impl World {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn add_patch(&mut self, corner: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>) -> Result<usize, SimError> {
        self.patches.push(Patch::new(corner, e1, e2)?);
        Ok(self.patches.len() - 1)
    }

    /// Vertical wall from `(ax, ay)` to `(bx, by)` between heights `z0` and `z1`.
    pub fn add_wall(&mut self, a: [f64; 2], b: [f64; 2], z0: f64, z1: f64) -> Result<usize, SimError> {
        self.add_patch(
            Vector3::new(a[0], a[1], z0),
            Vector3::new(b[0] - a[0], b[1] - a[1], 0.0),
            Vector3::new(0.0, 0.0, z1 - z0),
        )
    }

    /// Horizontal rectangle `[x0, x1] × [y0, y1]` at height `z`.
    pub fn add_floor(&mut self, x: [f64; 2], y: [f64; 2], z: f64) -> Result<usize, SimError> {
        self.add_patch(
            Vector3::new(x[0], y[0], z),
            Vector3::new(x[1] - x[0], 0.0, 0.0),
            Vector3::new(0.0, y[1] - y[0], 0.0),
        )
    }

    /// Axis-aligned box; returns the index of its first face.
    pub fn add_box(&mut self, min: Vector3<f64>, max: Vector3<f64>) -> Result<usize, SimError> {
        let first = self.patches.len();
        let (x, y) = ([min.x, max.x], [min.y, max.y]);
        self.add_wall([x[0], y[0]], [x[1], y[0]], min.z, max.z)?;
        self.add_wall([x[1], y[0]], [x[1], y[1]], min.z, max.z)?;
        self.add_wall([x[1], y[1]], [x[0], y[1]], min.z, max.z)?;
        self.add_wall([x[0], y[1]], [x[0], y[0]], min.z, max.z)?;
        self.add_floor(x, y, min.z)?;
        self.add_floor(x, y, max.z)?;
        Ok(first)
    }

    /// Walls, floor and ceiling of an axis-aligned room.
    pub fn add_room(&mut self, min: Vector3<f64>, max: Vector3<f64>) -> Result<usize, SimError> {
        self.add_box(min, max)
    }

    /// Nearest hit as `(range, patch index)`; equal ranges within 1e-9
    /// resolve to the lowest index.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.patches.iter().enumerate() {
            if let Some(t) = p.intersect(origin, dir, max) {
                if best.map_or(true, |(bt, _)| t < bt - 1e-9) {
                    best = Some((t, i));
                }
            }
        }
        best
    }
}
