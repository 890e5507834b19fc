//! Twice-differentiable ground-truth trajectories through control poses.
//!
//! Translation is a clamped cubic spline per axis. Rotation is a clamped
//! cubic spline on unwrapped Z-Y-X Euler angles, which interpolates the
//! control attitudes exactly and yields analytic body rates.

use mlio_core::{NavStated, Posed, Quatd};
use nalgebra::Vector3;

use crate::SimError;

/// Clamped cubic spline on strictly increasing knots.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    /// End slopes are those of the quadratic through the three outermost
    /// knots at each end, so quadratics are reproduced exactly.
    pub fn new(x: &[f64], y: &[f64]) -> Self {
        let n = x.len();
        assert!(n >= 2 && n == y.len());
        let dd = |i: usize, j: usize| (y[j] - y[i]) / (x[j] - x[i]);
        let (s0, sn) = if n >= 3 {
            let c0 = (dd(1, 2) - dd(0, 1)) / (x[2] - x[0]);
            let cn = (dd(n - 2, n - 1) - dd(n - 3, n - 2)) / (x[n - 1] - x[n - 3]);
            (dd(0, 1) + c0 * (x[0] - x[1]), dd(n - 2, n - 1) + cn * (x[n - 1] - x[n - 2]))
        } else {
            (dd(0, 1), dd(0, 1))
        };
        Self::clamped(x, y, s0, sn)
    }

    pub fn clamped(x: &[f64], y: &[f64], s0: f64, sn: f64) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        diag[0] = 2.0 * h[0];
        sup[0] = h[0];
        rhs[0] = 6.0 * ((y[1] - y[0]) / h[0] - s0);
        for i in 1..n - 1 {
            sub[i] = h[i - 1];
            diag[i] = 2.0 * (h[i - 1] + h[i]);
            sup[i] = h[i];
            rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        sub[n - 1] = h[n - 2];
        diag[n - 1] = 2.0 * h[n - 2];
        rhs[n - 1] = 6.0 * (sn - (y[n - 1] - y[n - 2]) / h[n - 2]);
        for i in 1..n {
            let w = sub[i] / diag[i - 1];
            diag[i] -= w * sup[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        let mut m = vec![0.0; n];
        m[n - 1] = rhs[n - 1] / diag[n - 1];
        for i in (0..n - 1).rev() {
            m[i] = (rhs[i] - sup[i] * m[i + 1]) / diag[i];
        }
        Self { x: x.to_vec(), y: y.to_vec(), m }
    }

    /// Value and first two derivatives at `t` (clamped to the knot span).
    pub fn eval(&self, t: f64) -> [f64; 3] {
        let n = self.x.len();
        let i = self.x.partition_point(|&k| k <= t).clamp(1, n - 1) - 1;
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        let (mi, mj) = (self.m[i], self.m[i + 1]);
        let (yi, yj) = (self.y[i], self.y[i + 1]);
        let v = a * yi + b * yj + ((a * a * a - a) * mi + (b * b * b - b) * mj) * h * h / 6.0;
        let d = (yj - yi) / h - (3.0 * a * a - 1.0) / 6.0 * h * mi + (3.0 * b * b - 1.0) / 6.0 * h * mj;
        [v, d, a * mi + b * mj]
    }
}

/// Z-Y-X Euler angles `(roll, pitch, yaw)` of a quaternion.
pub fn euler_zyx(q: &Quatd) -> Vector3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
    let pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0).asin();
    let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
    Vector3::new(roll, pitch, yaw)
}

pub fn quat_from_euler(e: &Vector3<f64>) -> Quatd {
    let qx = Quatd::from_axis_angle(&Vector3::x(), e.x);
    let qy = Quatd::from_axis_angle(&Vector3::y(), e.y);
    let qz = Quatd::from_axis_angle(&Vector3::z(), e.z);
    (qz * qy * qx).normalized()
}

/// Ground-truth motion at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub pose: Posed,
    /// world frame, m/s
    pub velocity: Vector3<f64>,
    /// world frame, m/s²
    pub acceleration: Vector3<f64>,
    /// body frame, rad/s
    pub omega: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    control: Vec<(f64, Posed)>,
    pos: [CubicSpline; 3],
    euler: [CubicSpline; 3],
}

impl TrajectorySpec {
    pub fn new(control: Vec<(f64, Posed)>) -> Result<Self, SimError> {
        if control.len() < 2 {
            return Err(SimError::Trajectory(format!("need at least 2 control poses, got {}", control.len())));
        }
        if let Some(k) = control.windows(2).position(|w| !(w[1].0 > w[0].0)) {
            return Err(SimError::Trajectory(format!("control times not strictly increasing at index {}", k + 1)));
        }
        let t: Vec<f64> = control.iter().map(|c| c.0).collect();
        let mut angles: Vec<Vector3<f64>> = Vec::with_capacity(control.len());
        for (_, p) in &control {
            let mut e = euler_zyx(&p.rotation);
            if let Some(prev) = angles.last() {
                for k in [0, 2] {
                    e[k] += ((prev[k] - e[k]) / std::f64::consts::TAU).round() * std::f64::consts::TAU;
                }
            }
            angles.push(e);
        }
        let axis = |f: &dyn Fn(usize) -> f64| CubicSpline::new(&t, &(0..t.len()).map(f).collect::<Vec<_>>());
        let pos = [0, 1, 2].map(|k| axis(&|i| control[i].1.translation[k]));
        let euler = [0, 1, 2].map(|k| axis(&|i| angles[i][k]));
        Ok(Self { control, pos, euler })
    }

    /// Constant pose over `[t0, t1]`.
    pub fn stationary(pose: Posed, t0: f64, t1: f64) -> Result<Self, SimError> {
        Self::new(vec![(t0, pose), (t1, pose)])
    }

    /// Control poses sampled from `f` every `dt` over `[t0, t1]`.
    pub fn sampled(f: impl Fn(f64) -> Posed, t0: f64, t1: f64, dt: f64) -> Result<Self, SimError> {
        let n = ((t1 - t0) / dt).ceil().max(1.0) as usize;
        Self::new((0..=n).map(|i| t0 + (t1 - t0) * i as f64 / n as f64).map(|t| (t, f(t))).collect())
    }

    pub fn control(&self) -> &[(f64, Posed)] {
        &self.control
    }

    pub fn span(&self) -> (f64, f64) {
        (self.control[0].0, self.control[self.control.len() - 1].0)
    }

    pub fn contains(&self, t: f64) -> bool {
        let (a, b) = self.span();
        t >= a - 1e-12 && t <= b + 1e-12
    }

    fn check(&self, t: f64) -> Result<(), SimError> {
        if self.contains(t) {
            Ok(())
        } else {
            let (start, end) = self.span();
            Err(SimError::OutOfSpan { t, start, end })
        }
    }

    pub fn pose(&self, t: f64) -> Result<Posed, SimError> {
        self.check(t)?;
        let p = Vector3::from_fn(|k, _| self.pos[k].eval(t)[0]);
        let e = Vector3::from_fn(|k, _| self.euler[k].eval(t)[0]);
        Ok(Posed::new(quat_from_euler(&e), p))
    }

    pub fn kinematics(&self, t: f64) -> Result<Kinematics, SimError> {
        self.check(t)?;
        let p = self.pos.each_ref().map(|s| s.eval(t));
        let e = self.euler.each_ref().map(|s| s.eval(t));
        let (roll, pitch, yaw) = (e[0][0], e[1][0], e[2][0]);
        let (dr, dp, dy) = (e[0][1], e[1][1], e[2][1]);
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let omega = Vector3::new(dr - dy * sp, dp * cr + dy * cp * sr, -dp * sr + dy * cp * cr);
        Ok(Kinematics {
            pose: Posed::new(quat_from_euler(&Vector3::new(roll, pitch, yaw)), Vector3::new(p[0][0], p[1][0], p[2][0])),
            velocity: Vector3::new(p[0][1], p[1][1], p[2][1]),
            acceleration: Vector3::new(p[0][2], p[1][2], p[2][2]),
            omega,
        })
    }

    /// Full navigation state with the given biases.
    pub fn state(&self, t: f64, ba: Vector3<f64>, bg: Vector3<f64>) -> Result<NavStated, SimError> {
        let k = self.kinematics(t)?;
        Ok(NavStated { p: k.pose.translation, q: k.pose.rotation, v: k.velocity, ba, bg })
    }

    /// Body trajectory composed with a fixed sensor mount (`sensor → body`).
    pub fn sensor_pose(&self, t: f64, mount: &Posed) -> Result<Posed, SimError> {
        Ok(self.pose(t)?.compose(mount))
    }
}
