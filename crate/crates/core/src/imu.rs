//! IMU preintegration between keyframes, state prediction and per-point
//! scan undistortion.
//!
//! Deltas are gravity-free and expressed in the body frame at the start of
//! the interval; gravity is reintroduced by [`predict_state`] and by the
//! inertial residual.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{right_jacobian, skew, NavState, Pose, Quaternion};
use crate::types::{ImuSample, Scan, TimedPoint};

type Quat = Quaternion<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum ImuError {
    #[error("preintegration needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("IMU timestamps not strictly increasing at sample {index} (t = {t})")]
    NonMonotonic { index: usize, t: f64 },
    #[error("point {index} at t = {t} lies outside the motion interval [{start}, {end}]")]
    PointOutsideInterval { index: usize, t: f64, start: f64, end: f64 },
}

/// Continuous-time noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    /// rad/s/√Hz
    pub gyro_density: f64,
    /// m/s²/√Hz
    pub accel_density: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self { gyro_density: 1e-3, accel_density: 1e-2, gyro_bias_walk: 1e-5, accel_bias_walk: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Bias {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl Bias {
    pub fn new(accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self { accel, gyro }
    }

    pub fn of(state: &NavState<f64>) -> Self {
        Self { accel: state.ba, gyro: state.bg }
    }
}

/// Relative motion summary between two timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedImu {
    pub t_start: f64,
    pub t_end: f64,
    pub dt_total: f64,
    pub delta_p: Vector3<f64>,
    pub delta_v: Vector3<f64>,
    pub delta_q: Quat,
    pub bias_lin: Bias,
    pub jp_ba: Matrix3<f64>,
    pub jp_bg: Matrix3<f64>,
    pub jv_ba: Matrix3<f64>,
    pub jv_bg: Matrix3<f64>,
    pub jq_bg: Matrix3<f64>,
    /// Covariance of `[δθ, δv, δp]`.
    pub covariance: SMatrix<f64, 9, 9>,
    pub noise: ImuNoise,
}

/// Incremental midpoint preintegrator.
#[derive(Debug, Clone)]
pub struct Preintegrator {
    pre: PreintegratedImu,
    last: Option<ImuSample>,
    count: usize,
}

impl Preintegrator {
    pub fn new(bias: Bias, noise: ImuNoise) -> Self {
        Self {
            pre: PreintegratedImu {
                t_start: f64::NAN,
                t_end: f64::NAN,
                dt_total: 0.0,
                delta_p: Vector3::zeros(),
                delta_v: Vector3::zeros(),
                delta_q: Quat::identity(),
                bias_lin: bias,
                jp_ba: Matrix3::zeros(),
                jp_bg: Matrix3::zeros(),
                jv_ba: Matrix3::zeros(),
                jv_bg: Matrix3::zeros(),
                jq_bg: Matrix3::zeros(),
                covariance: SMatrix::zeros(),
                noise,
            },
            last: None,
            count: 0,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, s: &ImuSample) -> Result<(), ImuError> {
        let Some(prev) = self.last else {
            self.pre.t_start = s.t;
            self.pre.t_end = s.t;
            self.last = Some(*s);
            self.count = 1;
            return Ok(());
        };
        let dt = s.t - prev.t;
        if !(dt > 0.0) {
            return Err(ImuError::NonMonotonic { index: self.count, t: s.t });
        }
        self.step(&prev, s, dt);
        self.last = Some(*s);
        self.count += 1;
        Ok(())
    }

    fn step(&mut self, s0: &ImuSample, s1: &ImuSample, dt: f64) {
        let p = &mut self.pre;
        let ba = p.bias_lin.accel;
        let bg = p.bias_lin.gyro;

        let r0 = p.delta_q.to_matrix();
        let omega = (s0.gyro + s1.gyro) * 0.5 - bg;
        let phi = omega * dt;
        let dq = Quat::exp(&phi);
        let q1 = (p.delta_q * dq).normalized();
        let r1 = q1.to_matrix();
        let dr = dq.to_matrix();
        let jr = right_jacobian(&phi);

        let a0 = s0.accel - ba;
        let a1 = s1.accel - ba;
        let ua = (r0 * a0 + r1 * a1) * 0.5;

        // first-order bias Jacobians of the discrete update
        let jq_new = dr.transpose() * p.jq_bg - jr * dt;
        let dua_dba = -(r0 + r1) * 0.5;
        let dua_dbg = -(r0 * skew(&a0) * p.jq_bg + r1 * skew(&a1) * jq_new) * 0.5;
        p.jp_ba += p.jv_ba * dt + dua_dba * (0.5 * dt * dt);
        p.jp_bg += p.jv_bg * dt + dua_dbg * (0.5 * dt * dt);
        p.jv_ba += dua_dba * dt;
        p.jv_bg += dua_dbg * dt;
        p.jq_bg = jq_new;

        // covariance of [θ, v, p]
        let dua_dth = -(r0 * skew(&a0) + r1 * skew(&a1) * dr.transpose()) * 0.5;
        let mut f = SMatrix::<f64, 9, 9>::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&dr.transpose());
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dua_dth * dt));
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(dua_dth * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
        let mut g = SMatrix::<f64, 9, 6>::zeros();
        let dua_dng = r1 * skew(&a1) * jr * (0.5 * dt);
        let dua_dna = -(r0 + r1) * 0.5;
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr * dt));
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dua_dng * dt));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(dua_dna * dt));
        g.fixed_view_mut::<3, 3>(6, 0).copy_from(&(dua_dng * (0.5 * dt * dt)));
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(dua_dna * (0.5 * dt * dt)));
        let vg = p.noise.gyro_density.powi(2) / dt;
        let va = p.noise.accel_density.powi(2) / dt;
        let q = SMatrix::<f64, 6, 6>::from_diagonal(&nalgebra::SVector::<f64, 6>::from_column_slice(&[
            vg, vg, vg, va, va, va,
        ]));
        p.covariance = f * p.covariance * f.transpose() + g * q * g.transpose();
        p.covariance = (p.covariance + p.covariance.transpose()) * 0.5;

        p.delta_p += p.delta_v * dt + ua * (0.5 * dt * dt);
        p.delta_v += ua * dt;
        p.delta_q = q1;
        p.dt_total += dt;
        p.t_end = s1.t;
    }

    pub fn result(&self) -> Result<PreintegratedImu, ImuError> {
        if self.count < 2 {
            return Err(ImuError::TooFewSamples(self.count));
        }
        Ok(self.pre.clone())
    }

    /// Current deltas even with fewer than two samples (identity if empty).
    pub fn current(&self) -> &PreintegratedImu {
        &self.pre
    }
}

/// Integrates `samples` (spanning `[t_k, t_{k+1}]`) at linearization bias `bias`.
pub fn preintegrate(
    samples: &[ImuSample],
    bias: &Bias,
    noise: &ImuNoise,
) -> Result<PreintegratedImu, ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::TooFewSamples(samples.len()));
    }
    let mut pi = Preintegrator::new(*bias, *noise);
    for s in samples {
        pi.push(s)?;
    }
    pi.result()
}

impl PreintegratedImu {
    /// Identity deltas over `[t0, t1]` (no samples integrated).
    pub fn identity(t0: f64, t1: f64) -> Self {
        let mut p = Preintegrator::new(Bias::default(), ImuNoise::default()).pre;
        p.t_start = t0;
        p.t_end = t1;
        p.dt_total = t1 - t0;
        p
    }

    /// Deltas re-expressed at a new bias through the first-order Jacobians.
    pub fn corrected(&self, bias: &Bias) -> (Quat, Vector3<f64>, Vector3<f64>) {
        let dba = bias.accel - self.bias_lin.accel;
        let dbg = bias.gyro - self.bias_lin.gyro;
        let dq = self.delta_q.boxplus(&(self.jq_bg * dbg));
        let dv = self.delta_v + self.jv_ba * dba + self.jv_bg * dbg;
        let dp = self.delta_p + self.jp_ba * dba + self.jp_bg * dbg;
        (dq, dv, dp)
    }
}

/// Initial guess for the next keyframe state from the previous optimized one.
///
/// Biases are carried forward; the deltas are first-order corrected to the
/// previous state's biases when they differ from the linearization bias.
pub fn predict_state(prev: &NavState<f64>, delta: &PreintegratedImu, g: &Vector3<f64>) -> NavState<f64> {
    let dt = delta.dt_total;
    let (dq, dv, dp) = delta.corrected(&Bias::of(prev));
    NavState {
        p: prev.p + prev.v * dt + g * (0.5 * dt * dt) + prev.q.rotate(&dp),
        v: prev.v + g * dt + prev.q.rotate(&dv),
        q: (prev.q * dq).normalized(),
        ba: prev.ba,
        bg: prev.bg,
    }
}

/// Sensor motion across one sweep, used for deskewing.
///
/// `rotation`/`translation` give the end-of-interval body frame expressed in
/// the start-of-interval body frame; `extrinsic` maps the LiDAR frame into
/// the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepMotion {
    pub t_start: f64,
    pub t_end: f64,
    pub rotation: Quat,
    pub translation: Vector3<f64>,
    pub extrinsic: Pose<f64>,
}

impl SweepMotion {
    pub fn identity(t_start: f64, t_end: f64) -> Self {
        Self {
            t_start,
            t_end,
            rotation: Quat::identity(),
            translation: Vector3::zeros(),
            extrinsic: Pose::identity(),
        }
    }

    /// Motion equal to the raw preintegrated deltas (no velocity, no gravity).
    pub fn from_deltas(delta: &PreintegratedImu) -> Self {
        Self {
            t_start: delta.t_start,
            t_end: delta.t_end,
            rotation: delta.delta_q,
            translation: delta.delta_p,
            extrinsic: Pose::identity(),
        }
    }

    /// Full relative motion given the body state at the end of the interval.
    ///
    /// The start-of-interval rotation and velocity are recovered from the end
    /// state and the deltas, then `v·dt + ½g·dt²` is added to `ΔP`.
    pub fn from_end_state(delta: &PreintegratedImu, end: &NavState<f64>, g: &Vector3<f64>) -> Self {
        let dt = delta.dt_total;
        let (dq, dv, dp) = delta.corrected(&Bias::of(end));
        let q_start = (end.q * dq.inverse()).normalized();
        let v_start = end.v - g * dt - q_start.rotate(&dv);
        let world_disp = v_start * dt + g * (0.5 * dt * dt);
        Self {
            t_start: delta.t_start,
            t_end: delta.t_end,
            rotation: dq,
            translation: q_start.inverse().rotate(&world_disp) + dp,
            extrinsic: Pose::identity(),
        }
    }

    pub fn with_extrinsic(mut self, extrinsic: Pose<f64>) -> Self {
        self.extrinsic = extrinsic;
        self
    }

    /// Body pose at fraction `s` of the interval, relative to the start.
    pub fn at(&self, s: f64) -> Pose<f64> {
        Pose::new(Quat::identity().slerp(&self.rotation, s), self.translation * s)
    }
}

/// Maps every point into the sensor frame at the end of the motion interval.
///
/// Points are interpolated by `s = (t - t_start) / (t_end - t_start)`;
/// timestamps are preserved.
pub fn undistort_scan(scan: &Scan, motion: &SweepMotion) -> Result<Scan, ImuError> {
    const SLACK: f64 = 1e-3;
    let span = motion.t_end - motion.t_start;
    let end = Pose::new(motion.rotation, motion.translation);
    let end_inv = end.inverse();
    let ext = motion.extrinsic;
    let ext_inv = ext.inverse();
    let mut points = Vec::with_capacity(scan.points.len());
    for (index, pt) in scan.points.iter().enumerate() {
        if pt.t < motion.t_start - SLACK || pt.t > motion.t_end + SLACK {
            return Err(ImuError::PointOutsideInterval {
                index,
                t: pt.t,
                start: motion.t_start,
                end: motion.t_end,
            });
        }
        let s = if span > 0.0 { ((pt.t - motion.t_start) / span).clamp(0.0, 1.0) } else { 1.0 };
        let to_end = ext_inv.compose(&end_inv.compose(&motion.at(s).compose(&ext)));
        points.push(TimedPoint::new(pt.t, &to_end.apply(&pt.pos()), pt.ring));
    }
    Ok(Scan::new(scan.t_start, scan.t_end, points))
}

/// Gravity-aligned attitude (zero yaw) from a mean specific-force reading.
pub fn gravity_aligned_attitude(mean_accel: &Vector3<f64>) -> Quat {
    let up = mean_accel.normalize();
    let z = Vector3::z();
    let axis = up.cross(&z);
    let s = axis.norm();
    let c = up.dot(&z);
    if s < 1e-12 {
        return if c > 0.0 { Quat::identity() } else { Quat::from_axis_angle(&Vector3::x(), std::f64::consts::PI) };
    }
    Quat::from_axis_angle(&axis, s.atan2(c))
}
