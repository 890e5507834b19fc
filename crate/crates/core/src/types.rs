//! Sensor data records shared by every stage.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// LiDAR modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Spinning,
    SolidState,
}

/// LiDAR intrinsics as recorded in a dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub kind: SensorKind,
    /// degrees
    pub h_fov: f64,
    /// degrees
    pub v_fov: f64,
    pub channels_or_lines: usize,
    /// Hz
    pub rate: f64,
    pub points_per_sweep: usize,
    /// m
    pub range_max: f64,
    /// m
    pub range_noise_sigma: f64,
    pub pattern_seed: u64,
}

impl SensorModel {
    pub fn period(&self) -> f64 {
        1.0 / self.rate
    }
}

/// One LiDAR return: emission time, sensor-frame coordinates and ring/line id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPoint {
    pub t: f64,
    pub xyz: [f32; 3],
    pub ring: u8,
}

impl TimedPoint {
    pub fn new(t: f64, p: &Vector3<f64>, ring: u8) -> Self {
        Self { t, xyz: [p.x as f32, p.y as f32, p.z as f32], ring }
    }

    pub fn pos(&self) -> Vector3<f64> {
        Vector3::new(self.xyz[0] as f64, self.xyz[1] as f64, self.xyz[2] as f64)
    }

    /// Range from the sensor origin.
    pub fn depth(&self) -> f64 {
        self.pos().norm()
    }
}

/// A LiDAR sweep covering `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scan {
    pub t_start: f64,
    pub t_end: f64,
    pub points: Vec<TimedPoint>,
}

impl Scan {
    pub fn new(t_start: f64, t_end: f64, points: Vec<TimedPoint>) -> Self {
        Self { t_start, t_end, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(TimedPoint::pos).collect()
    }
}

/// Unordered point set in one frame.
pub type PointCloud = Vec<Vector3<f64>>;

/// IMU reading: gyro in rad/s, specific force in m/s².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { t, gyro, accel }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.gyro.iter().all(|v| v.is_finite())
            && self.accel.iter().all(|v| v.is_finite())
    }

    /// Linear interpolation between two samples at time `t`.
    pub fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let s = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        Self {
            t,
            gyro: a.gyro + (b.gyro - a.gyro) * s,
            accel: a.accel + (b.accel - a.accel) * s,
        }
    }
}

/// Samples covering exactly `[t0, t1]`, with endpoints linearly interpolated.
///
/// Returns `None` when the series does not span the interval.
pub fn imu_window(series: &[ImuSample], t0: f64, t1: f64) -> Option<Vec<ImuSample>> {
    if series.len() < 2 || t1 <= t0 {
        return None;
    }
    if series[0].t > t0 + 1e-9 || series[series.len() - 1].t < t1 - 1e-9 {
        return None;
    }
    let sample_at = |t: f64| -> ImuSample {
        let i = series.partition_point(|s| s.t <= t);
        if i == 0 {
            return ImuSample { t, ..series[0] };
        }
        if i >= series.len() {
            return ImuSample { t, ..series[series.len() - 1] };
        }
        ImuSample::lerp(&series[i - 1], &series[i], t)
    };
    let mut out = vec![sample_at(t0)];
    let first = series.partition_point(|s| s.t <= t0 + 1e-9);
    for s in &series[first..] {
        if s.t >= t1 - 1e-9 {
            break;
        }
        out.push(*s);
    }
    out.push(sample_at(t1));
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imu_window_interpolates_endpoints() {
        let series: Vec<_> = (0..=10)
            .map(|i| {
                let t = i as f64 * 0.1;
                ImuSample::new(t, Vector3::new(t, 0.0, 0.0), Vector3::zeros())
            })
            .collect();
        let w = imu_window(&series, 0.05, 0.32).unwrap();
        assert_eq!(w.first().unwrap().t, 0.05);
        assert_eq!(w.last().unwrap().t, 0.32);
        assert!((w[0].gyro.x - 0.05).abs() < 1e-12);
        assert!((w.last().unwrap().gyro.x - 0.32).abs() < 1e-12);
        assert_eq!(w.len(), 5);
        assert!(w.windows(2).all(|p| p[1].t > p[0].t));
        assert!(imu_window(&series, -0.1, 0.5).is_none());
    }
}
