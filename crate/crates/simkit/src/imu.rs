//! IMU synthesis from analytic trajectory derivatives.

use mlio_core::imu::{Bias, ImuNoise};
use mlio_core::types::ImuSample;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::trajectory::TrajectorySpec;
use crate::SimError;

pub const MIN_IMU_RATE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSpec {
    /// Hz
    pub rate: f64,
    pub bias: Bias,
    /// `None` for noise-free samples.
    pub noise: Option<ImuNoise>,
    pub gravity: Vector3<f64>,
    pub seed: u64,
}

impl Default for ImuSpec {
    fn default() -> Self {
        Self {
            rate: 200.0,
            bias: Bias::default(),
            noise: None,
            gravity: Vector3::new(0.0, 0.0, -9.81),
            seed: 0,
        }
    }
}

/// Samples `ω̃ = ω + b_g + n_g` and `ã = Rᵀ(a − g) + b_a + n_a` at
/// `t0 + k/rate` over the trajectory span. Noise densities are converted to
/// per-sample standard deviations by `√rate`.
pub fn simulate_imu(traj: &TrajectorySpec, spec: &ImuSpec) -> Result<Vec<ImuSample>, SimError> {
    if !(spec.rate >= MIN_IMU_RATE) {
        return Err(SimError::Config(format!("IMU rate {} Hz below {} Hz", spec.rate, MIN_IMU_RATE)));
    }
    let (t0, t1) = traj.span();
    let n = ((t1 - t0) * spec.rate + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |sigma: f64| -> Vector3<f64> {
        if sigma > 0.0 {
            Vector3::from_fn(|_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            })
        } else {
            Vector3::zeros()
        }
    };
    let (sg, sa) = spec
        .noise
        .map(|n| (n.gyro_density * spec.rate.sqrt(), n.accel_density * spec.rate.sqrt()))
        .unwrap_or((0.0, 0.0));
    (0..=n)
        .map(|k| {
            let t = t0 + k as f64 / spec.rate;
            let kin = traj.kinematics(t)?;
            let gyro = kin.omega + spec.bias.gyro + draw(sg);
            let f = kin.pose.rotation.inverse().rotate(&(kin.acceleration - spec.gravity));
            let accel = f + spec.bias.accel + draw(sa);
            Ok(ImuSample::new(t, gyro, accel))
        })
        .collect()
}
