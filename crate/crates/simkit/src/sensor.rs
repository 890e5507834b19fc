//! LiDAR sensor presets and sweep simulation.

use mlio_core::types::{Scan, SensorKind, SensorModel, TimedPoint};
use mlio_core::Posed;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::trajectory::TrajectorySpec;
use crate::world::World;
use crate::SimError;

/// 16-channel spinning sensor: 360° × 30°, 10 Hz, 900 columns.
pub fn spinning_model() -> SensorModel {
    SensorModel {
        kind: SensorKind::Spinning,
        h_fov: 360.0,
        v_fov: 30.0,
        channels_or_lines: 16,
        rate: 10.0,
        points_per_sweep: 14_400,
        range_max: 100.0,
        range_noise_sigma: 0.02,
        pattern_seed: 0,
    }
}

/// Six-line rosette solid-state sensor: 81.7° × 25.1°, 10 Hz.
pub fn solid_state_model() -> SensorModel {
    SensorModel {
        kind: SensorKind::SolidState,
        h_fov: 81.7,
        v_fov: 25.1,
        channels_or_lines: 6,
        rate: 10.0,
        points_per_sweep: 10_002,
        range_max: 100.0,
        range_noise_sigma: 0.02,
        pattern_seed: 1,
    }
}

/// Rosette angular frequencies, rad/s. The ratio is irrational so the
/// pattern never repeats.
const ROSETTE_W1: f64 = std::f64::consts::TAU * 17.0;
const ROSETTE_W2: f64 = std::f64::consts::TAU * 17.0 * 0.618_033_988_749_894_9;

/// One emitted ray in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub t: f64,
    pub dir: Vector3<f64>,
    pub ring: u8,
}

fn direction(az: f64, el: f64) -> Vector3<f64> {
    let (se, ce) = el.sin_cos();
    let (sa, ca) = az.sin_cos();
    Vector3::new(ce * ca, ce * sa, se)
}

fn seed_phase(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5eed);
    rand::Rng::gen_range(&mut rng, 0.0..std::f64::consts::TAU)
}

/// Emission schedule of one sweep, ordered by time. All timestamps lie
/// strictly inside `[sweep_start, sweep_start + 1/rate)`.
pub fn ray_pattern(model: &SensorModel, sweep_start: f64) -> Vec<Ray> {
    let period = model.period();
    let channels = model.channels_or_lines.max(1);
    match model.kind {
        SensorKind::Spinning => {
            let cols = (model.points_per_sweep / channels).max(1);
            let half_v = model.v_fov.to_radians() / 2.0;
            let step = if channels > 1 { 2.0 * half_v / (channels - 1) as f64 } else { 0.0 };
            let full = model.h_fov >= 360.0;
            let h = model.h_fov.to_radians();
            (0..cols)
                .flat_map(|j| {
                    let frac = (j as f64 + 0.5) / cols as f64;
                    let t = sweep_start + frac * period;
                    let az = if full { std::f64::consts::TAU * frac } else { -h / 2.0 + h * frac };
                    (0..channels).map(move |c| Ray { t, dir: direction(az, -half_v + step * c as f64), ring: c as u8 })
                })
                .collect()
        }
        SensorKind::SolidState => {
            let n = model.points_per_sweep;
            let half_h = model.h_fov.to_radians() / 2.0;
            let half_v = model.v_fov.to_radians() / 2.0;
            let phase = seed_phase(model.pattern_seed);
            (0..n)
                .map(|j| {
                    let t = sweep_start + (j as f64 + 0.5) / n as f64 * period;
                    let line = j % channels;
                    let psi = phase + std::f64::consts::TAU * line as f64 / channels as f64;
                    let (a, b) = (ROSETTE_W1 * t + psi, ROSETTE_W2 * t - psi);
                    let u = 0.5 * (a.cos() + b.cos());
                    let v = 0.5 * (a.sin() - b.sin());
                    Ray { t, dir: direction(u * half_h, v * half_v), ring: line as u8 }
                })
                .collect()
        }
    }
}

fn sweep_seed(model: &SensorModel, sweep_start: f64) -> u64 {
    let kind = match model.kind {
        SensorKind::Spinning => 0x9e37_79b9_7f4a_7c15u64,
        SensorKind::SolidState => 0xc2b2_ae3d_27d4_eb4fu64,
    };
    model.pattern_seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ kind ^ sweep_start.to_bits().rotate_left(17)
}

/// Simulated sweep plus the index of the patch behind every returned point.
pub fn simulate_scan_labeled(
    world: &World,
    model: &SensorModel,
    traj: &TrajectorySpec,
    mount: &Posed,
    sweep_start: f64,
) -> Result<(Scan, Vec<usize>), SimError> {
    let period = model.period();
    let sweep_end = sweep_start + period;
    if !traj.contains(sweep_start) || !traj.contains(sweep_end) {
        let (start, end) = traj.span();
        return Err(SimError::OutOfSpan { t: if traj.contains(sweep_start) { sweep_end } else { sweep_start }, start, end });
    }
    let rays = ray_pattern(model, sweep_start);
    let mut rng = ChaCha8Rng::seed_from_u64(sweep_seed(model, sweep_start));
    let noise: Vec<f64> = if model.range_noise_sigma > 0.0 {
        let d = Normal::new(0.0, model.range_noise_sigma).map_err(|e| SimError::Config(e.to_string()))?;
        (0..rays.len()).map(|_| d.sample(&mut rng)).collect()
    } else {
        vec![0.0; rays.len()]
    };
    let hits: Vec<Option<(TimedPoint, usize)>> = rays
        .par_iter()
        .zip(noise.par_iter())
        .with_min_len(256)
        .map(|(ray, n)| {
            let pose = traj.sensor_pose(ray.t, mount).ok()?;
            let dir_w = pose.rotation.rotate(&ray.dir);
            let (range, patch) = world.cast(&pose.translation, &dir_w, model.range_max)?;
            Some((TimedPoint::new(ray.t, &(ray.dir * (range + n)), ray.ring), patch))
        })
        .collect();
    let (points, patches) = hits.into_iter().flatten().unzip();
    Ok((Scan::new(sweep_start, sweep_end, points), patches))
}

/// Simulated sweep starting at `sweep_start`. Every point is expressed in
/// the sensor frame at its own emission time, so motion distortion is
/// present. Misses are omitted.
pub fn simulate_scan(
    world: &World,
    model: &SensorModel,
    traj: &TrajectorySpec,
    sweep_start: f64,
) -> Result<Scan, SimError> {
    simulate_scan_labeled(world, model, traj, &Posed::identity(), sweep_start).map(|(s, _)| s)
}

/// Same as [`simulate_scan`] for a sensor mounted on the trajectory body
/// (`mount` maps sensor coordinates into the body frame).
pub fn simulate_scan_mounted(
    world: &World,
    model: &SensorModel,
    traj: &TrajectorySpec,
    mount: &Posed,
    sweep_start: f64,
) -> Result<Scan, SimError> {
    simulate_scan_labeled(world, model, traj, mount, sweep_start).map(|(s, _)| s)
}
