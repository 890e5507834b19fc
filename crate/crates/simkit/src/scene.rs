//! Scene presets: world geometry, body trajectory, sensor rig and IMU.

use std::str::FromStr;
use std::sync::Arc;

use mlio_core::imu::{Bias, ImuNoise};
use mlio_core::types::{SensorKind, SensorModel};
use mlio_core::{Posed, Quatd};
use nalgebra::Vector3;

use crate::imu::ImuSpec;
use crate::sensor::{solid_state_model, spinning_model};
use crate::trajectory::{quat_from_euler, TrajectorySpec};
use crate::world::World;
use crate::SimError;

/// Start offset of solid-state sweeps relative to spinning sweeps, s.
pub const SOLID_STATE_OFFSET: f64 = 0.017;
/// Ground-truth sampling rate, Hz.
pub const GROUNDTRUTH_RATE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    Room,
    Office,
    Hall,
    Corridor,
    Static,
}

impl SceneKind {
    pub const ALL: [SceneKind; 5] = [Self::Room, Self::Office, Self::Hall, Self::Corridor, Self::Static];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Room => "room",
            Self::Office => "office",
            Self::Hall => "hall",
            Self::Corridor => "corridor",
            Self::Static => "static",
        }
    }
}

impl FromStr for SceneKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| SimError::Config(format!("unknown scene '{s}'")))
    }
}

/// Everything needed to synthesize a dataset.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub world: Arc<World>,
    pub trajectory: Arc<TrajectorySpec>,
    pub spinning: SensorModel,
    pub solid_state: SensorModel,
    /// Solid-state → IMU body.
    pub h_to_i: Posed,
    /// Spinning → solid-state.
    pub v_to_h: Posed,
    pub imu: ImuSpec,
    pub solid_offset: f64,
    /// Length of the stationary prefix, s.
    pub rest: f64,
}

pub fn default_h_to_i() -> Posed {
    Posed::new(Quatd::identity(), Vector3::new(0.12, 0.0, 0.05))
}

pub fn default_v_to_h() -> Posed {
    Posed::new(Quatd::from_yaw(5f64.to_radians()), Vector3::new(-0.15, 0.05, 0.12))
}

fn default_imu(seed: u64) -> ImuSpec {
    ImuSpec {
        rate: 200.0,
        bias: Bias::new(Vector3::new(0.02, -0.015, 0.01), Vector3::new(1e-3, -8e-4, 5e-4)),
        noise: Some(ImuNoise::default()),
        gravity: Vector3::new(0.0, 0.0, -9.81),
        seed,
    }
}

impl Scenario {
    fn base(name: &str, world: World, trajectory: TrajectorySpec, rest: f64) -> Self {
        Self {
            name: name.to_string(),
            world: Arc::new(world),
            trajectory: Arc::new(trajectory),
            spinning: spinning_model(),
            solid_state: solid_state_model(),
            h_to_i: default_h_to_i(),
            v_to_h: default_v_to_h(),
            imu: default_imu(0),
            solid_offset: SOLID_STATE_OFFSET,
            rest,
        }
    }

    pub fn preset(kind: SceneKind) -> Result<Self, SimError> {
        match kind {
            SceneKind::Room => room(),
            SceneKind::Office => office(),
            SceneKind::Hall => hall(),
            SceneKind::Corridor => corridor(),
            SceneKind::Static => static_scene(),
        }
    }

    /// Reseeds every random source (IMU noise, range noise, rosette phase).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.imu.seed = seed.wrapping_mul(3).wrapping_add(11);
        self.spinning.pattern_seed = seed.wrapping_mul(5).wrapping_add(1);
        self.solid_state.pattern_seed = seed.wrapping_mul(7).wrapping_add(2);
        self
    }

    pub fn with_range_noise(mut self, sigma: f64) -> Self {
        self.spinning.range_noise_sigma = sigma;
        self.solid_state.range_noise_sigma = sigma;
        self
    }

    /// Removes IMU noise and bias and LiDAR range noise.
    pub fn noiseless(mut self) -> Self {
        self.imu.noise = None;
        self.imu.bias = Bias::default();
        self.with_range_noise(0.0)
    }

    /// Keeps only the first `seconds` of the trajectory.
    pub fn truncated(mut self, seconds: f64) -> Result<Self, SimError> {
        let (t0, t1) = self.trajectory.span();
        let end = (t0 + seconds).min(t1);
        let ctrl: Vec<_> = self.trajectory.control().iter().copied().filter(|(t, _)| *t <= end).collect();
        let mut ctrl = ctrl;
        if ctrl.last().map_or(true, |c| c.0 < end) {
            ctrl.push((end, self.trajectory.pose(end)?));
        }
        self.trajectory = Arc::new(TrajectorySpec::new(ctrl)?);
        Ok(self)
    }

    pub fn v_to_i(&self) -> Posed {
        self.h_to_i.compose(&self.v_to_h)
    }

    pub fn model(&self, kind: SensorKind) -> &SensorModel {
        match kind {
            SensorKind::Spinning => &self.spinning,
            SensorKind::SolidState => &self.solid_state,
        }
    }

    /// Sensor → body transform.
    pub fn mount(&self, kind: SensorKind) -> Posed {
        match kind {
            SensorKind::Spinning => self.v_to_i(),
            SensorKind::SolidState => self.h_to_i,
        }
    }

    /// Start times of every complete sweep inside the trajectory span.
    pub fn sweep_starts(&self, kind: SensorKind) -> Vec<f64> {
        let (t0, t1) = self.trajectory.span();
        let period = self.model(kind).period();
        let offset = match kind {
            SensorKind::Spinning => 0.0,
            SensorKind::SolidState => self.solid_offset,
        };
        (0..)
            .map(|k| t0 + offset + k as f64 * period)
            .take_while(|s| s + period <= t1 + 1e-9)
            .collect()
    }

    /// Body poses at [`GROUNDTRUTH_RATE`].
    pub fn groundtruth(&self) -> Result<Vec<(f64, Posed)>, SimError> {
        let (t0, t1) = self.trajectory.span();
        let n = ((t1 - t0) * GROUNDTRUTH_RATE + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| {
                let t = t0 + k as f64 / GROUNDTRUTH_RATE;
                Ok((t, self.trajectory.pose(t)?))
            })
            .collect()
    }
}

fn smooth_ramp(t: f64, dur: f64) -> (f64, f64) {
    let x = (t / dur).clamp(0.0, 1.0);
    let s = dur * (x - (std::f64::consts::PI * x).sin() / std::f64::consts::PI) / 2.0;
    let v = (1.0 - (std::f64::consts::PI * x).cos()) / 2.0;
    (s, v)
}

/// Arc length and speed fraction for rest → ramp → cruise → ramp → rest.
fn speed_profile(length: f64, speed: f64, rest: f64, ramp: f64) -> (impl Fn(f64) -> (f64, f64), f64) {
    let cruise = (length - speed * ramp) / speed;
    let total = 2.0 * rest + 2.0 * ramp + cruise;
    let f = move |t: f64| {
        let t = t - rest;
        if t <= 0.0 {
            (0.0, 0.0)
        } else if t <= ramp {
            let (s, v) = smooth_ramp(t, ramp);
            (speed * s, v)
        } else if t <= ramp + cruise {
            (speed * (ramp / 2.0 + t - ramp), 1.0)
        } else {
            let (s, v) = smooth_ramp((2.0 * ramp + cruise - t).max(0.0), ramp);
            (length - speed * s, v)
        }
    };
    (f, total)
}

/// Counter-clockwise rounded rectangle centred at the origin, starting at
/// `(0, -hy)` heading +x.
#[derive(Debug, Clone, Copy)]
pub struct RoundedRect {
    pub hx: f64,
    pub hy: f64,
    pub r: f64,
}

impl RoundedRect {
    pub fn length(&self) -> f64 {
        4.0 * (self.hx + self.hy) - 8.0 * self.r + std::f64::consts::TAU * self.r
    }

    /// Position and heading at arc length `s`.
    pub fn at(&self, s: f64) -> (Vector3<f64>, f64) {
        let (hx, hy, r) = (self.hx, self.hy, self.r);
        let quarter = std::f64::consts::FRAC_PI_2 * r;
        let sides = [hx - r, 2.0 * (hy - r), 2.0 * (hx - r), 2.0 * (hy - r), hx - r];
        let starts = [(0.0, -hy), (hx, -hy + r), (hx - r, hy), (-hx, hy - r), (-hx + r, -hy)];
        let centres = [(hx - r, -hy + r), (hx - r, hy - r), (-hx + r, hy - r), (-hx + r, -hy + r)];
        let mut s = s.clamp(0.0, self.length());
        for k in 0..5 {
            let heading = std::f64::consts::FRAC_PI_2 * k as f64;
            if s <= sides[k] || k == 4 {
                let (x, y) = starts[k];
                return (Vector3::new(x + s * heading.cos(), y + s * heading.sin(), 0.0), heading);
            }
            s -= sides[k];
            if s <= quarter {
                let a = s / r;
                let (cx, cy) = centres[k];
                let phi = heading - std::f64::consts::FRAC_PI_2 + a;
                return (Vector3::new(cx + r * phi.cos(), cy + r * phi.sin(), 0.0), heading + a);
            }
            s -= quarter;
        }
        unreachable!()
    }
}

/// Drives a planar path with small attitude wobble proportional to speed.
fn driven_trajectory(
    path: impl Fn(f64) -> (Vector3<f64>, f64),
    length: f64,
    speed: f64,
    rest: f64,
    origin: Vector3<f64>,
) -> Result<TrajectorySpec, SimError> {
    let (profile, total) = speed_profile(length, speed, rest, 2.0);
    TrajectorySpec::sampled(
        |t| {
            let (s, frac) = profile(t);
            let (p, yaw) = path(s);
            let w = std::f64::consts::TAU;
            let roll = frac * 0.6f64.to_radians() * (w * 0.7 * t).sin();
            let pitch = frac * 0.5f64.to_radians() * (w * 0.45 * t + 1.0).sin();
            let dz = frac * 0.01 * (w * 1.1 * t).sin();
            Posed::new(quat_from_euler(&Vector3::new(roll, pitch, yaw)), origin + p + Vector3::new(0.0, 0.0, dz))
        },
        0.0,
        total,
        0.05,
    )
}

fn pillar(w: &mut World, x: f64, y: f64, half: f64, z0: f64, z1: f64) -> Result<(), SimError> {
    w.add_box(Vector3::new(x - half, y - half, z0), Vector3::new(x + half, y + half, z1)).map(|_| ())
}

/// Furnished 8 m × 6 m room for stationary calibration.
pub fn room_world() -> Result<World, SimError> {
    let mut w = World::new();
    let (z0, z1) = (-1.2, 1.8);
    w.add_room(Vector3::new(-4.0, -3.0, z0), Vector3::new(4.0, 3.0, z1))?;
    w.add_box(Vector3::new(2.4, -1.1, z0), Vector3::new(3.1, -0.2, 0.3))?;
    pillar(&mut w, 3.2, 1.2, 0.2, z0, z1)?;
    w.add_box(Vector3::new(1.6, 0.3, z0), Vector3::new(2.2, 0.9, -0.4))?;
    w.add_box(Vector3::new(-3.5, 1.8, z0), Vector3::new(-2.2, 2.9, 0.9))?;
    w.add_box(Vector3::new(-1.0, -2.8, z0), Vector3::new(0.6, -2.2, -0.45))?;
    w.add_wall([3.99, -2.5], [3.99, -1.5], -0.2, 0.8)?;
    w.add_box(Vector3::new(3.2, -3.0, 0.75), Vector3::new(4.0, 3.0, z1))?;
    w.add_box(Vector3::new(2.8, -3.0, z0), Vector3::new(4.0, -1.3, -0.55))?;
    Ok(w)
}

pub fn room() -> Result<Scenario, SimError> {
    let pose = Posed::new(Quatd::from_yaw(0.15), Vector3::new(-0.4, 0.2, 0.0));
    let traj = TrajectorySpec::stationary(pose, 0.0, 2.0)?;
    Ok(Scenario::base("room", room_world()?, traj, 2.0))
}

/// 12 m × 9 m office with desks, cabinets and a pillar.
pub fn office_world() -> Result<World, SimError> {
    let mut w = World::new();
    let (z0, z1) = (-1.0, 2.0);
    w.add_room(Vector3::new(-6.0, -4.5, z0), Vector3::new(6.0, 4.5, z1))?;
    pillar(&mut w, 0.0, 0.0, 0.3, z0, z1)?;
    for (x, y) in [(-1.8, -0.6), (1.8, 0.6), (-1.8, 0.9)] {
        w.add_box(Vector3::new(x - 0.7, y - 0.35, z0), Vector3::new(x + 0.7, y + 0.35, -0.25))?;
    }
    for (x, y) in [(-5.5, -3.0), (-5.5, 2.8), (5.4, -1.5), (2.0, 4.1), (-2.5, -4.1)] {
        w.add_box(Vector3::new(x - 0.4, y - 0.3, z0), Vector3::new(x + 0.4, y + 0.3, 1.0))?;
    }
    for x in [-4.0, 0.0, 4.0] {
        w.add_box(Vector3::new(x - 0.25, -4.5, z0), Vector3::new(x + 0.25, -4.25, z1))?;
        w.add_box(Vector3::new(x - 0.25, 4.25, z0), Vector3::new(x + 0.25, 4.5, z1))?;
    }
    w.add_box(Vector3::new(-6.0, -0.3, 1.6), Vector3::new(6.0, 0.3, z1))?;
    Ok(w)
}

pub fn office() -> Result<Scenario, SimError> {
    let path = RoundedRect { hx: 3.2, hy: 2.4, r: 1.0 };
    let traj = driven_trajectory(|s| path.at(s), path.length(), 0.8, 1.0, Vector3::zeros())?;
    Ok(Scenario::base("office", office_world()?, traj, 1.0))
}

pub fn static_scene() -> Result<Scenario, SimError> {
    let pose = Posed::new(Quatd::from_yaw(-0.4), Vector3::new(1.0, -2.0, 0.0));
    let traj = TrajectorySpec::stationary(pose, 0.0, 8.0)?;
    Ok(Scenario::base("static", office_world()?, traj, 8.0))
}

/// 33 m × 23 m hall with pillars and wall pilasters around an ~80 m loop.
pub fn hall_world() -> Result<World, SimError> {
    let mut w = World::new();
    let (z0, z1) = (-1.0, 5.0);
    let (hx, hy) = (16.5, 11.5);
    w.add_room(Vector3::new(-hx, -hy, z0), Vector3::new(hx, hy, z1))?;
    for x in [-9.0, -3.0, 3.0, 9.0] {
        for y in [-3.0, 3.0] {
            pillar(&mut w, x, y, 0.3, z0, z1)?;
        }
    }
    for x in [-12.0, -6.0, 0.0, 6.0, 12.0] {
        pillar(&mut w, x + 0.7, 10.0, 0.3, z0, z1)?;
        pillar(&mut w, x - 0.7, -10.0, 0.3, z0, z1)?;
    }
    for y in [-5.0, 0.0, 5.0] {
        pillar(&mut w, 15.0, y + 0.4, 0.3, z0, z1)?;
        pillar(&mut w, -15.0, y - 0.4, 0.3, z0, z1)?;
    }
    let mut x = -14.0;
    while x < 15.0 {
        w.add_box(Vector3::new(x - 0.25, -hy, z0), Vector3::new(x + 0.25, -hy + 0.3, z1))?;
        w.add_box(Vector3::new(x + 1.25, hy - 0.3, z0), Vector3::new(x + 1.75, hy, z1))?;
        x += 5.0;
    }
    let mut y = -9.0;
    while y < 10.0 {
        w.add_box(Vector3::new(-hx, y - 0.25, z0), Vector3::new(-hx + 0.3, y + 0.25, z1))?;
        w.add_box(Vector3::new(hx - 0.3, y + 0.75, z0), Vector3::new(hx, y + 1.25, z1))?;
        y += 4.5;
    }
    for (x, y, sx, sy, h) in [
        (-6.0, 8.6, 1.2, 0.8, 0.9),
        (7.5, -8.8, 0.8, 0.8, 1.4),
        (13.8, 3.0, 0.7, 1.5, 0.6),
        (-13.9, -7.0, 0.8, 1.0, 1.2),
        (0.0, 0.0, 2.0, 1.0, 0.8),
    ] {
        w.add_box(Vector3::new(x - sx / 2.0, y - sy / 2.0, z0), Vector3::new(x + sx / 2.0, y + sy / 2.0, z0 + h))?;
    }
    Ok(w)
}

/// Loop path of the hall scene.
pub fn hall_path() -> RoundedRect {
    RoundedRect { hx: 13.0, hy: 7.75, r: 2.0 }
}

pub fn hall() -> Result<Scenario, SimError> {
    let path = hall_path();
    let traj = driven_trajectory(|s| path.at(s), path.length(), 1.0, 1.0, Vector3::zeros())?;
    Ok(Scenario::base("hall", hall_world()?, traj, 1.0))
}

/// Corridor with a plain left wall 1.2 m from the centreline and niches and
/// ceiling beams elsewhere.
pub fn corridor_world() -> Result<World, SimError> {
    let mut w = World::new();
    let (z0, z1) = (-1.0, 1.6);
    let (x0, x1) = (-3.0, 33.0);
    w.add_wall([x0, 1.2], [x1, 1.2], z0, z1)?;
    w.add_wall([x0, -1.2], [x0, 1.2], z0, z1)?;
    w.add_wall([x1, -1.2], [x1, 1.2], z0, z1)?;
    w.add_floor([x0, x1], [-1.6, 1.2], z0)?;
    w.add_floor([x0, x1], [-1.6, 1.2], z1)?;
    let mut x = x0;
    let mut niche = 1.0;
    while niche + 1.0 < x1 {
        w.add_wall([x, -1.2], [niche, -1.2], z0, z1)?;
        w.add_wall([niche, -1.6], [niche + 1.0, -1.6], z0, z1)?;
        w.add_wall([niche, -1.2], [niche, -1.6], z0, z1)?;
        w.add_wall([niche + 1.0, -1.6], [niche + 1.0, -1.2], z0, z1)?;
        x = niche + 1.0;
        niche += 4.0;
    }
    w.add_wall([x, -1.2], [x1, -1.2], z0, z1)?;
    let mut b = -1.5;
    while b < x1 {
        w.add_box(Vector3::new(b, -1.2, 1.35), Vector3::new(b + 0.25, 1.2, z1))?;
        b += 3.0;
    }
    Ok(w)
}

/// The solid-state sensor looks at the plain wall at about 1.1 m, so every
/// solid-state frame sees a single near plane.
pub fn corridor() -> Result<Scenario, SimError> {
    let traj = driven_trajectory(
        |s| (Vector3::new(s, 0.0, 0.0), 0.0),
        25.0,
        1.0,
        1.0,
        Vector3::zeros(),
    )?;
    let mut sc = Scenario::base("corridor", corridor_world()?, traj, 1.0);
    sc.h_to_i = Posed::new(Quatd::from_yaw(std::f64::consts::FRAC_PI_2), Vector3::new(0.05, 0.1, 0.05));
    let v_to_i = Posed::new(Quatd::from_yaw(0.05), Vector3::new(-0.05, 0.0, 0.2));
    sc.v_to_h = sc.h_to_i.inverse().compose(&v_to_i);
    Ok(sc)
}
