//! Geometric sensor synthesis: planar LiDAR raycasting against a track map,
//! finite-difference IMU, and wheel odometry.

use crate::dynamics::VehicleState;
use crate::geometry::{Aabb2, OrientedBox, Pose2, Segment2};
use crate::twin::TrackMap2D;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("time step must be positive, got {0}")]
    InvalidTimestep(f64),
    #[error("invalid lidar spec: {0}")]
    InvalidSpec(String),
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub num_beams: usize,
    /// Field of view, rad. Beams span `[-fov/2, fov/2]` inclusive.
    pub fov: f64,
    pub range_min: f64,
    pub range_max: f64,
    /// Nominal scan rate, Hz.
    pub rate: f64,
    /// Std-dev of additive range noise, m.
    pub noise_std: f64,
    /// Height of the scan plane above ground, m.
    pub mount_height: f64,
    /// Sensor position in the body frame, m.
    pub mount_offset: [f64; 2],
}

impl LidarSpec {
    /// Hokuyo UST-10LX-like planar scanner.
    pub fn ust10lx() -> Self {
        Self {
            num_beams: 1081,
            fov: 270f64.to_radians(),
            range_min: 0.06,
            range_max: 10.0,
            rate: 40.0,
            noise_std: 0.01,
            mount_height: 0.15,
            mount_offset: [0.1, 0.0],
        }
    }

    /// Single horizontal ring of an HDL-32-like spinning LiDAR.
    pub fn hdl32_slice() -> Self {
        Self {
            num_beams: 1800,
            fov: 2.0 * PI,
            range_min: 0.5,
            range_max: 80.0,
            rate: 10.0,
            noise_std: 0.02,
            mount_height: 0.9,
            mount_offset: [0.3, 0.0],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "ust10lx-like" => Some(Self::ust10lx()),
            "hdl32-slice-like" => Some(Self::hdl32_slice()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if self.num_beams < 2 {
            return Err(SensorError::InvalidSpec(format!(
                "num_beams must be >= 2, got {}",
                self.num_beams
            )));
        }
        if !(self.fov > 0.0 && self.fov <= 2.0 * PI) {
            return Err(SensorError::InvalidSpec(format!(
                "fov must be in (0, 2pi], got {}",
                self.fov
            )));
        }
        if !(self.range_min >= 0.0 && self.range_min < self.range_max && self.range_max.is_finite())
        {
            return Err(SensorError::InvalidSpec(format!(
                "need 0 <= range_min < range_max, got {} / {}",
                self.range_min, self.range_max
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(SensorError::InvalidSpec(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn beam_angle(&self, i: usize) -> f64 {
        beam_angle(self.fov, self.num_beams, i)
    }

    /// Range reported for beams without a return.
    pub fn sentinel(&self) -> f64 {
        self.range_max + 1.0
    }
}

fn beam_angle(fov: f64, num_beams: usize, i: usize) -> f64 {
    -fov / 2.0 + i as f64 * fov / (num_beams - 1) as f64
}

/// One LiDAR sweep. Beam `i` points at `-fov/2 + i * fov / (n - 1)` in the
/// sensor frame; no-return beams carry `range_max + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub tick: u64,
    pub fov: f64,
    pub range_min: f64,
    pub range_max: f64,
    pub mount_offset: [f64; 2],
    pub ranges: Vec<f64>,
}

impl Scan {
    /// Rebuilds a scan from bare ranges using the sensor geometry in `spec`.
    pub fn from_ranges(tick: u64, fov: f64, ranges: Vec<f64>, spec: &LidarSpec) -> Self {
        Self {
            tick,
            fov,
            range_min: spec.range_min,
            range_max: spec.range_max,
            mount_offset: spec.mount_offset,
            ranges,
        }
    }

    pub fn num_beams(&self) -> usize {
        self.ranges.len()
    }

    pub fn beam_angle(&self, i: usize) -> f64 {
        beam_angle(self.fov, self.ranges.len(), i)
    }

    pub fn sentinel(&self) -> f64 {
        self.range_max + 1.0
    }

    pub fn is_return(&self, range: f64) -> bool {
        range.is_finite() && range <= self.range_max
    }

    /// `(sensor-frame angle, range)` of every beam with a return.
    pub fn returns(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ranges
            .iter()
            .enumerate()
            .filter(|(_, r)| self.is_return(**r))
            .map(|(i, r)| (self.beam_angle(i), *r))
    }

    /// World-frame hit points when the vehicle is at `pose`.
    pub fn endpoints(&self, pose: &Pose2) -> Vec<[f64; 2]> {
        let origin = pose.transform_point(self.mount_offset);
        self.returns()
            .map(|(angle, r)| {
                let (s, c) = (pose.psi + angle).sin_cos();
                [origin[0] + r * c, origin[1] + r * s]
            })
            .collect()
    }
}

/// Uniform grid over map segments for ray queries.
#[derive(Debug, Clone)]
pub struct TrackIndex {
    segments: Vec<Segment2>,
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl TrackIndex {
    pub fn new(map: &TrackMap2D) -> Self {
        let segments = map.segments().to_vec();
        let bounds = if segments.is_empty() {
            Aabb2 {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            }
        } else {
            map.bounds()
        };
        let bounds = bounds.expanded(1e-6);
        let mean_len = if segments.is_empty() {
            1.0
        } else {
            segments.iter().map(Segment2::length).sum::<f64>() / segments.len() as f64
        };
        let w = bounds.max[0] - bounds.min[0];
        let h = bounds.max[1] - bounds.min[1];
        let cell = (2.0 * mean_len).max(w.max(h) / 512.0).max(1e-3);
        let nx = ((w / cell).ceil() as usize).max(1);
        let ny = ((h / cell).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); nx * ny];
        let pad = 1e-9 * (1.0 + w.max(h));
        for (k, s) in segments.iter().enumerate() {
            let lo = |v: f64, o: f64, n: usize| {
                ((((v - pad) - o) / cell).floor().max(0.0) as usize).min(n - 1)
            };
            let x0 = lo(s.a[0].min(s.b[0]), bounds.min[0], nx);
            let x1 = lo(s.a[0].max(s.b[0]) + 2.0 * pad, bounds.min[0], nx);
            let y0 = lo(s.a[1].min(s.b[1]), bounds.min[1], ny);
            let y1 = lo(s.a[1].max(s.b[1]) + 2.0 * pad, bounds.min[1], ny);
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    cells[iy * nx + ix].push(k as u32);
                }
            }
        }
        Self {
            segments,
            origin: bounds.min,
            cell,
            nx,
            ny,
            cells,
        }
    }

    pub fn segments(&self) -> &[Segment2] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Nearest segment hit along a unit-direction ray, up to `max_range`.
    pub fn cast(&self, origin: [f64; 2], dir: [f64; 2], max_range: f64) -> Option<f64> {
        if self.segments.is_empty() {
            return None;
        }
        let min = self.origin;
        let max = [
            min[0] + self.nx as f64 * self.cell,
            min[1] + self.ny as f64 * self.cell,
        ];
        // Clip the ray against the grid box.
        let mut t0: f64 = 0.0;
        let mut t1 = max_range;
        for k in 0..2 {
            if dir[k] == 0.0 {
                if origin[k] < min[k] || origin[k] > max[k] {
                    return None;
                }
            } else {
                let ta = (min[k] - origin[k]) / dir[k];
                let tb = (max[k] - origin[k]) / dir[k];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 > t1 {
            return None;
        }
        let entry = [origin[0] + t0 * dir[0], origin[1] + t0 * dir[1]];
        let index =
            |v: f64, o: f64, n: usize| (((v - o) / self.cell).floor().max(0.0) as usize).min(n - 1);
        let mut ix = index(entry[0], min[0], self.nx) as i64;
        let mut iy = index(entry[1], min[1], self.ny) as i64;

        let axis = |d: f64, o: f64, i: i64, base: f64| -> (i64, f64, f64) {
            if d > 0.0 {
                (
                    1,
                    (base + (i + 1) as f64 * self.cell - o) / d,
                    self.cell / d,
                )
            } else if d < 0.0 {
                (-1, (base + i as f64 * self.cell - o) / d, -self.cell / d)
            } else {
                (0, f64::INFINITY, f64::INFINITY)
            }
        };
        let (step_x, mut t_max_x, dt_x) = axis(dir[0], origin[0], ix, min[0]);
        let (step_y, mut t_max_y, dt_y) = axis(dir[1], origin[1], iy, min[1]);

        let mut best: Option<f64> = None;
        loop {
            for &k in &self.cells[iy as usize * self.nx + ix as usize] {
                if let Some(t) = self.segments[k as usize].ray_hit(origin, dir) {
                    if t <= max_range && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                }
            }
            let t_exit = t_max_x.min(t_max_y);
            if best.is_some_and(|b| b <= t_exit) || t_exit > t1 {
                break;
            }
            if t_max_x < t_max_y {
                ix += step_x;
                t_max_x += dt_x;
            } else {
                iy += step_y;
                t_max_y += dt_y;
            }
            if ix < 0 || iy < 0 || ix >= self.nx as i64 || iy >= self.ny as i64 {
                break;
            }
        }
        best
    }
}

/// Synthesizes one LiDAR sweep from the vehicle pose.
///
/// Noise is drawn for every beam in beam order before any geometry is
/// evaluated, so the consumed random stream does not depend on the scene.
pub fn raycast_scan<R: Rng + ?Sized>(
    pose: &Pose2,
    map: &TrackIndex,
    opponents: &[OrientedBox],
    spec: &LidarSpec,
    tick: u64,
    rng: &mut R,
) -> Scan {
    let noise: Vec<f64> = (0..spec.num_beams)
        .map(|_| gaussian(rng, spec.noise_std))
        .collect();
    let origin = pose.transform_point(spec.mount_offset);
    let sentinel = spec.sentinel();
    let ranges = (0..spec.num_beams)
        .into_par_iter()
        .map(|i| {
            let (s, c) = (pose.psi + spec.beam_angle(i)).sin_cos();
            let dir = [c, s];
            let wall = map.cast(origin, dir, spec.range_max);
            let hit = opponents
                .iter()
                .filter_map(|b| b.ray_hit(origin, dir))
                .fold(wall, |best, t| Some(best.map_or(t, |b: f64| b.min(t))));
            match hit {
                Some(t) if t <= spec.range_max => {
                    (t + noise[i]).clamp(spec.range_min, spec.range_max)
                }
                _ => sentinel,
            }
        })
        .collect();
    Scan {
        tick,
        fov: spec.fov,
        range_min: spec.range_min,
        range_max: spec.range_max,
        mount_offset: spec.mount_offset,
        ranges,
    }
}

/// Accelerometer/attitude sample. Accelerations are body-frame
/// finite differences of the body velocities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuSample {
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    pub psi: f64,
    pub psi_dot: f64,
}

/// Per-channel noise std-devs for [`synth_imu`]. `a_z` is always exactly `g`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    pub a_x: f64,
    pub a_y: f64,
    pub psi: f64,
    pub psi_dot: f64,
}

pub fn synth_imu<R: Rng + ?Sized>(
    state_t: &VehicleState,
    state_tm1: &VehicleState,
    dt: f64,
    g: f64,
    noise: &ImuNoise,
    rng: &mut R,
) -> Result<ImuSample, SensorError> {
    if !(dt > 0.0) {
        return Err(SensorError::InvalidTimestep(dt));
    }
    Ok(ImuSample {
        a_x: (state_t.v_x - state_tm1.v_x) / dt + gaussian(rng, noise.a_x),
        a_y: (state_t.v_y - state_tm1.v_y) / dt + gaussian(rng, noise.a_y),
        a_z: g,
        psi: state_t.psi + gaussian(rng, noise.psi),
        psi_dot: state_t.psi_dot + gaussian(rng, noise.psi_dot),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OdomSample {
    pub v_x: f64,
    pub v_y: f64,
    pub psi_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OdomNoise {
    pub v_x: f64,
    pub v_y: f64,
    pub psi_dot: f64,
}

pub fn synth_odom<R: Rng + ?Sized>(
    state: &VehicleState,
    noise: &OdomNoise,
    rng: &mut R,
) -> OdomSample {
    OdomSample {
        v_x: state.v_x + gaussian(rng, noise.v_x),
        v_y: state.v_y + gaussian(rng, noise.v_y),
        psi_dot: state.psi_dot + gaussian(rng, noise.psi_dot),
    }
}
