//! Fixed-rate tick loop: ego dynamics, waypoint-following opponents and
//! sensor synthesis.

use crate::bridge::{ScanPayload, SensorFrame};
use crate::dynamics::{self, ControlInput, DynamicsError, VehicleParams, VehicleState};
use crate::geometry::{distance, wrap_angle, OrientedBox, Pose2};
use crate::sensors::{self, ImuNoise, LidarSpec, OdomNoise, TrackIndex};
use crate::twin::TrackMap2D;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpponentTrajectory {
    waypoints: Vec<Waypoint>,
    closed: bool,
    lengths: Vec<f64>,
}

impl OpponentTrajectory {
    pub fn new(waypoints: Vec<Waypoint>, closed: bool) -> Result<Self, TrajectoryError> {
        if waypoints.len() < 2 {
            return Err(TrajectoryError::Invalid(format!(
                "trajectory needs at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        for (i, w) in waypoints.iter().enumerate() {
            if ![w.x, w.y, w.psi, w.v].iter().all(|v| v.is_finite()) {
                return Err(TrajectoryError::Invalid(format!(
                    "waypoint {i} is not finite"
                )));
            }
            if !(w.v > 0.0) {
                return Err(TrajectoryError::Invalid(format!(
                    "waypoint {i} has non-positive speed {}",
                    w.v
                )));
            }
        }
        let n = waypoints.len();
        let segs = if closed { n } else { n - 1 };
        let mut lengths = Vec::with_capacity(segs);
        for i in 0..segs {
            let a = &waypoints[i];
            let b = &waypoints[(i + 1) % n];
            let l = distance([a.x, a.y], [b.x, b.y]);
            if l == 0.0 {
                return Err(TrajectoryError::Invalid(format!(
                    "waypoints {i} and {} coincide",
                    (i + 1) % n
                )));
            }
            lengths.push(l);
        }
        Ok(Self {
            waypoints,
            closed,
            lengths,
        })
    }

    /// Reads a CSV with header columns `x,y,psi,v` (any order).
    pub fn from_csv(text: &str, closed: bool) -> Result<Self, TrajectoryError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| TrajectoryError::Parse {
                line: 1,
                msg: e.to_string(),
            })?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| TrajectoryError::Parse {
                    line: 1,
                    msg: format!("missing column {name:?}"),
                })
        };
        let idx = [col("x")?, col("y")?, col("psi")?, col("v")?];
        let mut waypoints = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| TrajectoryError::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let mut vals = [0.0; 4];
            for (k, &i) in idx.iter().enumerate() {
                let field = rec.get(i).unwrap_or("");
                vals[k] = field.parse().map_err(|_| TrajectoryError::Parse {
                    line,
                    msg: format!("invalid number {field:?}"),
                })?;
            }
            waypoints.push(Waypoint {
                x: vals[0],
                y: vals[1],
                psi: vals[2],
                v: vals[3],
            });
        }
        Self::new(waypoints, closed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,psi,v\n");
        for w in &self.waypoints {
            s.push_str(&format!("{},{},{},{}\n", w.x, w.y, w.psi, w.v));
        }
        s
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    pub fn segment_count(&self) -> usize {
        self.lengths.len()
    }

    pub fn segment_length(&self, i: usize) -> f64 {
        self.lengths[i]
    }

    pub fn segment(&self, i: usize) -> (&Waypoint, &Waypoint) {
        let n = self.waypoints.len();
        (&self.waypoints[i], &self.waypoints[(i + 1) % n])
    }

    /// Time to traverse the whole polyline: sum of `l_i / v_i`.
    pub fn traversal_time(&self) -> f64 {
        self.lengths
            .iter()
            .zip(&self.waypoints)
            .map(|(l, w)| l / w.v)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpponentState {
    pub pose: Pose2,
    pub segment_index: usize,
    /// Distance travelled along the current segment, m.
    pub segment_progress: f64,
    /// Completed loops of a closed trajectory.
    pub lap: u64,
}

impl OpponentState {
    pub fn at_waypoint(traj: &OpponentTrajectory, i: usize) -> Self {
        let i = i.min(traj.segment_count() - 1);
        let mut st = Self {
            pose: Pose2::default(),
            segment_index: i,
            segment_progress: 0.0,
            lap: 0,
        };
        st.pose = interpolate(traj, i, 0.0);
        st
    }
}

fn interpolate(traj: &OpponentTrajectory, i: usize, progress: f64) -> Pose2 {
    let (a, b) = traj.segment(i);
    let t = progress / traj.segment_length(i);
    Pose2::new(
        a.x + t * (b.x - a.x),
        a.y + t * (b.y - a.y),
        wrap_angle(a.psi + t * wrap_angle(b.psi - a.psi)),
    )
}

/// Advances an opponent by `dt` along its trajectory at the departing
/// waypoint's speed, carrying leftover time into the following segments.
pub fn opponent_step(traj: &OpponentTrajectory, st: &OpponentState, dt: f64) -> OpponentState {
    let mut out = *st;
    let mut remaining = dt.max(0.0);
    let last = traj.segment_count() - 1;
    loop {
        let i = out.segment_index;
        let len = traj.segment_length(i);
        let v = traj.waypoints[i].v;
        let needed = (len - out.segment_progress) / v;
        if needed > remaining {
            out.segment_progress += v * remaining;
            break;
        }
        remaining -= needed;
        if i == last && !traj.closed {
            out.segment_progress = len;
            break;
        }
        if i == last {
            out.segment_index = 0;
            out.lap += 1;
        } else {
            out.segment_index = i + 1;
        }
        out.segment_progress = 0.0;
        if remaining == 0.0 {
            break;
        }
    }
    out.pose = interpolate(traj, out.segment_index, out.segment_progress);
    out
}

pub fn footprint(st: &OpponentState, half_length: f64, half_width: f64) -> OrientedBox {
    OrientedBox {
        center: st.pose.position(),
        heading: st.pose.psi,
        half_length,
        half_width,
    }
}

#[derive(Debug, Clone)]
pub struct Opponent {
    pub trajectory: OpponentTrajectory,
    pub state: OpponentState,
    pub half_length: f64,
    pub half_width: f64,
}

impl Opponent {
    pub fn footprint(&self) -> OrientedBox {
        footprint(&self.state, self.half_length, self.half_width)
    }
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub dt: f64,
    pub params: VehicleParams,
    pub lidar: LidarSpec,
    /// Physics ticks per LiDAR scan.
    pub scan_every: u64,
    pub imu_noise: ImuNoise,
    pub odom_noise: OdomNoise,
    pub seed: u64,
    pub expose_ground_truth: bool,
    /// Half length and half width of the ego footprint, m.
    pub ego_half_extents: [f64; 2],
}

impl WorldConfig {
    pub fn new(params: VehicleParams, lidar: LidarSpec) -> Self {
        Self {
            dt: 0.01,
            params,
            lidar,
            scan_every: 4,
            imu_noise: ImuNoise::default(),
            odom_noise: OdomNoise::default(),
            seed: 0,
            expose_ground_truth: false,
            ego_half_extents: [0.25, 0.15],
        }
    }
}

/// Snapshot of the simulated world.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldState {
    pub tick: u64,
    pub time: f64,
    pub ego: VehicleState,
    pub opponents: Vec<OpponentState>,
    pub seed: u64,
}

pub struct World {
    cfg: WorldConfig,
    index: TrackIndex,
    tick: u64,
    ego: VehicleState,
    ego_prev: VehicleState,
    opponents: Vec<Opponent>,
    collision: bool,
}

impl World {
    pub fn new(cfg: WorldConfig, map: &TrackMap2D, start: Pose2, opponents: Vec<Opponent>) -> Self {
        let ego = VehicleState::at_rest(start);
        Self {
            cfg,
            index: TrackIndex::new(map),
            tick: 0,
            ego,
            ego_prev: ego,
            opponents,
            collision: false,
        }
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt
    }

    pub fn ego(&self) -> &VehicleState {
        &self.ego
    }

    pub fn opponents(&self) -> &[Opponent] {
        &self.opponents
    }

    /// Whether the ego footprint overlaps any opponent at the current tick.
    pub fn in_collision(&self) -> bool {
        self.collision
    }

    pub fn state(&self) -> WorldState {
        WorldState {
            tick: self.tick,
            time: self.time(),
            ego: self.ego,
            opponents: self.opponents.iter().map(|o| o.state).collect(),
            seed: self.cfg.seed,
        }
    }

    /// Teleports the ego to `pose` at rest.
    pub fn reset_ego(&mut self, pose: Pose2) {
        self.ego = VehicleState::at_rest(pose);
        self.ego_prev = self.ego;
    }

    fn ego_box(&self) -> OrientedBox {
        OrientedBox {
            center: [self.ego.x, self.ego.y],
            heading: self.ego.psi,
            half_length: self.cfg.ego_half_extents[0],
            half_width: self.cfg.ego_half_extents[1],
        }
    }

    /// Sensor frame for the current tick. Noise comes from a stream keyed
    /// by (seed, tick), so the frame does not depend on history.
    pub fn frame(&self) -> SensorFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.tick);
        let imu = sensors::synth_imu(
            &self.ego,
            &self.ego_prev,
            self.cfg.dt,
            self.cfg.params.g,
            &self.cfg.imu_noise,
            &mut rng,
        )
        .expect("dt validated at construction");
        let odom = sensors::synth_odom(&self.ego, &self.cfg.odom_noise, &mut rng);
        let scan = self.tick.is_multiple_of(self.cfg.scan_every.max(1)).then(|| {
            let boxes: Vec<OrientedBox> = self.opponents.iter().map(Opponent::footprint).collect();
            let s = sensors::raycast_scan(
                &self.ego.pose(),
                &self.index,
                &boxes,
                &self.cfg.lidar,
                self.tick,
                &mut rng,
            );
            ScanPayload {
                fov: s.fov,
                ranges: s.ranges,
            }
        });
        SensorFrame {
            tick: self.tick,
            time: self.time(),
            imu,
            odom,
            scan,
            pose: self.cfg.expose_ground_truth.then(|| self.ego.pose()),
        }
    }

    /// Applies `cmd` for one physics step and returns the next frame.
    pub fn step(&mut self, cmd: &ControlInput) -> Result<SensorFrame, DynamicsError> {
        let next = dynamics::step(&self.ego, cmd, self.cfg.dt, &self.cfg.params)?;
        self.ego_prev = self.ego;
        self.ego = next;
        for o in &mut self.opponents {
            o.state = opponent_step(&o.trajectory, &o.state, self.cfg.dt);
        }
        self.tick += 1;
        let ego_box = self.ego_box();
        let hit = self
            .opponents
            .iter()
            .any(|o| o.footprint().overlaps(&ego_box));
        if hit && !self.collision {
            log::warn!("ego collided with an opponent at tick {}", self.tick);
        }
        self.collision = hit;
        Ok(self.frame())
    }
}
