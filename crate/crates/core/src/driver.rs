//! Reference autonomy client: pure-pursuit steering with proportional speed
//! control, fed either by ground-truth poses or by scan matching.

use crate::bridge::{BridgeError, Client, Command, SensorFrame};
use crate::dynamics::ControlInput;
use crate::eval::{EstimateRecord, ReferenceTrajectory};
use crate::geometry::{wrap_angle, Pose2};
use crate::localize::{match_scan, OccupancyGrid, SearchWindow};
use crate::sensors::{LidarSpec, Scan};
use serde::{Deserialize, Serialize};
use std::net::ToSocketAddrs;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(
        "frame {0} carries no ground-truth pose; enable it on the server or use scan matching"
    )]
    NoGroundTruth(u64),
}

impl From<std::io::Error> for DriverError {
    fn from(e: std::io::Error) -> Self {
        DriverError::Bridge(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurePursuit {
    /// Target speed, m/s.
    pub target_speed: f64,
    /// Lookahead distance is `max(lookahead_min, lookahead_gain * v)`.
    pub lookahead_min: f64,
    pub lookahead_gain: f64,
    /// Proportional gain from speed error to acceleration, 1/s.
    pub speed_gain: f64,
    pub wheelbase: f64,
}

impl Default for PurePursuit {
    fn default() -> Self {
        Self {
            target_speed: 3.0,
            lookahead_min: 0.5,
            lookahead_gain: 0.25,
            speed_gain: 2.0,
            wheelbase: 0.33,
        }
    }
}

impl PurePursuit {
    pub fn control(&self, pose: &Pose2, v: f64, reference: &ReferenceTrajectory) -> ControlInput {
        let a = self.speed_gain * (self.target_speed - v);
        let lookahead = self.lookahead_min.max(self.lookahead_gain * v);
        let (_, s) = reference.project(pose.position());
        let target = reference.point_at(s + lookahead);
        let local = pose.inverse_transform_point(target);
        let d2 = local[0] * local[0] + local[1] * local[1];
        if d2 == 0.0 {
            return ControlInput::new(a, 0.0);
        }
        let curvature = 2.0 * local[1] / d2;
        ControlInput::new(a, (curvature * self.wheelbase).atan())
    }
}

/// Where the driver gets its pose from.
#[derive(Debug, Clone)]
pub enum PoseSource {
    /// Use the ground-truth pose carried by each frame.
    GroundTruth,
    /// Dead-reckon with odometry between scans and correct by matching each
    /// scan against the grid.
    ScanMatch {
        grid: OccupancyGrid,
        window: SearchWindow,
        lidar: LidarSpec,
    },
}

pub struct Driver {
    pub pursuit: PurePursuit,
    reference: ReferenceTrajectory,
    source: PoseSource,
    estimate: Pose2,
    last_time: Option<f64>,
    estimates: Vec<EstimateRecord>,
}

impl Driver {
    /// `initial` seeds the scan-matching estimate; ignored with ground truth.
    pub fn new(
        pursuit: PurePursuit,
        reference: ReferenceTrajectory,
        source: PoseSource,
        initial: Pose2,
    ) -> Self {
        Self {
            pursuit,
            reference,
            source,
            estimate: initial,
            last_time: None,
            estimates: Vec::new(),
        }
    }

    pub fn estimates(&self) -> &[EstimateRecord] {
        &self.estimates
    }

    fn update_estimate(&mut self, frame: &SensorFrame) -> Result<Pose2, DriverError> {
        match &self.source {
            PoseSource::GroundTruth => frame.pose.ok_or(DriverError::NoGroundTruth(frame.tick)),
            PoseSource::ScanMatch {
                grid,
                window,
                lidar,
            } => {
                if let Some(prev) = self.last_time {
                    let dt = frame.time - prev;
                    let o = &frame.odom;
                    let e = &mut self.estimate;
                    let mid = e.psi + 0.5 * o.psi_dot * dt;
                    let (s, c) = mid.sin_cos();
                    e.x += (o.v_x * c - o.v_y * s) * dt;
                    e.y += (o.v_x * s + o.v_y * c) * dt;
                    e.psi = wrap_angle(e.psi + o.psi_dot * dt);
                }
                self.last_time = Some(frame.time);
                if let Some(payload) = &frame.scan {
                    let scan =
                        Scan::from_ranges(frame.tick, payload.fov, payload.ranges.clone(), lidar);
                    match match_scan(&scan, grid, self.estimate, window) {
                        Ok(est) => {
                            self.estimate = est.pose;
                            self.estimates.push(EstimateRecord {
                                tick: frame.tick,
                                pose: est.pose,
                                score: est.score,
                            });
                        }
                        Err(e) => log::warn!("scan match failed at tick {}: {e}", frame.tick),
                    }
                }
                Ok(self.estimate)
            }
        }
    }

    pub fn on_frame(&mut self, frame: &SensorFrame) -> Result<Command, DriverError> {
        let pose = self.update_estimate(frame)?;
        let u = self.pursuit.control(&pose, frame.odom.v_x, &self.reference);
        Ok(Command {
            tick: frame.tick,
            a: u.a,
            delta: u.delta,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct DriveReport {
    pub frames: u64,
    pub estimates: Vec<EstimateRecord>,
}

/// Drives until the server ends the session. `delay` is called before each
/// reply with the frame tick and may return an artificial latency.
pub fn run_driver(
    addr: impl ToSocketAddrs,
    mut driver: Driver,
    mut delay: impl FnMut(u64) -> Option<Duration>,
) -> Result<DriveReport, DriverError> {
    let mut client = Client::connect(addr)?;
    let mut frames = 0;
    while let Some(frame) = client.recv_frame()? {
        frames += 1;
        let cmd = driver.on_frame(&frame)?;
        if let Some(d) = delay(frame.tick) {
            std::thread::sleep(d);
        }
        if client.send_command(&cmd).is_err() {
            break;
        }
    }
    Ok(DriveReport {
        frames,
        estimates: driver.estimates,
    })
}
