//! Deterministic closed-loop racing simulation.
//!
//! The crate covers a single-track vehicle model with Pacejka tires
//! ([`dynamics`]), geometric LiDAR/IMU/odometry synthesis ([`sensors`]), a
//! point-cloud-to-track-map pipeline ([`twin`]), the tick loop with
//! waypoint-following opponents ([`world`]), a lockstep TCP protocol for
//! external autonomy stacks ([`bridge`]), a correlative scan matcher
//! ([`localize`]) and sim-to-real metrics ([`eval`]).

pub mod bridge;
pub mod config;
pub mod driver;
pub mod dynamics;
pub mod eval;
pub mod geometry;
pub mod localize;
pub mod scenario;
pub mod sensors;
pub mod spatial;
pub mod twin;
pub mod world;
