//! Synthetic stadium-shaped ("oval") test track with a scanned point cloud.

use crate::eval::ReferenceTrajectory;
use crate::geometry::Pose2;
use crate::sensors::{raycast_scan, LidarSpec, TrackIndex};
use crate::twin::{PointCloud, TrackMap2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OvalParams {
    /// Length of each straight, m.
    pub straight: f64,
    /// Centerline radius of the turns, m.
    pub radius: f64,
    /// Wall-to-wall track width, m.
    pub width: f64,
    /// Maximum wall segment length, m.
    pub wall_spacing: f64,
    /// Reference waypoint spacing, m.
    pub ref_spacing: f64,
    /// Distance between scan poses used to build the cloud, m.
    pub scan_spacing: f64,
    pub noise_std: f64,
    /// Random stray points added to the cloud.
    pub strays: usize,
    pub seed: u64,
}

impl Default for OvalParams {
    fn default() -> Self {
        Self {
            straight: 6.0,
            radius: 3.0,
            width: 2.0,
            wall_spacing: 0.1,
            ref_spacing: 0.1,
            scan_spacing: 1.0,
            noise_std: 0.01,
            strays: 20,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OvalScenario {
    pub params: OvalParams,
    pub map: TrackMap2D,
    pub reference: ReferenceTrajectory,
    pub cloud: PointCloud,
    /// Ego start pose, 1 m before the start line.
    pub start: Pose2,
}

/// Point and heading at arc length `s` of a stadium with turn radius `r`,
/// starting at the middle of the lower straight and running
/// counter-clockwise.
pub fn stadium_point(straight: f64, r: f64, s: f64) -> ([f64; 2], f64) {
    let a = straight / 2.0;
    let arc = PI * r;
    let total = 2.0 * straight + 2.0 * arc;
    let mut s = s.rem_euclid(total);
    if s < a {
        return ([s, -r], 0.0);
    }
    s -= a;
    if s < arc {
        let th = -PI / 2.0 + s / r;
        return ([a + r * th.cos(), r * th.sin()], th + PI / 2.0);
    }
    s -= arc;
    if s < straight {
        return ([a - s, r], PI);
    }
    s -= straight;
    if s < arc {
        let th = PI / 2.0 + s / r;
        return ([-a + r * th.cos(), r * th.sin()], th + PI / 2.0);
    }
    s -= arc;
    ([-a + s, -r], 0.0)
}

pub fn stadium_length(straight: f64, r: f64) -> f64 {
    2.0 * straight + 2.0 * PI * r
}

fn stadium_polygon(straight: f64, r: f64, spacing: f64) -> Vec<[f64; 2]> {
    let total = stadium_length(straight, r);
    let n = (total / spacing).ceil() as usize;
    (0..n)
        .map(|i| stadium_point(straight, r, total * i as f64 / n as f64).0)
        .collect()
}

pub fn gen_oval(params: &OvalParams) -> OvalScenario {
    let p = params;
    let half = p.width / 2.0;
    let inner = TrackMap2D::polygon(&stadium_polygon(
        p.straight,
        p.radius - half,
        p.wall_spacing,
    ));
    let outer = TrackMap2D::polygon(&stadium_polygon(
        p.straight,
        p.radius + half,
        p.wall_spacing,
    ));
    let map = TrackMap2D::merged(&[inner, outer]);

    let total = stadium_length(p.straight, p.radius);
    let n_ref = (total / p.ref_spacing).ceil() as usize;
    let ref_points: Vec<[f64; 2]> = (0..n_ref)
        .map(|i| stadium_point(p.straight, p.radius, total * i as f64 / n_ref as f64).0)
        .collect();
    let reference = ReferenceTrajectory::new(ref_points, true).expect("stadium reference is valid");

    let mut lidar = LidarSpec::ust10lx();
    lidar.noise_std = p.noise_std;
    let index = TrackIndex::new(&map);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut points = Vec::new();
    let n_scans = (total / p.scan_spacing).ceil() as usize;
    for i in 0..n_scans {
        let (xy, psi) = stadium_point(p.straight, p.radius, total * i as f64 / n_scans as f64);
        let pose = Pose2::new(xy[0], xy[1], psi);
        let scan = raycast_scan(&pose, &index, &[], &lidar, i as u64, &mut rng);
        points.extend(scan.endpoints(&pose).into_iter().map(|q| [q[0], q[1], 0.0]));
    }
    let b = map.bounds().expanded(2.0);
    for _ in 0..p.strays {
        points.push([
            rng.random_range(b.min[0]..b.max[0]),
            rng.random_range(b.min[1]..b.max[1]),
            0.0,
        ]);
    }

    let start = Pose2::new(-1.0, -p.radius, 0.0);
    OvalScenario {
        params: *p,
        map,
        reference,
        cloud: PointCloud::new(points),
        start,
    }
}
