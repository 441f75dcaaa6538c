//! Brute-force oracles and fixtures shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use racesim::bridge::{serve, ServeConfig, SessionReport};
use racesim::dynamics::{dynamic_derivative, ControlInput, VehicleParams, VehicleState};
use racesim::eval::ReferenceTrajectory;
use racesim::geometry::{OrientedBox, Pose2, Segment2};
use racesim::scenario::{gen_oval, OvalParams, OvalScenario};
use racesim::sensors::LidarSpec;
use racesim::twin::TrackMap2D;
use racesim::world::{World, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::net::{SocketAddr, TcpListener};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Noiseless ranges by testing every beam against every segment and box edge.
pub fn brute_raycast(
    pose: &Pose2,
    segments: &[Segment2],
    boxes: &[OrientedBox],
    spec: &LidarSpec,
) -> Vec<f64> {
    let origin = pose.transform_point(spec.mount_offset);
    (0..spec.num_beams)
        .map(|i| {
            let angle =
                pose.psi - spec.fov / 2.0 + i as f64 * spec.fov / (spec.num_beams - 1) as f64;
            let dir = [angle.cos(), angle.sin()];
            let mut best = f64::INFINITY;
            for s in segments.iter().chain(
                boxes
                    .iter()
                    .flat_map(|b| b.edges().to_vec())
                    .collect::<Vec<_>>()
                    .iter(),
            ) {
                if let Some(t) = s.ray_hit(origin, dir) {
                    best = best.min(t);
                }
            }
            if best <= spec.range_max {
                best.clamp(spec.range_min, spec.range_max)
            } else {
                spec.range_max + 1.0
            }
        })
        .collect()
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Repeats the plain neighbour-count pass until nothing more is removed.
pub fn brute_sphere_filter(points: &[[f64; 3]], r: f64, m_min: usize) -> Vec<[f64; 3]> {
    let mut cur = points.to_vec();
    loop {
        let next: Vec<[f64; 3]> = cur
            .iter()
            .enumerate()
            .filter(|(i, p)| cur.iter().enumerate().filter(|(j, q)| j != i && d2(p, q) <= r * r).count() >= m_min)
            .map(|(_, p)| *p)
            .collect();
        if next.len() == cur.len() {
            return next;
        }
        cur = next;
    }
}

pub fn brute_knn_means(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| d2(p, q))
                .collect();
            d.sort_by(f64::total_cmp);
            d.iter().take(k).map(|v| v.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

pub fn brute_statistical_filter(points: &[[f64; 3]], k: usize, ratio: f64) -> Vec<[f64; 3]> {
    let means = brute_knn_means(points, k);
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    let sigma = (means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n).sqrt();
    points
        .iter()
        .zip(&means)
        .filter(|(_, m)| **m <= mu + ratio * sigma)
        .map(|(p, _)| *p)
        .collect()
}

pub fn brute_poisson(points: &[[f64; 3]], radius: f64) -> Vec<[f64; 3]> {
    let mut kept: Vec<[f64; 3]> = Vec::new();
    for p in points {
        if kept.iter().all(|q| d2(p, q) >= radius * radius) {
            kept.push(*p);
        }
    }
    kept
}

/// Random cloud mixing dense clusters with scattered points.
pub fn random_cloud(rng: &mut ChaCha8Rng, max_points: usize) -> Vec<[f64; 3]> {
    let n = rng.random_range(10..=max_points);
    let clusters: Vec<[f64; 3]> = (0..rng.random_range(1..5))
        .map(|_| {
            [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.85) {
                let c = clusters[rng.random_range(0..clusters.len())];
                [
                    c[0] + rng.random_range(-0.5..0.5),
                    c[1] + rng.random_range(-0.5..0.5),
                    c[2] + rng.random_range(-0.2..0.2),
                ]
            } else {
                [
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-2.0..2.0),
                ]
            }
        })
        .collect()
}

pub fn brute_lateral(path: &[[f64; 2]], segments: &[Segment2]) -> (f64, f64) {
    let ds: Vec<f64> = path
        .iter()
        .map(|p| {
            segments
                .iter()
                .map(|s| s.distance_to(*p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    (
        ds.iter().sum::<f64>() / ds.len() as f64,
        ds.iter().cloned().fold(0.0, f64::max),
    )
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mut flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Steady cornering state (v_y, psi_dot) with `v_dot_y = psi_ddot = 0`,
/// found by nested bisection: v_y solves the lateral balance for each yaw
/// rate, then the yaw rate solves the moment balance.
pub fn steady_state_circle(v_x: f64, delta: f64, p: &VehicleParams) -> (f64, f64) {
    let input = ControlInput::new(0.0, delta);
    let d = |v_y: f64, r: f64| {
        dynamic_derivative(
            &VehicleState {
                v_x,
                v_y,
                psi_dot: r,
                ..Default::default()
            },
            &input,
            p,
        )
    };
    let vy_for = |r: f64| bisect(-v_x, v_x, |vy| d(vy, r).v_y_dot);
    let r = bisect(-3.0, 3.0, |r| d(vy_for(r), r).psi_ddot);
    (vy_for(r), r)
}

pub fn oval() -> OvalScenario {
    gen_oval(&OvalParams::default())
}

pub fn oval_world(sc: &OvalScenario, map: &TrackMap2D, seed: u64, expose: bool) -> World {
    let mut cfg = WorldConfig::new(VehicleParams::f1tenth(), LidarSpec::ust10lx());
    cfg.seed = seed;
    cfg.expose_ground_truth = expose;
    cfg.scan_every = 4;
    World::new(cfg, map, sc.start, Vec::new())
}

/// Runs one session on a loopback port with `client` in its own thread.
pub fn run_session<C>(world: World, cfg: ServeConfig, client: C) -> SessionReport
where
    C: FnOnce(SocketAddr) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || client(addr));
    let report = serve(&listener, world, &cfg).unwrap();
    handle.join().unwrap();
    report
}

pub fn reference_segments(r: &ReferenceTrajectory) -> Vec<Segment2> {
    r.segments().to_vec()
}

pub fn gt_driver(sc: &OvalScenario) -> racesim::driver::Driver {
    use racesim::driver::{Driver, PoseSource, PurePursuit};
    Driver::new(PurePursuit::default(), sc.reference.clone(), PoseSource::GroundTruth, sc.start)
}

/// Closed-loop ground-truth session of `ticks` ticks with optional random
/// client delays (up to `max_delay_us` microseconds, seeded).
pub fn gt_session(sc: &OvalScenario, seed: u64, ticks: u64, delay_seed: Option<(u64, u64)>) -> SessionReport {
    let world = oval_world(sc, &sc.map, seed, true);
    let cfg = ServeConfig { max_ticks: Some(ticks), ..Default::default() };
    let driver = gt_driver(sc);
    run_session(world, cfg, move |addr| {
        let mut delays = delay_seed.map(|(s, max)| (rng(s), max));
        racesim::driver::run_driver(addr, driver, |_| {
            delays.as_mut().map(|(r, max)| std::time::Duration::from_micros(r.random_range(0..=*max)))
        })
        .unwrap();
    })
}

/// Smallest eigenvalue of the mean point-to-line information matrix of a
/// scan taken at `pose`, in units where one position unit is `res` and one
/// heading unit is `psi_step`. Its square root is the RMS displacement (in
/// cells) of the endpoints normal to their walls for a unit pose change in
/// the least constrained direction.
pub fn weakest_constraint(pose: &Pose2, scan: &racesim::sensors::Scan, segments: &[Segment2], res: f64, psi_step: f64) -> f64 {
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    let mut n = 0.0;
    for (angle, r) in scan.returns() {
        let (s, c) = angle.sin_cos();
        let q = pose.transform_point([scan.mount_offset[0] + r * c, scan.mount_offset[1] + r * s]);
        let seg = segments
            .iter()
            .min_by(|a, b| a.distance_to(q).total_cmp(&b.distance_to(q)))
            .unwrap();
        let (dx, dy) = (seg.b[0] - seg.a[0], seg.b[1] - seg.a[1]);
        let len = dx.hypot(dy);
        let normal = [-dy / len, dx / len];
        let lever = normal[0] * -(q[1] - pose.y) + normal[1] * (q[0] - pose.x);
        let j = nalgebra::Vector3::new(normal[0], normal[1], lever * psi_step / res);
        h += j * j.transpose();
        n += 1.0;
    }
    (h / n).symmetric_eigen().eigenvalues.min()
}

/// Closed polygon offset by `d` to the left of travel, with mitered corners.
pub fn offset_polygon(pts: &[[f64; 2]], d: f64) -> Vec<[f64; 2]> {
    let n = pts.len();
    let left = |i: usize| {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        [-(b[1] - a[1]) / len, (b[0] - a[0]) / len]
    };
    (0..n)
        .map(|i| {
            let (n0, n1) = (left((i + n - 1) % n), left(i));
            let m = [n0[0] + n1[0], n0[1] + n1[1]];
            let scale = d / (1.0 + n0[0] * n1[0] + n0[1] * n1[1]);
            [pts[i][0] + m[0] * scale, pts[i][1] + m[1] * scale]
        })
        .collect()
}

/// Irregular polygonal circuit, 2 m wide, whose corners keep most poses
/// well constrained for scan matching.
pub fn corner_track() -> (Vec<[f64; 2]>, TrackMap2D) {
    let center = vec![
        [0.0, 0.0],
        [8.0, 0.0],
        [10.0, 3.0],
        [8.0, 7.0],
        [4.0, 6.0],
        [1.0, 8.0],
        [-2.0, 5.0],
    ];
    let map = TrackMap2D::merged(&[
        TrackMap2D::polygon(&offset_polygon(&center, 1.0)),
        TrackMap2D::polygon(&offset_polygon(&center, -1.0)),
    ]);
    (center, map)
}

/// Mean absolute range difference between noiseless scans against `truth`
/// and against `rebuilt` at 20 poses spread along the reference, over beams
/// that return in both. Also returns the number of matched beams.
pub fn round_trip_error(sc: &OvalScenario, rebuilt: &TrackMap2D) -> (f64, usize) {
    use racesim::sensors::{raycast_scan, TrackIndex};
    let (a, b) = (TrackIndex::new(&sc.map), TrackIndex::new(rebuilt));
    let mut lidar = LidarSpec::ust10lx();
    lidar.noise_std = 0.0;
    let total = sc.reference.length();
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..20 {
        let s = total * (i as f64 + 0.37) / 20.0;
        let p = sc.reference.point_at(s);
        let q = sc.reference.point_at(s + 0.1);
        let pose = Pose2::new(p[0], p[1], (q[1] - p[1]).atan2(q[0] - p[0]));
        let ra = raycast_scan(&pose, &a, &[], &lidar, 0, &mut rng(0));
        let rb = raycast_scan(&pose, &b, &[], &lidar, 0, &mut rng(0));
        for (x, y) in ra.ranges.iter().zip(&rb.ranges) {
            if ra.is_return(*x) && rb.is_return(*y) {
                sum += (x - y).abs();
                n += 1;
            }
        }
    }
    (sum / n.max(1) as f64, n)
}

/// Outcome of matching noiseless scans from random poses on
/// [`corner_track`].
pub struct Recovery {
    pub poses: usize,
    pub degenerate: usize,
    pub failures: Vec<String>,
    pub max_position: f64,
    pub max_heading: f64,
}

/// Weakest-direction endpoint displacement, in cells per unit pose change,
/// below which a pose counts as degenerate.
pub const DEGENERATE: f64 = 0.1;

pub fn recovery_trial(seed: u64, poses: usize) -> Recovery {
    use racesim::geometry::wrap_angle;
    use racesim::localize::{match_scan, rasterize, SearchWindow};
    use racesim::sensors::{raycast_scan, TrackIndex};
    let (center, map) = corner_track();
    let grid = rasterize(&map, 0.05).unwrap();
    let index = TrackIndex::new(&map);
    let mut lidar = LidarSpec::ust10lx();
    lidar.noise_std = 0.0;
    let window = SearchWindow::default();
    let mut rng = rng(seed);
    let n = center.len();
    let mut out = Recovery { poses, degenerate: 0, failures: Vec::new(), max_position: 0.0, max_heading: 0.0 };
    for k in 0..poses {
        let i = rng.random_range(0..n);
        let (a, b) = (center[i], center[(i + 1) % n]);
        let t = rng.random_range(0.0..1.0);
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        let lateral = rng.random_range(-0.5..0.5);
        let truth = Pose2::new(
            a[0] + t * (b[0] - a[0]) - lateral * heading.sin(),
            a[1] + t * (b[1] - a[1]) + lateral * heading.cos(),
            wrap_angle(heading + rng.random_range(-0.3..0.3)),
        );
        let scan = raycast_scan(&truth, &index, &[], &lidar, 0, &mut rng);
        let prior = Pose2::new(
            truth.x + rng.random_range(-0.3..0.3),
            truth.y + rng.random_range(-0.3..0.3),
            truth.psi + rng.random_range(-0.12..0.12),
        );
        if weakest_constraint(&truth, &scan, map.segments(), grid.resolution, window.psi_step()).sqrt() < DEGENERATE {
            out.degenerate += 1;
            continue;
        }
        let est = match_scan(&scan, &grid, prior, &window).unwrap();
        let dp = (est.pose.x - truth.x).hypot(est.pose.y - truth.y);
        let dpsi = wrap_angle(est.pose.psi - truth.psi).abs();
        out.max_position = out.max_position.max(dp);
        out.max_heading = out.max_heading.max(dpsi);
        if dp >= grid.resolution || dpsi >= window.psi_step() {
            out.failures.push(format!("pose {k}: {dp:.4} m, {dpsi:.4} rad"));
        }
    }
    out
}

/// Closed-loop session steering from scan matching against `grid`.
pub fn se_session(sc: &OvalScenario, grid: racesim::localize::OccupancyGrid, seed: u64, ticks: u64) -> SessionReport {
    use racesim::driver::{run_driver, Driver, PoseSource, PurePursuit};
    let world = oval_world(sc, &sc.map, seed, false);
    let cfg = ServeConfig { max_ticks: Some(ticks), ..Default::default() };
    let source = PoseSource::ScanMatch {
        grid,
        window: racesim::config::DriverConfig::default().window,
        lidar: LidarSpec::ust10lx(),
    };
    let driver = Driver::new(PurePursuit::default(), sc.reference.clone(), source, sc.start);
    run_session(world, cfg, move |addr| {
        run_driver(addr, driver, |_| None).unwrap();
    })
}
