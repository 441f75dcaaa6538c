mod common;

use proptest::prelude::*;
use racesim::twin::*;
use rand::Rng;
use std::collections::HashMap;

fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
    PointCloud::new(points)
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Checks the index/area invariants, edge manifoldness and that each face
/// has an empty ball of one of `radii` resting on it.
fn assert_mesh_ok(mesh: &Mesh, points: &[[f64; 3]], radii: &[f64]) {
    mesh.validate().unwrap();
    let mut undirected: HashMap<(u32, u32), usize> = HashMap::new();
    let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
    for f in &mesh.faces {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            *directed.entry((a, b)).or_default() += 1;
            *undirected.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    assert!(undirected.values().all(|&c| c <= 2), "non-manifold edge");
    assert!(directed.values().all(|&c| c == 1), "inconsistent orientation");
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ac = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [ab[1] * ac[2] - ab[2] * ac[1], ab[2] * ac[0] - ab[0] * ac[2], ab[0] * ac[1] - ab[1] * ac[0]];
        let n2: f64 = n.iter().map(|v| v * v).sum();
        let t1 = ac.iter().map(|v| v * v).sum::<f64>();
        let t2 = ab.iter().map(|v| v * v).sum::<f64>();
        let nab = [n[1] * ab[2] - n[2] * ab[1], n[2] * ab[0] - n[0] * ab[2], n[0] * ab[1] - n[1] * ab[0]];
        let acn = [ac[1] * n[2] - ac[2] * n[1], ac[2] * n[0] - ac[0] * n[2], ac[0] * n[1] - ac[1] * n[0]];
        let off: Vec<f64> = (0..3).map(|i| (nab[i] * t1 + acn[i] * t2) / (2.0 * n2)).collect();
        let cc = [a[0] + off[0], a[1] + off[1], a[2] + off[2]];
        let r = off.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit = n.map(|v| v / n2.sqrt());
        let ok = radii.iter().filter(|&&rho| r <= rho + 1e-12).any(|&rho| {
            let h = (rho * rho - r * r).max(0.0).sqrt();
            [h, -h].iter().any(|s| {
                let center = [cc[0] + s * unit[0], cc[1] + s * unit[1], cc[2] + s * unit[2]];
                points
                    .iter()
                    .filter(|p| **p != a && **p != b && **p != c)
                    .all(|p| d2(p, &center).sqrt() >= rho - 1e-9)
            })
        });
        assert!(ok, "face {f:?} has no empty ball");
    }
}

#[test]
fn filters_and_sampling_match_brute_force() {
    let mut rng = common::rng(2024);
    for trial in 0..50 {
        let pts = common::random_cloud(&mut rng, 500);
        let pc = cloud(pts.clone());
        let r = rng.random_range(0.05..1.0);
        let m = rng.random_range(1..6);
        assert_eq!(
            sphere_outlier_filter(&pc, r, m).unwrap().points,
            common::brute_sphere_filter(&pts, r, m),
            "sphere trial {trial}"
        );
        let k = rng.random_range(1..12).min(pts.len() - 1);
        let ratio = rng.random_range(0.0..3.0);
        assert_eq!(
            statistical_outlier_filter(&pc, k, ratio).unwrap().points,
            common::brute_statistical_filter(&pts, k, ratio),
            "statistical trial {trial}"
        );
        let radius = rng.random_range(0.02..1.5);
        assert_eq!(poisson_disk_sample(&pc, radius).unwrap().points, common::brute_poisson(&pts, radius), "poisson trial {trial}");
    }
}

#[test]
fn regular_grid_triangulates_fully() {
    for (m, n) in [(2, 2), (3, 5), (10, 10), (7, 23)] {
        let s = 0.1;
        let pts: Vec<[f64; 3]> = (0..m).flat_map(|i| (0..n).map(move |j| [i as f64 * s, j as f64 * s, 0.0])).collect();
        let radii = [0.08];
        let mesh = ball_pivot_mesh(&cloud(pts.clone()), &radii).unwrap();
        assert_eq!(mesh.faces.len(), 2 * (m - 1) * (n - 1), "{m}x{n}");
        assert_mesh_ok(&mesh, &pts, &radii);
    }
}

#[test]
fn extruded_ring_mesh_is_valid() {
    let ring: Vec<[f64; 3]> = (0..120)
        .map(|i| {
            let t = i as f64 / 120.0 * std::f64::consts::TAU;
            [2.0 * t.cos(), 2.0 * t.sin(), 0.0]
        })
        .collect();
    let pc = extrude_2d(&cloud(ring), 0.0, 0.4, 5).unwrap();
    let radii = [0.1, 0.15];
    let mesh = ball_pivot_mesh(&pc, &radii).unwrap();
    assert_mesh_ok(&mesh, &pc.points, &radii);
    // Closed band: two triangles per quad.
    assert_eq!(mesh.faces.len(), 2 * 120 * 4);
    let map = slice_mesh(&mesh, 0.15);
    assert!((map.total_length() - 120.0 * 2.0 * 2.0 * (std::f64::consts::PI / 120.0).sin()).abs() < 1e-9);
}

#[test]
fn unit_cube_slices_to_unit_square() {
    let v: Vec<[f64; 3]> = (0..8).map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]).collect();
    let quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]];
    let faces = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    let mesh = Mesh { vertices: v, faces };
    mesh.validate().unwrap();
    let map = slice_mesh(&mesh, 0.5);
    assert!((map.total_length() - 4.0).abs() < 1e-12);
    for s in map.segments() {
        for p in [s.a, s.b] {
            assert!(p[0].abs() < 1e-12 || (p[0] - 1.0).abs() < 1e-12 || p[1].abs() < 1e-12 || (p[1] - 1.0).abs() < 1e-12);
        }
    }
    assert!(slice_mesh(&mesh, -1.0).is_empty());
}

#[test]
fn full_pipeline_on_oval_is_consistent() {
    let sc = common::oval();
    let params = TwinParams::default();
    let out = build_twin(&sc.cloud, &params).unwrap();
    let counts: Vec<usize> = out.report.iter().map(|r| r.points).collect();
    // input, sphere, statistical never grow; extrude multiplies; Poisson shrinks.
    assert!(counts[1] <= counts[0] && counts[2] <= counts[1]);
    assert_eq!(counts[3], counts[2] * 5);
    assert!(counts[4] <= counts[3]);
    out.mesh.validate().unwrap();
    assert!(!out.map.is_empty());
    let again = build_twin(&sc.cloud, &params).unwrap();
    assert_eq!(again.mesh, out.mesh);
    assert_eq!(again.map.to_json(), out.map.to_json());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn sphere_filter_is_idempotent(seed in 0u64..10_000, r in 0.05f64..1.0, m in 1usize..6) {
        let pts = common::random_cloud(&mut common::rng(seed), 300);
        let once = sphere_outlier_filter(&cloud(pts), r, m).unwrap();
        let twice = sphere_outlier_filter(&once, r, m).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn poisson_output_is_separated_and_maximal(seed in 0u64..10_000, radius in 0.05f64..1.5) {
        let pts = common::random_cloud(&mut common::rng(seed), 300);
        let out = poisson_disk_sample(&cloud(pts.clone()), radius).unwrap().points;
        for i in 0..out.len() {
            for j in (i + 1)..out.len() {
                prop_assert!(d2(&out[i], &out[j]) >= radius * radius);
            }
        }
        for p in &pts {
            prop_assert!(out.iter().any(|q| d2(p, q) < radius * radius || p == q));
        }
    }

    #[test]
    fn stages_never_add_points(seed in 0u64..10_000) {
        let pts = common::random_cloud(&mut common::rng(seed), 300);
        let pc = cloud(pts);
        let a = sphere_outlier_filter(&pc, 0.3, 2).unwrap();
        prop_assert!(a.len() <= pc.len());
        if a.len() > 4 {
            let b = statistical_outlier_filter(&a, 4, 1.0).unwrap();
            prop_assert!(b.len() <= a.len());
            let c = poisson_disk_sample(&b, 0.1).unwrap();
            prop_assert!(c.len() <= b.len());
        }
    }
}

#[test]
fn oval_round_trip_reproduces_ranges() {
    let sc = common::oval();
    let params = TwinParams::default();
    let out = build_twin(&sc.cloud, &params).unwrap();
    let (mae, beams) = common::round_trip_error(&sc, &out.map);
    assert!(beams > 10_000, "{beams}");
    assert!(mae < 2.0 * params.poisson_radius, "{mae}");
}
