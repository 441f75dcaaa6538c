//! Digital-twin pipeline: raw point cloud to filtered cloud, simplified cloud,
//! ball-pivoting mesh and finally a 2D track map sliced at scanner height.

use crate::geometry::{Aabb2, Segment2};
use crate::spatial::{dist2, HashGrid};
use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<TwinError>,
    },
}

fn parse_err(line: usize, msg: impl Into<String>) -> TwinError {
    TwinError::Parse {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn subset(&self, keep: &[bool]) -> PointCloud {
        PointCloud::new(
            self.points
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(p, _)| *p)
                .collect(),
        )
    }

    pub fn to_xyz(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 32);
        for p in &self.points {
            s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
        }
        s
    }

    pub fn to_ascii_ply(&self) -> String {
        let mut s = format!(
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
            self.points.len()
        );
        s.push_str(&self.to_xyz());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloudFormat {
    #[serde(rename = "ascii-ply")]
    AsciiPly,
    #[serde(rename = "xyz-text")]
    XyzText,
}

impl CloudFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ply" => Some(Self::AsciiPly),
            "xyz" | "txt" => Some(Self::XyzText),
            _ => None,
        }
    }
}

fn parse_coord(tok: &str, line: usize) -> Result<f64, TwinError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("invalid number {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

/// Parses whitespace-separated `x y z` rows. Blank lines and `#` comments
/// are skipped; extra columns after z are ignored.
pub fn parse_xyz(text: &str) -> Result<PointCloud, TwinError> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(
                i + 1,
                format!("expected 3 coordinates, found {}", toks.len()),
            ));
        }
        points.push([
            parse_coord(toks[0], i + 1)?,
            parse_coord(toks[1], i + 1)?,
            parse_coord(toks[2], i + 1)?,
        ]);
    }
    Ok(PointCloud::new(points))
}

/// Parses an ASCII PLY file whose only element is `vertex` with float
/// `x`, `y`, `z` properties (in any order).
pub fn parse_ascii_ply(text: &str) -> Result<PointCloud, TwinError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(parse_err(n, "missing 'ply' magic")),
        None => return Err(parse_err(1, "empty file")),
    }
    let mut format_seen = false;
    let mut count: Option<usize> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut header_done = false;
    let mut last_line = 1;
    for (n, line) in lines.by_ref() {
        last_line = n;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", "1.0"] => format_seen = true,
            ["format", other, ..] => {
                return Err(parse_err(n, format!("unsupported format {other:?}")))
            }
            ["element", "vertex", c] => {
                if count.is_some() {
                    return Err(parse_err(n, "duplicate vertex element"));
                }
                count = Some(
                    c.parse()
                        .map_err(|_| parse_err(n, format!("invalid vertex count {c:?}")))?,
                );
            }
            ["element", name, ..] => {
                return Err(parse_err(n, format!("unsupported element {name:?}")))
            }
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(parse_err(n, "property before element"));
                }
                if !matches!(*ty, "float" | "double" | "float32" | "float64") {
                    return Err(parse_err(n, format!("unsupported property type {ty:?}")));
                }
                let axis = match *name {
                    "x" => 0,
                    "y" => 1,
                    "z" => 2,
                    _ => return Err(parse_err(n, format!("unsupported property {name:?}"))),
                };
                if order.contains(&axis) {
                    return Err(parse_err(n, format!("duplicate property {name:?}")));
                }
                order.push(axis);
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(n, format!("unrecognized header line {line:?}"))),
        }
    }
    if !header_done {
        return Err(parse_err(last_line, "missing end_header"));
    }
    if !format_seen {
        return Err(parse_err(last_line, "missing 'format ascii 1.0'"));
    }
    let count = count.ok_or_else(|| parse_err(last_line, "missing 'element vertex'"))?;
    if order.len() != 3 {
        return Err(parse_err(
            last_line,
            "vertex element needs x, y and z properties",
        ));
    }
    let mut points = Vec::with_capacity(count.min(1 << 20));
    for (n, line) in lines {
        last_line = n;
        if line.is_empty() {
            continue;
        }
        if points.len() == count {
            return Err(parse_err(n, "more vertex rows than declared"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(
                n,
                format!("expected 3 values, found {}", toks.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (tok, &axis) in toks.iter().zip(&order) {
            p[axis] = parse_coord(tok, n)?;
        }
        points.push(p);
    }
    if points.len() != count {
        return Err(parse_err(
            last_line,
            format!("declared {count} vertices, found {}", points.len()),
        ));
    }
    Ok(PointCloud::new(points))
}

pub fn load_pointcloud(path: &Path, format: CloudFormat) -> Result<PointCloud, TwinError> {
    let text = std::fs::read_to_string(path).map_err(|source| TwinError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        CloudFormat::AsciiPly => parse_ascii_ply(&text),
        CloudFormat::XyzText => parse_xyz(&text),
    }
}

/// Keeps the largest subset in which every point has at least `m_min` other
/// retained points within distance `r`. Points failing the count are peeled
/// off and their neighbours re-checked until the set is stable.
pub fn sphere_outlier_filter(
    pc: &PointCloud,
    r: f64,
    m_min: usize,
) -> Result<PointCloud, TwinError> {
    if !(r > 0.0) || m_min < 1 {
        return Err(TwinError::InvalidArgument(format!(
            "sphere filter needs r > 0 and m_min >= 1, got r={r}, m_min={m_min}"
        )));
    }
    let grid = HashGrid::new(&pc.points, r);
    let r2 = r * r;
    let neighbours = |i: usize, f: &mut dyn FnMut(usize)| {
        let p = &pc.points[i];
        grid.for_each_candidate(p, r, |j| {
            if j as usize != i && dist2(&pc.points[j as usize], p) <= r2 {
                f(j as usize);
            }
        });
    };
    let mut count: Vec<usize> = (0..pc.len())
        .into_par_iter()
        .map(|i| {
            let mut n = 0usize;
            neighbours(i, &mut |_| n += 1);
            n
        })
        .collect();
    let mut keep: Vec<bool> = count.iter().map(|&n| n >= m_min).collect();
    let mut queue: Vec<usize> = (0..pc.len()).filter(|&i| !keep[i]).collect();
    while let Some(i) = queue.pop() {
        neighbours(i, &mut |j| {
            if keep[j] {
                count[j] -= 1;
                if count[j] < m_min {
                    keep[j] = false;
                    queue.push(j);
                }
            }
        });
    }
    Ok(pc.subset(&keep))
}

/// Mean distance from each point to its `k` nearest neighbours, summing the
/// sorted distances in ascending order.
pub fn knn_mean_distances(pc: &PointCloud, k: usize) -> Vec<f64> {
    let grid = HashGrid::new(&pc.points, HashGrid::cell_for_density(&pc.points, k.max(4)));
    pc.points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = grid.knn(&pc.points, p, k, Some(i as u32));
            nn.iter().map(|(d2, _)| d2.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

/// Removes points whose mean k-NN distance exceeds `mu + std_ratio * sigma`
/// of all per-point means (population standard deviation).
pub fn statistical_outlier_filter(
    pc: &PointCloud,
    k: usize,
    std_ratio: f64,
) -> Result<PointCloud, TwinError> {
    if k < 1 || pc.len() <= k {
        return Err(TwinError::InvalidArgument(format!(
            "statistical filter needs k >= 1 and more than k points, got k={k} with {} points",
            pc.len()
        )));
    }
    let means = knn_mean_distances(pc, k);
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    let sigma = (means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n).sqrt();
    let threshold = mu + std_ratio * sigma;
    let keep: Vec<bool> = means.iter().map(|m| *m <= threshold).collect();
    Ok(pc.subset(&keep))
}

/// Replicates every point over `layers` evenly spaced heights in
/// `[z_min, z_max]`. Output is layer-major.
pub fn extrude_2d(
    pc: &PointCloud,
    z_min: f64,
    z_max: f64,
    layers: usize,
) -> Result<PointCloud, TwinError> {
    if layers < 1 || !(z_min <= z_max) {
        return Err(TwinError::InvalidArgument(format!(
            "extrusion needs layers >= 1 and z_min <= z_max, got {layers} layers over [{z_min}, {z_max}]"
        )));
    }
    let mut points = Vec::with_capacity(pc.len() * layers);
    for l in 0..layers {
        let z = if layers == 1 {
            z_min
        } else {
            z_min + l as f64 * (z_max - z_min) / (layers - 1) as f64
        };
        points.extend(pc.points.iter().map(|p| [p[0], p[1], z]));
    }
    Ok(PointCloud::new(points))
}

/// Greedy sample elimination in input order: a point is kept iff no
/// previously kept point lies closer than `radius`.
pub fn poisson_disk_sample(pc: &PointCloud, radius: f64) -> Result<PointCloud, TwinError> {
    if !(radius > 0.0) {
        return Err(TwinError::InvalidArgument(format!(
            "poisson radius must be positive, got {radius}"
        )));
    }
    let r2 = radius * radius;
    let mut kept: Vec<[f64; 3]> = Vec::new();
    let mut grid = HashGrid::new(&[], radius);
    for p in &pc.points {
        let mut blocked = false;
        grid.for_each_candidate(p, radius, |j| {
            if !blocked && dist2(&kept[j as usize], p) < r2 {
                blocked = true;
            }
        });
        if !blocked {
            grid.insert(kept.len() as u32, p);
            kept.push(*p);
        }
    }
    Ok(PointCloud::new(kept))
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

pub const MIN_FACE_AREA: f64 = 1e-12;

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn scale3(a: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn triangle_area(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    0.5 * norm3(&cross3(&sub3(b, a), &sub3(c, a)))
}

impl Mesh {
    /// Checks index bounds, repeated vertices and face area.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.vertices.len();
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i as usize >= n) {
                return Err(format!("face {f} has an out-of-range index"));
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(format!("face {f} repeats a vertex"));
            }
            let [a, b, c] = face.map(|i| self.vertices[i as usize]);
            if triangle_area(&a, &b, &c) <= MIN_FACE_AREA {
                return Err(format!("face {f} has zero area"));
            }
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite vertex".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mesh serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TwinError> {
        let mesh: Mesh = serde_json::from_str(text)?;
        mesh.validate().map_err(TwinError::InvalidArgument)?;
        Ok(mesh)
    }
}

/// Unit normals from PCA over the `k` nearest neighbours, oriented away
/// from the cloud's 2D centroid. Normals with no horizontal component
/// relative to that direction point up instead.
pub fn estimate_normals(points: &[[f64; 3]], k: usize) -> Vec<[f64; 3]> {
    if points.is_empty() {
        return Vec::new();
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let grid = HashGrid::new(points, HashGrid::cell_for_density(points, k.max(4)));
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut nb: Vec<[f64; 3]> = grid
                .knn(points, p, k, Some(i as u32))
                .into_iter()
                .map(|(_, j)| points[j as usize])
                .collect();
            nb.push(*p);
            let m = nb.len() as f64;
            let mean = nb.iter().fold([0.0; 3], |acc, q| add3(&acc, q));
            let mean = scale3(&mean, 1.0 / m);
            let mut cov = Matrix3::<f64>::zeros();
            for q in &nb {
                let d = sub3(q, &mean);
                for r in 0..3 {
                    for c in 0..3 {
                        cov[(r, c)] += d[r] * d[c];
                    }
                }
            }
            let eig = SymmetricEigen::new(cov);
            let idx = eig.eigenvalues.imin();
            let v = eig.eigenvectors.column(idx);
            let mut normal = [v[0], v[1], v[2]];
            let len = norm3(&normal);
            normal = scale3(&normal, 1.0 / len);
            let out = [p[0] - cx, p[1] - cy];
            let along = normal[0] * out[0] + normal[1] * out[1];
            let out_len = out[0].hypot(out[1]);
            let flip = if along.abs() > 1e-6 * out_len.max(1e-12) {
                along < 0.0
            } else {
                normal[2] < 0.0
            };
            if flip {
                normal = scale3(&normal, -1.0);
            }
            normal
        })
        .collect()
}

fn circumcenter(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> Option<([f64; 3], f64)> {
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let n = cross3(&ab, &ac);
    let n2 = dot3(&n, &n);
    if n2 == 0.0 {
        return None;
    }
    let t1 = scale3(&cross3(&n, &ab), dot3(&ac, &ac));
    let t2 = scale3(&cross3(&ac, &n), dot3(&ab, &ab));
    let off = scale3(&add3(&t1, &t2), 1.0 / (2.0 * n2));
    Some((add3(a, &off), norm3(&off)))
}

/// Tolerance for treating a point as on (not inside) the pivoting ball.
const BALL_TOL: f64 = 1e-10;

#[derive(Clone, Copy)]
struct FrontEdge {
    i: u32,
    j: u32,
    opposite: u32,
    center: [f64; 3],
}

struct Pivoter<'a> {
    points: &'a [[f64; 3]],
    normals: &'a [[f64; 3]],
    grid: HashGrid,
    used: Vec<bool>,
    faces: Vec<[u32; 3]>,
    edge_faces: HashMap<(u32, u32), Vec<u32>>,
    directed: HashSet<(u32, u32)>,
    boundary_degree: Vec<u32>,
}

fn ukey(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl<'a> Pivoter<'a> {
    fn new(points: &'a [[f64; 3]], normals: &'a [[f64; 3]], max_radius: f64) -> Self {
        Self {
            points,
            normals,
            grid: HashGrid::new(points, 2.0 * max_radius),
            used: vec![false; points.len()],
            faces: Vec::new(),
            edge_faces: HashMap::new(),
            directed: HashSet::new(),
            boundary_degree: vec![0; points.len()],
        }
    }

    fn p(&self, i: u32) -> &[f64; 3] {
        &self.points[i as usize]
    }

    fn edge_count(&self, a: u32, b: u32) -> usize {
        self.edge_faces.get(&ukey(a, b)).map_or(0, Vec::len)
    }

    /// Ball center on the normal side of the oriented triangle, if the
    /// triangle is valid for a ball of radius `rho`.
    fn ball_center(&self, tri: [u32; 3], rho: f64) -> Option<[f64; 3]> {
        let [a, b, c] = tri.map(|i| *self.p(i));
        if triangle_area(&a, &b, &c) <= MIN_FACE_AREA {
            return None;
        }
        let n = cross3(&sub3(&b, &a), &sub3(&c, &a));
        let n = scale3(&n, 1.0 / norm3(&n));
        if tri
            .iter()
            .any(|&v| dot3(&n, &self.normals[v as usize]) <= 0.0)
        {
            return None;
        }
        let (cc, r) = circumcenter(&a, &b, &c)?;
        if r > rho {
            return None;
        }
        let h = (rho * rho - r * r).max(0.0).sqrt();
        Some(add3(&cc, &scale3(&n, h)))
    }

    fn ball_empty(&self, center: &[f64; 3], rho: f64, tri: [u32; 3]) -> bool {
        let lim = (rho - BALL_TOL) * (rho - BALL_TOL);
        let mut empty = true;
        self.grid.for_each_candidate(center, rho, |q| {
            if empty && !tri.contains(&q) && dist2(self.p(q), center) < lim {
                empty = false;
            }
        });
        empty
    }

    fn face_normal(&self, f: [u32; 3]) -> [f64; 3] {
        let [a, b, c] = f.map(|i| *self.p(i));
        let n = cross3(&sub3(&b, &a), &sub3(&c, &a));
        scale3(&n, 1.0 / norm3(&n))
    }

    /// Topological checks for adding oriented face `f`.
    fn can_add(&self, f: [u32; 3]) -> bool {
        let n_new = self.face_normal(f);
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            if self.directed.contains(&(a, b)) {
                return false;
            }
            if let Some(adj) = self.edge_faces.get(&ukey(a, b)) {
                if adj.len() >= 2 {
                    return false;
                }
                for &g in adj {
                    if dot3(&n_new, &self.face_normal(self.faces[g as usize])) < -0.9 {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn add_face(&mut self, f: [u32; 3]) {
        let id = self.faces.len() as u32;
        self.faces.push(f);
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            self.directed.insert((a, b));
            let adj = self.edge_faces.entry(ukey(a, b)).or_default();
            adj.push(id);
            if adj.len() == 1 {
                self.boundary_degree[a as usize] += 1;
                self.boundary_degree[b as usize] += 1;
            } else {
                self.boundary_degree[a as usize] -= 1;
                self.boundary_degree[b as usize] -= 1;
            }
        }
        for &v in &f {
            self.used[v as usize] = true;
        }
    }

    fn push_new_edges(&self, f: [u32; 3], center: [f64; 3], front: &mut VecDeque<FrontEdge>) {
        for e in 0..3 {
            let (i, j, o) = (f[e], f[(e + 1) % 3], f[(e + 2) % 3]);
            if self.edge_count(i, j) == 1 {
                front.push_back(FrontEdge {
                    i,
                    j,
                    opposite: o,
                    center,
                });
            }
        }
    }

    /// Rolls the ball over directed edge `i -> j` and returns the first
    /// admissible triangle it lands on.
    fn pivot(&self, edge: &FrontEdge, rho: f64) -> Option<([u32; 3], [f64; 3])> {
        let (pi, pj) = (self.p(edge.i), self.p(edge.j));
        let m = scale3(&add3(pi, pj), 0.5);
        let axis = sub3(pj, pi);
        let axis = scale3(&axis, 1.0 / norm3(&axis));
        let a = sub3(&edge.center, &m);
        let mut cands: Vec<(f64, u32, [f64; 3])> = Vec::new();
        let reach = 2.0 * rho;
        let reach2 = reach * reach;
        self.grid.for_each_candidate(&m, reach, |k| {
            if k == edge.i || k == edge.j || k == edge.opposite {
                return;
            }
            if dist2(self.p(k), &m) > reach2 {
                return;
            }
            if self.used[k as usize] && self.boundary_degree[k as usize] == 0 {
                return;
            }
            let tri = [edge.j, edge.i, k];
            let Some(c) = self.ball_center(tri, rho) else {
                return;
            };
            let b = sub3(&c, &m);
            let mut theta = dot3(&cross3(&a, &b), &axis).atan2(dot3(&a, &b));
            if theta < 0.0 {
                theta += std::f64::consts::TAU;
            }
            if theta > std::f64::consts::TAU - 1e-9 {
                theta = 0.0;
            }
            cands.push((theta, k, c));
        });
        cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        cands.into_iter().find_map(|(_, k, c)| {
            let tri = [edge.j, edge.i, k];
            (self.ball_empty(&c, rho, tri) && self.can_add(tri)).then_some((tri, c))
        })
    }

    fn find_seed(&self, v: u32, rho: f64) -> Option<([u32; 3], [f64; 3])> {
        const MAX_SEED_NEIGHBORS: usize = 16;
        let p = *self.p(v);
        let mut nb: Vec<(f64, u32)> = self
            .grid
            .within(self.points, &p, 2.0 * rho)
            .into_iter()
            .filter(|&q| q != v && !self.used[q as usize])
            .map(|q| (dist2(self.p(q), &p), q))
            .collect();
        nb.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        nb.truncate(MAX_SEED_NEIGHBORS);
        for x in 0..nb.len() {
            for y in (x + 1)..nb.len() {
                let (a, b) = (nb[x].1, nb[y].1);
                if dist2(self.p(a), self.p(b)) > 4.0 * rho * rho {
                    continue;
                }
                for tri in [[v, a, b], [v, b, a]] {
                    if let Some(c) = self.ball_center(tri, rho) {
                        if self.ball_empty(&c, rho, tri) && self.can_add(tri) {
                            return Some((tri, c));
                        }
                    }
                }
            }
        }
        None
    }

    fn expand(&mut self, front: &mut VecDeque<FrontEdge>, rho: f64) {
        while let Some(edge) = front.pop_front() {
            if self.edge_count(edge.i, edge.j) != 1 || !self.directed.contains(&(edge.i, edge.j)) {
                continue;
            }
            if let Some((tri, c)) = self.pivot(&edge, rho) {
                self.add_face(tri);
                self.push_new_edges(tri, c, front);
            }
        }
    }

    fn run_radius(&mut self, rho: f64) {
        let mut front = VecDeque::new();
        // Re-pivot the boundary left by smaller radii.
        let mut open: Vec<(u32, u32)> = Vec::new();
        for (f, face) in self.faces.iter().enumerate() {
            for e in 0..3 {
                let (i, j) = (face[e], face[(e + 1) % 3]);
                if self.edge_count(i, j) == 1 {
                    open.push((f as u32, e as u32));
                }
            }
        }
        for (f, e) in open {
            let face = self.faces[f as usize];
            let e = e as usize;
            if let Some(center) = self.ball_center(face, rho) {
                front.push_back(FrontEdge {
                    i: face[e],
                    j: face[(e + 1) % 3],
                    opposite: face[(e + 2) % 3],
                    center,
                });
            }
        }
        self.expand(&mut front, rho);
        for v in 0..self.points.len() as u32 {
            if self.used[v as usize] {
                continue;
            }
            if let Some((tri, c)) = self.find_seed(v, rho) {
                self.add_face(tri);
                self.push_new_edges(tri, c, &mut front);
                self.expand(&mut front, rho);
            }
        }
    }
}

/// Ball-pivoting surface reconstruction with normals from `normal_k`-NN PCA.
/// Radii are processed smallest first.
pub fn ball_pivot_mesh(pc: &PointCloud, radii: &[f64]) -> Result<Mesh, TwinError> {
    ball_pivot_mesh_with(pc, radii, 10)
}

pub fn ball_pivot_mesh_with(
    pc: &PointCloud,
    radii: &[f64],
    normal_k: usize,
) -> Result<Mesh, TwinError> {
    if pc.len() < 3 {
        return Err(TwinError::InvalidArgument(format!(
            "ball pivoting needs at least 3 points, got {}",
            pc.len()
        )));
    }
    if radii.is_empty()
        || radii.iter().any(|r| !(*r > 0.0))
        || radii.windows(2).any(|w| w[0] > w[1])
    {
        return Err(TwinError::InvalidArgument(
            "ball radii must be positive and ascending".into(),
        ));
    }
    let normals = estimate_normals(&pc.points, normal_k.min(pc.len() - 1));
    let mut pivoter = Pivoter::new(&pc.points, &normals, *radii.last().unwrap());
    for &rho in radii {
        pivoter.run_radius(rho);
    }
    if pivoter.faces.is_empty() {
        log::warn!("ball pivoting found no seed triangle; radii may be too small");
    }
    Ok(Mesh {
        vertices: pc.points.clone(),
        faces: pivoter.faces,
    })
}

/// Raycastable 2D track geometry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackMap2D {
    segments: Vec<Segment2>,
    bounds: Option<Aabb2>,
}

#[derive(Serialize, Deserialize)]
struct TrackMapFile {
    segments: Vec<[[f64; 2]; 2]>,
}

impl TrackMap2D {
    pub fn new(segments: Vec<Segment2>) -> Self {
        let mut b = Aabb2::empty();
        for s in &segments {
            b.include(s.a);
            b.include(s.b);
        }
        let bounds = (!segments.is_empty()).then_some(b);
        Self { segments, bounds }
    }

    /// Closed polygon through `points`.
    pub fn polygon(points: &[[f64; 2]]) -> Self {
        let n = points.len();
        Self::new(
            (0..n)
                .map(|i| Segment2::new(points[i], points[(i + 1) % n]))
                .collect(),
        )
    }

    pub fn merged(maps: &[TrackMap2D]) -> Self {
        Self::new(
            maps.iter()
                .flat_map(|m| m.segments.iter().copied())
                .collect(),
        )
    }

    pub fn segments(&self) -> &[Segment2] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Bounding box; a degenerate box at the origin for an empty map.
    pub fn bounds(&self) -> Aabb2 {
        self.bounds.unwrap_or(Aabb2 {
            min: [0.0, 0.0],
            max: [0.0, 0.0],
        })
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(Segment2::length).sum()
    }

    pub fn to_json(&self) -> String {
        let file = TrackMapFile {
            segments: self.segments.iter().map(|s| [s.a, s.b]).collect(),
        };
        serde_json::to_string(&file).expect("map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TwinError> {
        let file: TrackMapFile = serde_json::from_str(text)?;
        if file
            .segments
            .iter()
            .flatten()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(TwinError::InvalidArgument(
                "non-finite segment coordinate".into(),
            ));
        }
        Ok(Self::new(
            file.segments
                .into_iter()
                .map(|[a, b]| Segment2::new(a, b))
                .collect(),
        ))
    }
}

/// Intersects every face with the plane `z = const`.
pub fn slice_mesh(mesh: &Mesh, z: f64) -> TrackMap2D {
    let mut segments = Vec::new();
    for face in &mesh.faces {
        let v = face.map(|i| mesh.vertices[i as usize]);
        let d = v.map(|p| p[2] - z);
        let above = d.map(|x| x >= 0.0);
        if above[0] == above[1] && above[1] == above[2] {
            continue;
        }
        let mut pts = Vec::with_capacity(2);
        for e in 0..3 {
            let (a, b) = (e, (e + 1) % 3);
            if above[a] != above[b] {
                let t = d[a] / (d[a] - d[b]);
                pts.push([
                    v[a][0] + t * (v[b][0] - v[a][0]),
                    v[a][1] + t * (v[b][1] - v[a][1]),
                ]);
            }
        }
        let s = Segment2::new(pts[0], pts[1]);
        if s.length() > 1e-12 {
            segments.push(s);
        }
    }
    if segments.is_empty() {
        log::warn!("slice at z={z} produced no segments");
    }
    TrackMap2D::new(segments)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereFilterParams {
    pub r: f64,
    pub m_min: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticalFilterParams {
    pub k: usize,
    pub std_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrudeParams {
    pub z_min: f64,
    pub z_max: f64,
    pub layers: usize,
}

impl Default for ExtrudeParams {
    fn default() -> Self {
        Self {
            z_min: 0.0,
            z_max: 0.5,
            layers: 5,
        }
    }
}

/// Parameters of the whole cloud-to-map pipeline. Filters run sphere
/// first, then statistical; either may be disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinParams {
    pub sphere_filter: Option<SphereFilterParams>,
    pub statistical_filter: Option<StatisticalFilterParams>,
    pub extrude: Option<ExtrudeParams>,
    pub poisson_radius: f64,
    pub ball_radii: Vec<f64>,
    pub normal_k: usize,
    pub slice_z: f64,
}

impl Default for TwinParams {
    fn default() -> Self {
        Self {
            sphere_filter: Some(SphereFilterParams { r: 0.1, m_min: 2 }),
            statistical_filter: Some(StatisticalFilterParams {
                k: 8,
                std_ratio: 2.0,
            }),
            extrude: Some(ExtrudeParams::default()),
            poisson_radius: 0.05,
            ball_radii: vec![0.1, 0.15, 0.2],
            normal_k: 10,
            slice_z: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faces: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TwinOutput {
    pub report: Vec<StageReport>,
    pub mesh: Mesh,
    pub map: TrackMap2D,
}

fn stage<T>(name: &'static str, r: Result<T, TwinError>) -> Result<T, TwinError> {
    r.map_err(|e| TwinError::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn points_report(name: &str, pc: &PointCloud) -> StageReport {
    StageReport {
        stage: name.into(),
        points: pc.len(),
        faces: None,
        segments: None,
    }
}

pub fn build_twin(cloud: &PointCloud, params: &TwinParams) -> Result<TwinOutput, TwinError> {
    let mut report = vec![points_report("input", cloud)];
    let mut pc = cloud.clone();
    if let Some(p) = params.sphere_filter {
        pc = stage("sphere_filter", sphere_outlier_filter(&pc, p.r, p.m_min))?;
        report.push(points_report("sphere_filter", &pc));
    }
    if let Some(p) = params.statistical_filter {
        pc = stage(
            "statistical_filter",
            statistical_outlier_filter(&pc, p.k, p.std_ratio),
        )?;
        report.push(points_report("statistical_filter", &pc));
    }
    if let Some(p) = params.extrude {
        pc = stage("extrude", extrude_2d(&pc, p.z_min, p.z_max, p.layers))?;
        report.push(points_report("extrude", &pc));
    }
    pc = stage(
        "poisson_disk",
        poisson_disk_sample(&pc, params.poisson_radius),
    )?;
    report.push(points_report("poisson_disk", &pc));
    let mesh = stage(
        "ball_pivot",
        ball_pivot_mesh_with(&pc, &params.ball_radii, params.normal_k),
    )?;
    report.push(StageReport {
        stage: "ball_pivot".into(),
        points: mesh.vertices.len(),
        faces: Some(mesh.faces.len()),
        segments: None,
    });
    let map = slice_mesh(&mesh, params.slice_z);
    report.push(StageReport {
        stage: "slice".into(),
        points: 0,
        faces: None,
        segments: Some(map.segments().len()),
    });
    Ok(TwinOutput { report, mesh, map })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_parsing() {
        let pc = parse_xyz("0 0 0\n1 2 3\n# comment\n\n4 5 6\n").unwrap();
        assert_eq!(pc.len(), 3);
        match parse_xyz("0 0 0\n1.0 2.0\n") {
            Err(TwinError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_xyz("1 2 nan\n").is_err());
    }

    #[test]
    fn ply_parsing() {
        let pc = PointCloud::new((0..5).map(|i| [i as f64, 0.5, -1.0]).collect());
        let back = parse_ascii_ply(&pc.to_ascii_ply()).unwrap();
        assert_eq!(back, pc);

        let reordered = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 1\nproperty double z\nproperty float x\nproperty float y\nend_header\n3 1 2\n";
        assert_eq!(
            parse_ascii_ply(reordered).unwrap().points,
            vec![[1.0, 2.0, 3.0]]
        );

        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        assert!(parse_ascii_ply(short).is_err());
        let binary = "ply\nformat binary_little_endian 1.0\nend_header\n";
        match parse_ascii_ply(binary) {
            Err(TwinError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sphere_filter_examples() {
        let lone = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        assert!(sphere_outlier_filter(&lone, 1.0, 1).unwrap().is_empty());
        let cluster = PointCloud::new(
            (0..100)
                .map(|i| [(i % 10) as f64 * 0.01, (i / 10) as f64 * 0.01, 0.0])
                .collect(),
        );
        assert_eq!(sphere_outlier_filter(&cluster, 1.0, 3).unwrap().len(), 100);
    }

    #[test]
    fn statistical_filter_examples() {
        let grid = PointCloud::new(
            (0..100)
                .map(|i| [(i % 10) as f64, (i / 10) as f64, 0.0])
                .collect(),
        );
        let mut with_stray = grid.clone();
        with_stray.points.push([100.0, 100.0, 0.0]);
        let out = statistical_outlier_filter(&with_stray, 4, 2.0).unwrap();
        assert!(!out.points.contains(&[100.0, 100.0, 0.0]));

        let pair = PointCloud::new(vec![[0.0, 0.0, 0.0], [50.0, 0.0, 0.0]]);
        assert_eq!(statistical_outlier_filter(&pair, 1, 0.0).unwrap().len(), 2);
        assert!(statistical_outlier_filter(&pair, 2, 1.0).is_err());
    }

    #[test]
    fn extrusion_examples() {
        let pc = PointCloud::new((0..7).map(|i| [i as f64, 1.0, 9.0]).collect());
        assert_eq!(extrude_2d(&pc, 0.0, 0.5, 5).unwrap().len(), 35);
        let flat = extrude_2d(&pc, 0.0, 1.0, 1).unwrap();
        assert!(flat
            .points
            .iter()
            .zip(&pc.points)
            .all(|(a, b)| a[0] == b[0] && a[1] == b[1] && a[2] == 0.0));
        let three = extrude_2d(&PointCloud::new(vec![[0.0; 3]]), 0.0, 1.0, 3).unwrap();
        assert_eq!(
            three.points.iter().map(|p| p[2]).collect::<Vec<_>>(),
            vec![0.0, 0.5, 1.0]
        );
    }

    #[test]
    fn poisson_examples() {
        let two = PointCloud::new(vec![[0.0; 3], [0.1, 0.0, 0.0]]);
        assert_eq!(poisson_disk_sample(&two, 0.5).unwrap().len(), 1);
        let spread = PointCloud::new((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
        assert_eq!(poisson_disk_sample(&spread, 1.0).unwrap().len(), 10);
    }

    #[test]
    fn single_triangle_mesh() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let mesh = ball_pivot_mesh(&pc, &[1.0]).unwrap();
        assert_eq!(mesh.faces.len(), 1);
        mesh.validate().unwrap();
    }

    #[test]
    fn too_small_radius_gives_empty_mesh() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(ball_pivot_mesh(&pc, &[0.1]).unwrap().faces.is_empty());
    }

    #[test]
    fn slice_single_triangle() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]],
            faces: vec![[0, 1, 2]],
        };
        let map = slice_mesh(&mesh, 0.5);
        assert_eq!(map.segments().len(), 1);
        let s = map.segments()[0];
        let mut ends = [s.a, s.b];
        ends.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((ends[0][0]).abs() < 1e-12 && (ends[0][1] - 0.5).abs() < 1e-12);
        assert!((ends[1][0] - 0.5).abs() < 1e-12 && ends[1][1].abs() < 1e-12);
        assert!(slice_mesh(&mesh, -1.0).is_empty());
    }

    #[test]
    fn map_json_round_trip() {
        let map = TrackMap2D::polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 2.0]]);
        let back = TrackMap2D::from_json(&map.to_json()).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.bounds().max, [1.0, 2.0]);
    }
}
