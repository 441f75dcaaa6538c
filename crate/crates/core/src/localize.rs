//! Correlative scan matching against a blurred occupancy grid.

use crate::geometry::{wrap_angle, Pose2};
use crate::sensors::Scan;
use crate::twin::TrackMap2D;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error("no returns")]
    NoReturns,
    #[error("invalid grid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Margin added around the map when rasterizing, m.
pub const GRID_MARGIN: f64 = 1.0;

/// Row-major occupancy grid; cell `(ix, iy)` covers
/// `[origin + ix*res, origin + (ix+1)*res)` along x and likewise along y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub resolution: f64,
    pub origin: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub cells: Vec<f64>,
}

impl OccupancyGrid {
    pub fn validate(&self) -> Result<(), LocalizeError> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(LocalizeError::InvalidArgument(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(LocalizeError::InvalidArgument(
                "grid must be at least 1x1".into(),
            ));
        }
        if self.cells.len() != self.width * self.height {
            return Err(LocalizeError::InvalidArgument(format!(
                "expected {} cells, found {}",
                self.width * self.height,
                self.cells.len()
            )));
        }
        if self.cells.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(LocalizeError::InvalidArgument(
                "cell values must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("grid serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LocalizeError> {
        let g: OccupancyGrid = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.cells[iy * self.width + ix]
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let fx = ((p[0] - self.origin[0]) / self.resolution).floor();
        let fy = ((p[1] - self.origin[1]) / self.resolution).floor();
        (fx >= 0.0 && fy >= 0.0 && fx < self.width as f64 && fy < self.height as f64)
            .then_some((fx as usize, fy as usize))
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.cell_of(p).is_some()
    }

    /// Bilinear interpolation between cell centers; zero outside the grid.
    pub fn sample(&self, p: [f64; 2]) -> f64 {
        let gx = (p[0] - self.origin[0]) / self.resolution - 0.5;
        let gy = (p[1] - self.origin[1]) / self.resolution - 0.5;
        let x0 = gx.floor();
        let y0 = gy.floor();
        let (fx, fy) = (gx - x0, gy - y0);
        let at = |ix: f64, iy: f64| -> f64 {
            if ix < 0.0 || iy < 0.0 || ix >= self.width as f64 || iy >= self.height as f64 {
                0.0
            } else {
                self.cells[iy as usize * self.width + ix as usize]
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
        let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Blur radius in cells.
const BLUR_SIGMA: f64 = 1.0;

/// Rasterizes map segments with a 1 m margin. Each cell holds the segments
/// blurred by a Gaussian of sigma one cell, evaluated at the cell center
/// from the exact point-to-segment distance, so the peak of 1 sits on the
/// walls themselves.
pub fn rasterize(map: &TrackMap2D, resolution: f64) -> Result<OccupancyGrid, LocalizeError> {
    if map.is_empty() {
        return Err(LocalizeError::InvalidArgument("cannot rasterize an empty map".into()));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(LocalizeError::InvalidArgument(format!("resolution must be positive, got {resolution}")));
    }
    let b = map.bounds().expanded(GRID_MARGIN);
    let width = ((b.max[0] - b.min[0]) / resolution).ceil() as usize + 1;
    let height = ((b.max[1] - b.min[1]) / resolution).ceil() as usize + 1;
    let mut grid = OccupancyGrid { resolution, origin: b.min, width, height, cells: vec![0.0; width * height] };
    let sigma = BLUR_SIGMA * resolution;
    let reach = 3.0 * sigma;
    let to_cell = |v: f64, o: f64, n: usize| (((v - o) / resolution).floor().max(0.0) as usize).min(n - 1);
    for s in map.segments() {
        let (x0, x1) = (s.a[0].min(s.b[0]) - reach, s.a[0].max(s.b[0]) + reach);
        let (y0, y1) = (s.a[1].min(s.b[1]) - reach, s.a[1].max(s.b[1]) + reach);
        for iy in to_cell(y0, b.min[1], height)..=to_cell(y1, b.min[1], height) {
            for ix in to_cell(x0, b.min[0], width)..=to_cell(x1, b.min[0], width) {
                let c = [
                    b.min[0] + (ix as f64 + 0.5) * resolution,
                    b.min[1] + (iy as f64 + 0.5) * resolution,
                ];
                let d = s.distance_to(c);
                if d <= reach {
                    let v = (-d * d / (2.0 * sigma * sigma)).exp();
                    let cell = &mut grid.cells[iy * width + ix];
                    *cell = cell.max(v);
                }
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Pose2,
    /// Mean occupancy at the projected scan endpoints.
    pub score: f64,
}

/// Search window half-widths and steps per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchWindow {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
    pub steps_xy: usize,
    pub steps_psi: usize,
    /// Use every n-th beam.
    pub beam_stride: usize,
    /// Local refinement rounds after the exhaustive search.
    pub refine_levels: usize,
}

impl Default for SearchWindow {
    fn default() -> Self {
        Self {
            dx: 0.5,
            dy: 0.5,
            dpsi: 0.2,
            steps_xy: 21,
            steps_psi: 21,
            beam_stride: 1,
            refine_levels: 3,
        }
    }
}

impl SearchWindow {
    fn offsets(half: f64, steps: usize) -> Vec<f64> {
        if steps <= 1 {
            return vec![0.0];
        }
        (0..steps)
            .map(|i| -half + 2.0 * half * i as f64 / (steps - 1) as f64)
            .collect()
    }

    pub fn xy_step(&self) -> f64 {
        if self.steps_xy <= 1 {
            0.0
        } else {
            2.0 * self.dx / (self.steps_xy - 1) as f64
        }
    }

    pub fn psi_step(&self) -> f64 {
        if self.steps_psi <= 1 {
            0.0
        } else {
            2.0 * self.dpsi / (self.steps_psi - 1) as f64
        }
    }
}

/// Mean grid value at the scan endpoints for every `(dx, dy, dpsi)` offset
/// around `center`, flattened with dpsi varying fastest.
fn score_lattice(
    local: &[[f64; 2]],
    grid: &OccupancyGrid,
    center: Pose2,
    xs: &[f64],
    ys: &[f64],
    psis: &[f64],
) -> Vec<f64> {
    let rotated: Vec<Vec<[f64; 2]>> = psis
        .iter()
        .map(|dpsi| {
            let (s, c) = (center.psi + dpsi).sin_cos();
            local
                .iter()
                .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
                .collect()
        })
        .collect();
    let n = local.len() as f64;
    let (ny, np) = (ys.len(), psis.len());
    (0..xs.len() * ny * np)
        .into_par_iter()
        .map(|flat| {
            let (ix, rest) = (flat / (ny * np), flat % (ny * np));
            let (iy, ip) = (rest / np, rest % np);
            let tx = center.x + xs[ix];
            let ty = center.y + ys[iy];
            rotated[ip]
                .iter()
                .map(|p| grid.sample([tx + p[0], ty + p[1]]))
                .sum::<f64>()
                / n
        })
        .collect()
}

fn unflatten(flat: usize, ny: usize, np: usize) -> [usize; 3] {
    [flat / (ny * np), (flat % (ny * np)) / np, flat % np]
}

/// Index of the highest score; ties go to the lowest index.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Exhaustive correlative search around `prior`, followed by
/// `refine_levels` rounds of local search at half the previous step around
/// the best candidate. Ties in the exhaustive stage go to the lowest lattice
/// index (`dpsi` fastest, then `dy`, `dx`); a refinement round only moves on
/// a strict improvement.
pub fn match_scan(
    scan: &Scan,
    grid: &OccupancyGrid,
    prior: Pose2,
    window: &SearchWindow,
) -> Result<PoseEstimate, LocalizeError> {
    if !grid.contains(prior.position()) {
        return Err(LocalizeError::InvalidArgument(format!(
            "prior ({}, {}) lies outside the grid",
            prior.x, prior.y
        )));
    }
    let stride = window.beam_stride.max(1);
    let local: Vec<[f64; 2]> = scan
        .returns()
        .enumerate()
        .filter(|(i, _)| i % stride == 0)
        .map(|(_, (angle, r))| {
            let (s, c) = angle.sin_cos();
            [scan.mount_offset[0] + r * c, scan.mount_offset[1] + r * s]
        })
        .collect();
    if local.is_empty() {
        return Err(LocalizeError::NoReturns);
    }
    let xs = SearchWindow::offsets(window.dx, window.steps_xy);
    let ys = SearchWindow::offsets(window.dy, window.steps_xy);
    let psis = SearchWindow::offsets(window.dpsi, window.steps_psi);
    let scores = score_lattice(&local, grid, prior, &xs, &ys, &psis);
    let (ny, np) = (ys.len(), psis.len());
    let flat = argmax(&scores);
    let [ix, iy, ip] = unflatten(flat, ny, np);
    let (off, score) = refine(&local, grid, prior, window, [xs[ix], ys[iy], psis[ip]], scores[flat]);
    Ok(PoseEstimate {
        pose: Pose2::new(prior.x + off[0], prior.y + off[1], wrap_angle(prior.psi + off[2])),
        score,
    })
}

fn refine(
    local: &[[f64; 2]],
    grid: &OccupancyGrid,
    prior: Pose2,
    window: &SearchWindow,
    mut off: [f64; 3],
    mut score: f64,
) -> ([f64; 3], f64) {
    let (mut sxy, mut spsi) = (window.xy_step(), window.psi_step());
    for _ in 0..window.refine_levels {
        let cx = [-sxy, -sxy / 2.0, 0.0, sxy / 2.0, sxy];
        let cpsi = [-spsi, -spsi / 2.0, 0.0, spsi / 2.0, spsi];
        sxy /= 2.0;
        spsi /= 2.0;
        let keep = |d: &[f64], c: f64, half: f64| -> Vec<f64> {
            d.iter().copied().filter(|o| (c + o).abs() <= half + 1e-12).collect()
        };
        let (dxs, dys, dps) = (
            keep(&cx, off[0], window.dx),
            keep(&cx, off[1], window.dy),
            keep(&cpsi, off[2], window.dpsi),
        );
        let center = Pose2::new(prior.x + off[0], prior.y + off[1], prior.psi + off[2]);
        let scores = score_lattice(local, grid, center, &dxs, &dys, &dps);
        let b = argmax(&scores);
        if scores[b] > score {
            let [ix, iy, ip] = unflatten(b, dys.len(), dps.len());
            off = [off[0] + dxs[ix], off[1] + dys[iy], off[2] + dps[ip]];
            score = scores[b];
        }
    }
    (off, score)
}
