//! Sim-to-real metrics: run logs, lap segmentation, lateral deviation,
//! gap deltas and pose RMSE.

use crate::bridge::ScanPayload;
use crate::dynamics::{ControlInput, VehicleState};
use crate::geometry::{dot, norm, sub, wrap_angle, Pose2, Segment2};
use crate::localize::PoseEstimate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    InvalidArgument(String),
}

/// One tick of a run: state at the tick and the command applied from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub tick: u64,
    pub time: f64,
    pub ground_truth: VehicleState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<PoseEstimate>,
    pub cmd: ControlInput,
    /// Pose the client reset the ego to at this tick.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reset: Option<Pose2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanPayload>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub collision: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log records serialize"));
            s.push('\n');
        }
        s
    }

    /// Parses JSONL and checks that ticks are contiguous and increasing.
    pub fn from_jsonl(text: &str) -> Result<Self, EvalError> {
        let mut records: Vec<LogRecord> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: LogRecord = serde_json::from_str(line).map_err(|e| EvalError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if let Some(prev) = records.last() {
                if r.tick != prev.tick + 1 {
                    return Err(EvalError::Parse {
                        line: i + 1,
                        msg: format!("tick {} does not follow tick {}", r.tick, prev.tick),
                    });
                }
            }
            records.push(r);
        }
        Ok(Self { records })
    }

    /// SHA-256 of the JSONL serialization, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.records
            .iter()
            .map(|r| [r.ground_truth.x, r.ground_truth.y])
            .collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }
}

/// Pose estimate tagged with its tick, one per line of an estimate log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub tick: u64,
    pub pose: Pose2,
    pub score: f64,
}

pub fn estimates_to_jsonl(records: &[EstimateRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("estimates serialize") + "\n")
        .collect()
}

pub fn estimates_from_jsonl(text: &str) -> Result<Vec<EstimateRecord>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Uniform grid over segments for nearest-segment queries.
#[derive(Debug, Clone)]
pub struct SegmentIndex {
    segments: Vec<Segment2>,
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl SegmentIndex {
    pub fn new(segments: Vec<Segment2>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for s in &segments {
            for p in [s.a, s.b] {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        if segments.is_empty() {
            lo = [0.0; 2];
            hi = [1.0; 2];
        }
        let mean = if segments.is_empty() {
            1.0
        } else {
            segments.iter().map(Segment2::length).sum::<f64>() / segments.len() as f64
        };
        let ext = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        let cell = (2.0 * mean).max(ext / 256.0).max(1e-6);
        let nx = (((hi[0] - lo[0]) / cell).floor() as usize) + 1;
        let ny = (((hi[1] - lo[1]) / cell).floor() as usize) + 1;
        let mut cells = vec![Vec::new(); nx * ny];
        for (k, s) in segments.iter().enumerate() {
            let c =
                |v: f64, o: f64, n: usize| (((v - o) / cell).floor().max(0.0) as usize).min(n - 1);
            let (x0, x1) = (
                c(s.a[0].min(s.b[0]), lo[0], nx),
                c(s.a[0].max(s.b[0]), lo[0], nx),
            );
            let (y0, y1) = (
                c(s.a[1].min(s.b[1]), lo[1], ny),
                c(s.a[1].max(s.b[1]), lo[1], ny),
            );
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    cells[iy * nx + ix].push(k as u32);
                }
            }
        }
        Self {
            segments,
            origin: lo,
            cell,
            nx,
            ny,
            cells,
        }
    }

    pub fn segments(&self) -> &[Segment2] {
        &self.segments
    }

    /// Nearest segment index and distance.
    pub fn nearest(&self, p: [f64; 2]) -> Option<(usize, f64)> {
        if self.segments.is_empty() {
            return None;
        }
        let fx = ((p[0] - self.origin[0]) / self.cell).floor();
        let fy = ((p[1] - self.origin[1]) / self.cell).floor();
        let far = 4.0;
        if fx < -far || fy < -far || fx > self.nx as f64 + far || fy > self.ny as f64 + far {
            return self.brute_nearest(p);
        }
        let (cx, cy) = (fx as i64, fy as i64);
        let max_ring = (self.nx.max(self.ny) as i64) + 5;
        let mut best: Option<(usize, f64)> = None;
        for ring in 0..=max_ring {
            for iy in (cy - ring)..=(cy + ring) {
                for ix in (cx - ring)..=(cx + ring) {
                    if (iy - cy).abs() != ring && (ix - cx).abs() != ring {
                        continue;
                    }
                    if ix < 0 || iy < 0 || ix >= self.nx as i64 || iy >= self.ny as i64 {
                        continue;
                    }
                    for &k in &self.cells[iy as usize * self.nx + ix as usize] {
                        let d = self.segments[k as usize].distance_to(p);
                        let better = match best {
                            None => true,
                            Some((bk, bd)) => d < bd || (d == bd && (k as usize) < bk),
                        };
                        if better {
                            best = Some((k as usize, d));
                        }
                    }
                }
            }
            if let Some((_, d)) = best {
                if d <= ring as f64 * self.cell {
                    break;
                }
            }
        }
        best
    }

    fn brute_nearest(&self, p: [f64; 2]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (k, s) in self.segments.iter().enumerate() {
            let d = s.distance_to(p);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best
    }
}

/// Reference racing line with cumulative arc length and a start line
/// through the first waypoint.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    points: Vec<[f64; 2]>,
    s: Vec<f64>,
    closed: bool,
    start_half_width: f64,
    index: SegmentIndex,
}

impl ReferenceTrajectory {
    pub const DEFAULT_START_HALF_WIDTH: f64 = 2.0;

    pub fn new(points: Vec<[f64; 2]>, closed: bool) -> Result<Self, EvalError> {
        if points.len() < 2 {
            return Err(EvalError::InvalidArgument(
                "reference needs at least 2 points".into(),
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EvalError::InvalidArgument(
                "reference has non-finite coordinates".into(),
            ));
        }
        let n = points.len();
        let mut s = vec![0.0];
        let segs = if closed { n } else { n - 1 };
        let mut segments = Vec::with_capacity(segs);
        for i in 0..segs {
            let seg = Segment2::new(points[i], points[(i + 1) % n]);
            let l = seg.length();
            if l <= 0.0 {
                return Err(EvalError::InvalidArgument(format!(
                    "reference points {i} and {} coincide",
                    (i + 1) % n
                )));
            }
            s.push(s[i] + l);
            segments.push(seg);
        }
        Ok(Self {
            points,
            s,
            closed,
            start_half_width: Self::DEFAULT_START_HALF_WIDTH,
            index: SegmentIndex::new(segments),
        })
    }

    /// CSV with header containing `x` and `y` columns; other columns ignored.
    pub fn from_csv(text: &str, closed: bool) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| EvalError::Parse {
                line: 1,
                msg: e.to_string(),
            })?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| EvalError::Parse {
                    line: 1,
                    msg: format!("missing column {name:?}"),
                })
        };
        let (ix, iy) = (col("x")?, col("y")?);
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| EvalError::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let get = |i: usize| -> Result<f64, EvalError> {
                let f = rec.get(i).unwrap_or("");
                f.parse().map_err(|_| EvalError::Parse {
                    line,
                    msg: format!("invalid number {f:?}"),
                })
            };
            points.push([get(ix)?, get(iy)?]);
        }
        Self::new(points, closed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p[0], p[1]));
        }
        out
    }

    pub fn with_start_half_width(mut self, w: f64) -> Self {
        self.start_half_width = w;
        self
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    pub fn length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    pub fn arc_lengths(&self) -> &[f64] {
        &self.s
    }

    pub fn segments(&self) -> &[Segment2] {
        self.index.segments()
    }

    fn start_dir(&self) -> [f64; 2] {
        let d = sub(self.points[1], self.points[0]);
        let l = norm(d);
        [d[0] / l, d[1] / l]
    }

    /// Start line: perpendicular to the first segment through the first point.
    pub fn start_line(&self) -> Segment2 {
        let t = self.start_dir();
        let n = [-t[1], t[0]];
        let p = self.points[0];
        let w = self.start_half_width;
        Segment2::new(
            [p[0] - w * n[0], p[1] - w * n[1]],
            [p[0] + w * n[0], p[1] + w * n[1]],
        )
    }

    /// Distance to the polyline and the arc length of the nearest point.
    pub fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let (k, d) = self.index.nearest(p).expect("reference is nonempty");
        let (_, u) = self.index.segments()[k].closest_point(p);
        (d, self.s[k] + u * (self.s[k + 1] - self.s[k]))
    }

    /// Point at arc length `s` (wrapped on closed references, clamped on
    /// open ones).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let total = self.length();
        let s = if self.closed {
            s.rem_euclid(total)
        } else {
            s.clamp(0.0, total)
        };
        let k = match self.s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i.min(self.s.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.s.len() - 2),
        };
        let seg = self.index.segments()[k];
        let u = (s - self.s[k]) / (self.s[k + 1] - self.s[k]);
        [
            seg.a[0] + u * (seg.b[0] - seg.a[0]),
            seg.a[1] + u * (seg.b[1] - seg.a[1]),
        ]
    }
}

/// One complete lap between two forward start-line crossings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lap {
    /// First and last sample index belonging to the lap (inclusive).
    pub first: usize,
    pub last: usize,
    pub start_time: f64,
    pub end_time: f64,
}

impl Lap {
    pub fn duration(&self) -> f64 {
        self.end_time - self.start_time
    }
}

/// Splits a sampled path into laps at forward crossings of the start line.
/// Crossings closer than half a reference length of travel to the previous
/// one are ignored.
pub fn segment_laps(
    positions: &[[f64; 2]],
    times: &[f64],
    reference: &ReferenceTrajectory,
) -> Vec<Lap> {
    let line = reference.start_line();
    let t = reference.start_dir();
    let origin = reference.points[0];
    let mut crossings: Vec<(usize, f64, f64)> = Vec::new();
    let mut travelled = 0.0;
    for k in 0..positions.len().saturating_sub(1) {
        let (p, q) = (positions[k], positions[k + 1]);
        travelled += norm(sub(q, p));
        let dp = dot(sub(p, origin), t);
        let dq = dot(sub(q, origin), t);
        if !(dp < 0.0 && dq >= 0.0) {
            continue;
        }
        if Segment2::new(p, q).intersect(&line).is_none() {
            continue;
        }
        if !crossings.is_empty() && travelled < 0.5 * reference.length() {
            continue;
        }
        let f = -dp / (dq - dp);
        let time = times[k] + f * (times[k + 1] - times[k]);
        crossings.push((k + 1, time, travelled));
        travelled = 0.0;
    }
    crossings
        .windows(2)
        .map(|w| Lap {
            first: w[0].0,
            last: w[1].0 - 1,
            start_time: w[0].1,
            end_time: w[1].1,
        })
        .collect()
}

/// Mean and max unsigned distance of `path` to the reference polyline.
pub fn lateral_deviation(path: &[[f64; 2]], reference: &ReferenceTrajectory) -> (f64, f64) {
    if path.is_empty() {
        return (0.0, 0.0);
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for p in path {
        let (d, _) = reference.project(*p);
        sum += d;
        max = max.max(d);
    }
    (sum / path.len() as f64, max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LapMetrics {
    pub t_lap: f64,
    pub d_max: f64,
    pub d_avg: f64,
}

pub fn lap_metrics(log: &RunLog, reference: &ReferenceTrajectory) -> Vec<LapMetrics> {
    let pos = log.positions();
    let times = log.times();
    segment_laps(&pos, &times, reference)
        .into_iter()
        .map(|lap| {
            let (d_avg, d_max) = lateral_deviation(&pos[lap.first..=lap.last], reference);
            LapMetrics {
                t_lap: lap.duration(),
                d_max,
                d_avg,
            }
        })
        .collect()
}

/// Per-lap metrics averaged over all laps.
pub fn mean_metrics(laps: &[LapMetrics]) -> Option<LapMetrics> {
    if laps.is_empty() {
        return None;
    }
    let n = laps.len() as f64;
    Some(LapMetrics {
        t_lap: laps.iter().map(|l| l.t_lap).sum::<f64>() / n,
        d_max: laps.iter().map(|l| l.d_max).sum::<f64>() / n,
        d_avg: laps.iter().map(|l| l.d_avg).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapDelta {
    pub t_lap: f64,
    pub d_max: f64,
    pub d_avg: f64,
}

/// `1 - ours / baseline`; `None` when the baseline gap is zero but ours is not.
pub fn reduction(baseline: f64, ours: f64) -> Option<f64> {
    if baseline == 0.0 {
        (ours == 0.0).then_some(0.0)
    } else {
        Some(1.0 - ours / baseline)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub t_lap: Option<f64>,
    pub d_max: Option<f64>,
    pub d_avg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub delta: GapDelta,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<GapDelta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction: Option<Reductions>,
}

/// Componentwise `|sim - real|`, with reductions relative to a baseline gap
/// when one is given.
pub fn gap_delta(sim: &LapMetrics, real: &LapMetrics, baseline: Option<&GapDelta>) -> GapReport {
    let delta = GapDelta {
        t_lap: (sim.t_lap - real.t_lap).abs(),
        d_max: (sim.d_max - real.d_max).abs(),
        d_avg: (sim.d_avg - real.d_avg).abs(),
    };
    let reduction = baseline.map(|b| Reductions {
        t_lap: reduction(b.t_lap, delta.t_lap),
        d_max: reduction(b.d_max, delta.d_max),
        d_avg: reduction(b.d_avg, delta.d_avg),
    });
    GapReport {
        delta,
        baseline: baseline.copied(),
        reduction,
    }
}

/// Position and heading RMSE of tick-aligned pose sequences.
pub fn pose_rmse(estimates: &[Pose2], truth: &[Pose2]) -> Result<(f64, f64), EvalError> {
    if estimates.len() != truth.len() {
        return Err(EvalError::InvalidArgument(format!(
            "length mismatch: {} estimates vs {} truth poses",
            estimates.len(),
            truth.len()
        )));
    }
    if estimates.is_empty() {
        return Err(EvalError::InvalidArgument("no poses to compare".into()));
    }
    let n = estimates.len() as f64;
    let mut pos = 0.0;
    let mut head = 0.0;
    for (e, t) in estimates.iter().zip(truth) {
        pos += (e.x - t.x).powi(2) + (e.y - t.y).powi(2);
        head += wrap_angle(e.psi - t.psi).powi(2);
    }
    Ok(((pos / n).sqrt(), (head / n).sqrt()))
}

/// Pairs estimates with the ground truth at the same ticks.
pub fn align_estimates(
    estimates: &[EstimateRecord],
    log: &RunLog,
) -> Result<(Vec<Pose2>, Vec<Pose2>), EvalError> {
    let Some(first) = log.records.first() else {
        return Err(EvalError::InvalidArgument("truth log is empty".into()));
    };
    let mut est = Vec::with_capacity(estimates.len());
    let mut truth = Vec::with_capacity(estimates.len());
    for e in estimates {
        let rec = e
            .tick
            .checked_sub(first.tick)
            .and_then(|i| log.records.get(i as usize))
            .ok_or_else(|| {
                EvalError::InvalidArgument(format!("no ground truth for tick {}", e.tick))
            })?;
        est.push(e.pose);
        truth.push(rec.ground_truth.pose());
    }
    Ok((est, truth))
}
