//! Planar geometry primitives shared by the sensor, twin, localization and
//! evaluation modules.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Planar pose: position in metres, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose2 {
    pub const fn new(x: f64, y: f64, psi: f64) -> Self {
        Self { x, y, psi }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Maps a point from this pose's local frame into the world frame.
    pub fn transform_point(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.psi.sin_cos();
        [
            self.x + c * local[0] - s * local[1],
            self.y + s * local[0] + c * local[1],
        ]
    }

    /// Maps a world point into this pose's local frame.
    pub fn inverse_transform_point(&self, world: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.psi.sin_cos();
        let dx = world[0] - self.x;
        let dy = world[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Pose composition `self ⊕ local`.
    pub fn compose(&self, local: Pose2) -> Pose2 {
        let [x, y] = self.transform_point([local.x, local.y]);
        Pose2::new(x, y, wrap_angle(self.psi + local.psi))
    }
}

pub fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm(sub(a, b))
}

/// Closed 2D line segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment2 {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Segment2 {
    pub const fn new(a: [f64; 2], b: [f64; 2]) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        distance(self.a, self.b)
    }

    /// Distance along the ray `origin + t * dir` (with `dir` unit length) to
    /// this segment, if the ray hits it at `t >= 0`.
    pub fn ray_hit(&self, origin: [f64; 2], dir: [f64; 2]) -> Option<f64> {
        let e = sub(self.b, self.a);
        let denom = cross(dir, e);
        if denom == 0.0 {
            return None;
        }
        let w = sub(self.a, origin);
        let t = cross(w, e) / denom;
        let u = cross(w, dir) / denom;
        if t >= 0.0 && (0.0..=1.0).contains(&u) {
            Some(t)
        } else {
            None
        }
    }

    /// Closest point on the segment to `p` and the parameter along `a -> b`.
    pub fn closest_point(&self, p: [f64; 2]) -> ([f64; 2], f64) {
        let e = sub(self.b, self.a);
        let len2 = dot(e, e);
        let u = if len2 == 0.0 {
            0.0
        } else {
            (dot(sub(p, self.a), e) / len2).clamp(0.0, 1.0)
        };
        ([self.a[0] + u * e[0], self.a[1] + u * e[1]], u)
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        distance(self.closest_point(p).0, p)
    }

    /// Proper or touching intersection of two segments, returned as the
    /// parameter along `self`.
    pub fn intersect(&self, other: &Segment2) -> Option<f64> {
        let r = sub(self.b, self.a);
        let s = sub(other.b, other.a);
        let denom = cross(r, s);
        if denom == 0.0 {
            return None;
        }
        let w = sub(other.a, self.a);
        let t = cross(w, s) / denom;
        let u = cross(w, r) / denom;
        if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
            Some(t)
        } else {
            None
        }
    }
}

/// Axis-aligned bounding box in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Aabb2 {
    pub fn empty() -> Self {
        Self {
            min: [f64::INFINITY; 2],
            max: [f64::NEG_INFINITY; 2],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min[0] > self.max[0] || self.min[1] > self.max[1]
    }

    pub fn include(&mut self, p: [f64; 2]) {
        for k in 0..2 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn expanded(&self, margin: f64) -> Self {
        Self {
            min: [self.min[0] - margin, self.min[1] - margin],
            max: [self.max[0] + margin, self.max[1] + margin],
        }
    }
}

/// Oriented rectangle, used for vehicle footprints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    /// Corners in counter-clockwise order starting at front-left.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let pose = Pose2::new(self.center[0], self.center[1], self.heading);
        let (l, w) = (self.half_length, self.half_width);
        [
            pose.transform_point([l, w]),
            pose.transform_point([-l, w]),
            pose.transform_point([-l, -w]),
            pose.transform_point([l, -w]),
        ]
    }

    pub fn edges(&self) -> [Segment2; 4] {
        let c = self.corners();
        [
            Segment2::new(c[0], c[1]),
            Segment2::new(c[1], c[2]),
            Segment2::new(c[2], c[3]),
            Segment2::new(c[3], c[0]),
        ]
    }

    /// Nearest ray hit against the four box edges.
    pub fn ray_hit(&self, origin: [f64; 2], dir: [f64; 2]) -> Option<f64> {
        self.edges()
            .iter()
            .filter_map(|e| e.ray_hit(origin, dir))
            .min_by(f64::total_cmp)
    }

    /// Separating-axis overlap test.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let a = self.corners();
        let b = other.corners();
        let axes = [
            self.heading.sin_cos(),
            (self.heading + PI / 2.0).sin_cos(),
            other.heading.sin_cos(),
            (other.heading + PI / 2.0).sin_cos(),
        ];
        axes.iter().all(|&(s, c)| {
            let axis = [c, s];
            let (amin, amax) = project(&a, axis);
            let (bmin, bmax) = project(&b, axis);
            amax >= bmin && bmax >= amin
        })
    }
}

fn project(corners: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    corners
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            let d = dot(*c, axis);
            (lo.min(d), hi.max(d))
        })
}
