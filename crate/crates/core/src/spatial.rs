//! Uniform spatial hash grid over 3D points for radius and k-nearest queries.

use std::collections::HashMap;

pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
pub struct HashGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl HashGrid {
    pub fn new(points: &[[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        let mut grid = Self {
            cell,
            cells: HashMap::new(),
            lo: [i64::MAX; 3],
            hi: [i64::MIN; 3],
        };
        for (i, p) in points.iter().enumerate() {
            grid.insert(i as u32, p);
        }
        grid
    }

    /// Cell size that puts roughly `per_cell` points in each occupied cell,
    /// measured over the non-degenerate extents of the cloud.
    pub fn cell_for_density(points: &[[f64; 3]], per_cell: usize) -> f64 {
        if points.len() < 2 {
            return 1.0;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let ext: Vec<f64> = (0..3).map(|k| hi[k] - lo[k]).collect();
        let max_ext = ext.iter().cloned().fold(0.0, f64::max);
        if max_ext == 0.0 {
            return 1.0;
        }
        let dims: Vec<f64> = ext.into_iter().filter(|e| *e > 1e-6 * max_ext).collect();
        let measure: f64 = dims.iter().product();
        let cell = (measure * per_cell as f64 / points.len() as f64).powf(1.0 / dims.len() as f64);
        cell.clamp(max_ext * 1e-6, max_ext)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn key(&self, p: &[f64; 3]) -> [i64; 3] {
        [
            (p[0] / self.cell).floor() as i64,
            (p[1] / self.cell).floor() as i64,
            (p[2] / self.cell).floor() as i64,
        ]
    }

    pub fn insert(&mut self, index: u32, p: &[f64; 3]) {
        let key = self.key(p);
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(key[k]);
            self.hi[k] = self.hi[k].max(key[k]);
        }
        self.cells.entry(key).or_default().push(index);
    }

    /// Calls `f` with every stored index whose cell intersects the cube of
    /// half-width `r` around `p`. Callers filter by exact distance.
    pub fn for_each_candidate(&self, p: &[f64; 3], r: f64, mut f: impl FnMut(u32)) {
        if self.cells.is_empty() {
            return;
        }
        let lo = self.key(&[p[0] - r, p[1] - r, p[2] - r]);
        let hi = self.key(&[p[0] + r, p[1] + r, p[2] + r]);
        let lo = [
            lo[0].max(self.lo[0]),
            lo[1].max(self.lo[1]),
            lo[2].max(self.lo[2]),
        ];
        let hi = [
            hi[0].min(self.hi[0]),
            hi[1].min(self.hi[1]),
            hi[2].min(self.hi[2]),
        ];
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if let Some(v) = self.cells.get(&[x, y, z]) {
                        v.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }

    /// Indices within distance `r` (inclusive) of `p`, in no particular order.
    pub fn within(&self, points: &[[f64; 3]], p: &[f64; 3], r: f64) -> Vec<u32> {
        let r2 = r * r;
        let mut out = Vec::new();
        self.for_each_candidate(p, r, |i| {
            if dist2(&points[i as usize], p) <= r2 {
                out.push(i);
            }
        });
        out
    }

    /// The `k` nearest stored points to `p`, excluding index `skip`, as
    /// `(squared distance, index)` sorted by distance then index.
    pub fn knn(
        &self,
        points: &[[f64; 3]],
        p: &[f64; 3],
        k: usize,
        skip: Option<u32>,
    ) -> Vec<(f64, u32)> {
        let mut best: Vec<(f64, u32)> = Vec::new();
        if k == 0 || self.cells.is_empty() {
            return best;
        }
        let c = self.key(p);
        let max_ring = (0..3)
            .map(|d| (c[d] - self.lo[d]).abs().max((self.hi[d] - c[d]).abs()))
            .max()
            .unwrap_or(0);
        let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        for ring in 0..=max_ring {
            for x in (c[0] - ring).max(self.lo[0])..=(c[0] + ring).min(self.hi[0]) {
                for y in (c[1] - ring).max(self.lo[1])..=(c[1] + ring).min(self.hi[1]) {
                    for z in (c[2] - ring).max(self.lo[2])..=(c[2] + ring).min(self.hi[2]) {
                        let on_shell = (x - c[0]).abs() == ring
                            || (y - c[1]).abs() == ring
                            || (z - c[2]).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        if let Some(v) = self.cells.get(&[x, y, z]) {
                            for &i in v {
                                if Some(i) != skip {
                                    best.push((dist2(&points[i as usize], p), i));
                                }
                            }
                        }
                    }
                }
            }
            if best.len() >= k {
                best.sort_unstable_by(cmp);
                best.truncate(k);
                // Anything outside the rings seen so far is at least this far away.
                let reach = ring as f64 * self.cell;
                if best[k - 1].0 <= reach * reach {
                    break;
                }
            }
        }
        best.sort_unstable_by(cmp);
        best.truncate(k);
        best
    }
}
