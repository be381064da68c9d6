//! Exact nearest-neighbour queries over 3-D points bucketed on an xy grid.
//!
//! Surfaces here are 2.5-D, so bucketing by xy keeps buckets small while the
//! distances themselves stay fully three-dimensional.

use nalgebra::Point3;

#[derive(Debug, Clone)]
pub struct PointIndex<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    min: [f64; 2],
    nx: i64,
    ny: i64,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl<'a> PointIndex<'a> {
    pub fn new(points: &'a [Point3<f64>]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            lo[0] = lo[0].min(p.x);
            lo[1] = lo[1].min(p.y);
            hi[0] = hi[0].max(p.x);
            hi[1] = hi[1].max(p.y);
        }
        if points.is_empty() {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let (w, h) = (hi[0] - lo[0], hi[1] - lo[1]);
        // about two points per bucket on a uniform layout
        let mut cell = (2.0 * w.max(1e-12) * h.max(1e-12) / points.len().max(1) as f64).sqrt();
        cell = cell.max(w.max(h) / 4096.0);
        if !(cell > 0.0 && cell.is_finite()) {
            cell = 1.0;
        }
        let nx = (w / cell).floor() as i64 + 1;
        let ny = (h / cell).floor() as i64 + 1;
        let mut index = Self {
            points,
            cell,
            min: lo,
            nx,
            ny,
            starts: Vec::new(),
            items: Vec::new(),
        };
        let mut counts = vec![0usize; (nx * ny) as usize + 1];
        let keys: Vec<usize> = points.iter().map(|p| index.bucket_of(p)).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            items[fill[k]] = i;
            fill[k] += 1;
        }
        index.starts = counts;
        index.items = items;
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn cell_coords(&self, p: &Point3<f64>) -> (i64, i64) {
        (
            ((p.x - self.min[0]) / self.cell).floor() as i64,
            ((p.y - self.min[1]) / self.cell).floor() as i64,
        )
    }

    fn bucket_of(&self, p: &Point3<f64>) -> usize {
        let (cx, cy) = self.cell_coords(p);
        (cy.clamp(0, self.ny - 1) * self.nx + cx.clamp(0, self.nx - 1)) as usize
    }

    fn bucket(&self, cx: i64, cy: i64) -> &[usize] {
        if cx < 0 || cy < 0 || cx >= self.nx || cy >= self.ny {
            return &[];
        }
        let b = (cy * self.nx + cx) as usize;
        &self.items[self.starts[b]..self.starts[b + 1]]
    }

    /// Visit buckets ring by ring around `q` until `done(r)` says the
    /// remaining rings (all at xy distance >= `r * cell`) cannot matter.
    fn search<S>(
        &self,
        q: &Point3<f64>,
        state: &mut S,
        visit: impl Fn(&mut S, usize),
        done: impl Fn(&S, f64) -> bool,
    ) {
        // Clamping keeps the bound valid: a query outside the grid is at
        // least as far from every ring as its clamped cell would be.
        let (qx, qy) = self.cell_coords(q);
        let (qx, qy) = (qx.clamp(0, self.nx - 1), qy.clamp(0, self.ny - 1));
        let reach = self.nx.max(self.ny);
        for r in 0..=reach {
            for cy in (qy - r)..=(qy + r) {
                if cy < 0 || cy >= self.ny {
                    continue;
                }
                let edge_row = cy == qy - r || cy == qy + r;
                let step = if edge_row || r == 0 { 1 } else { 2 * r };
                let mut cx = qx - r;
                while cx <= qx + r {
                    self.bucket(cx, cy).iter().for_each(|&i| visit(state, i));
                    cx += step;
                }
            }
            if done(state, r as f64 * self.cell) {
                return;
            }
        }
    }

    /// Index and distance of the nearest point; `None` for an empty index.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.search(
            q,
            &mut best,
            |best, i| {
                let d = (self.points[i] - q).norm_squared();
                let better = match *best {
                    None => true,
                    Some((bi, bd)) => d < bd || (d == bd && i < bi),
                };
                if better {
                    *best = Some((i, d));
                }
            },
            |best, bound| matches!(best, Some((_, d)) if d.sqrt() <= bound),
        );
        best.map(|(i, d)| (i, d.sqrt()))
    }

    /// The `k` nearest points to `q` as `(distance, index)`, closest first,
    /// skipping `exclude`.
    pub fn k_nearest(&self, q: &Point3<f64>, k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(
            q,
            &mut best,
            |best, i| {
                if Some(i) == exclude {
                    return;
                }
                let d = (self.points[i] - q).norm_squared();
                if best.len() == k {
                    let worst = best[k - 1];
                    if d > worst.0 || (d == worst.0 && i > worst.1) {
                        return;
                    }
                }
                let pos = best.partition_point(|&(bd, bi)| bd < d || (bd == d && bi < i));
                best.insert(pos, (d, i));
                best.truncate(k);
            },
            |best, bound| best.len() == k && best[k - 1].0.sqrt() <= bound,
        );
        best.into_iter().map(|(d, i)| (d.sqrt(), i)).collect()
    }
}
