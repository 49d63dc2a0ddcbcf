//! Exact k-nearest-neighbor search over a uniform spatial grid.
//!
//! Neighbors are ordered by squared distance, ties broken by ascending point
//! index. A point is never its own neighbor.

use rayon::prelude::*;

const MAX_CELLS: usize = 1 << 22;

#[derive(Debug, Clone)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<u32>,
}

impl KnnGraph {
    /// Requires `points.len() > k`.
    pub fn build(points: &[[f64; 3]], k: usize) -> Self {
        assert!(k >= 1 && points.len() > k, "k-NN needs more than k points");
        let grid = Grid::new(points, k);
        let neighbors: Vec<u32> = (0..points.len())
            .into_par_iter()
            .flat_map_iter(|i| grid.query(points, i, k))
            .collect();
        KnnGraph { k, neighbors }
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

struct Grid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    // CSR layout: points of cell c are order[starts[c]..starts[c + 1]].
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl Grid {
    fn new(points: &[[f64; 3]], k: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let ext: Vec<f64> = (0..3).map(|d| hi[d] - lo[d]).collect();
        let max_ext = ext.iter().cloned().fold(0.0, f64::max);
        let cell = if max_ext > 0.0 {
            // Aim for a handful of points per occupied cell on surface-like data.
            let per_side = ((points.len() as f64 / k as f64).sqrt()).max(1.0);
            let mut cell = max_ext / per_side;
            while dims_for(&ext, cell).iter().product::<usize>() > MAX_CELLS {
                cell *= 2.0;
            }
            cell
        } else {
            1.0
        };
        let dims = dims_for(&ext, cell);
        let ncell = dims.iter().product::<usize>();
        let cell_of = |p: &[f64; 3]| -> usize {
            let mut idx = [0usize; 3];
            for d in 0..3 {
                idx[d] = (((p[d] - lo[d]) / cell) as usize).min(dims[d] - 1);
            }
            (idx[2] * dims[1] + idx[1]) * dims[0] + idx[0]
        };
        let mut counts = vec![0usize; ncell + 1];
        let ids: Vec<usize> = points.iter().map(cell_of).collect();
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for c in 0..ncell {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[fill[c]] = i as u32;
            fill[c] += 1;
        }
        Grid { origin: lo, cell, dims, starts: counts, order }
    }

    fn query(&self, points: &[[f64; 3]], i: usize, k: usize) -> Vec<u32> {
        let p = points[i];
        let mut home = [0isize; 3];
        for d in 0..3 {
            home[d] = (((p[d] - self.origin[d]) / self.cell) as isize).min(self.dims[d] as isize - 1);
        }
        let max_ring = *self.dims.iter().max().unwrap() as isize;
        let mut cand: Vec<(f64, u32)> = Vec::with_capacity(4 * k);
        let mut ring = 0isize;
        loop {
            self.visit_shell(home, ring, |c| {
                for &j in &self.order[self.starts[c]..self.starts[c + 1]] {
                    if j as usize != i {
                        cand.push((dist2(&p, &points[j as usize]), j));
                    }
                }
            });
            if cand.len() >= k {
                cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.truncate(k);
                // Anything outside the explored cube is at least `ring * cell` away.
                let reach = ring as f64 * self.cell;
                if cand[k - 1].0 <= reach * reach || ring >= max_ring {
                    break;
                }
            }
            ring += 1;
        }
        cand.into_iter().map(|(_, j)| j).collect()
    }

    fn visit_shell(&self, home: [isize; 3], ring: isize, mut f: impl FnMut(usize)) {
        let dims = self.dims.map(|d| d as isize);
        for dz in -ring..=ring {
            let z = home[2] + dz;
            if z < 0 || z >= dims[2] {
                continue;
            }
            for dy in -ring..=ring {
                let y = home[1] + dy;
                if y < 0 || y >= dims[1] {
                    continue;
                }
                let on_face = dz.abs() == ring || dy.abs() == ring;
                let step = if on_face || ring == 0 { 1 } else { 2 * ring };
                let mut dx = -ring;
                while dx <= ring {
                    let x = home[0] + dx;
                    if x >= 0 && x < dims[0] {
                        f(((z * dims[1] + y) * dims[0] + x) as usize);
                    }
                    dx += step.max(1);
                }
            }
        }
    }
}

fn dims_for(ext: &[f64], cell: f64) -> [usize; 3] {
    [0, 1, 2].map(|d| ((ext[d] / cell).floor() as usize + 1).max(1))
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
