//! Reference implementations that share no code path with the production
//! routines they check: exhaustive graph construction and grid rasterization
//! of box footprints.

use crate::geometry::Box3D;
use crate::spatial_graph::RelationGraph;

/// Default raster resolution (cells per axis).
pub const RASTER_CELLS: usize = 2000;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut acc = 0.0;
    for axis in 0..3 {
        let d = a[axis] - b[axis];
        acc += d * d;
    }
    acc
}

/// O(n^2 log n) k-nearest-neighbour graph: full sort of every row.
pub fn brute_force_knn_graph(centers: &[[f64; 3]], k: usize) -> RelationGraph {
    let n = centers.len();
    let lists = (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(&centers[i], &centers[j]), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    RelationGraph::from_neighbors(lists).expect("brute-force graph is well formed")
}

/// O(n^2) radius graph, boundary inclusive (compared on squared distance).
pub fn brute_force_radius_graph(centers: &[[f64; 3]], r: f64) -> RelationGraph {
    let n = centers.len();
    let r2 = r * r;
    let lists = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && dist2(&centers[i], &centers[j]) <= r2)
                .collect()
        })
        .collect();
    RelationGraph::from_neighbors(lists).expect("brute-force graph is well formed")
}

/// Footprint of a box as a half-plane description: `inside(p)` iff
/// `p . n_k <= c_k` for all four sides.
struct Footprint {
    normals: [[f64; 2]; 4],
    offsets: [f64; 4],
    bounds: [f64; 4],
}

impl Footprint {
    fn of(b: &Box3D) -> Self {
        let (s, c) = b.theta.sin_cos();
        let along = [c, s];
        let across = [-s, c];
        let proj = |n: [f64; 2]| n[0] * b.x + n[1] * b.y;
        let normals = [along, [-along[0], -along[1]], across, [-across[0], -across[1]]];
        let offsets = [
            proj(along) + 0.5 * b.l,
            -proj(along) + 0.5 * b.l,
            proj(across) + 0.5 * b.w,
            -proj(across) + 0.5 * b.w,
        ];
        let ex = 0.5 * (b.l * c.abs() + b.w * s.abs());
        let ey = 0.5 * (b.l * s.abs() + b.w * c.abs());
        Self {
            normals,
            offsets,
            bounds: [b.x - ex, b.x + ex, b.y - ey, b.y + ey],
        }
    }

    /// x-interval of the horizontal line at `y` inside the footprint.
    fn row_interval(&self, y: f64) -> Option<(f64, f64)> {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (n, &c) in self.normals.iter().zip(self.offsets.iter()) {
            // n.x * x + n.y * y <= c
            let rhs = c - n[1] * y;
            if n[0].abs() < 1e-15 {
                if rhs < 0.0 {
                    return None;
                }
            } else if n[0] > 0.0 {
                hi = hi.min(rhs / n[0]);
            } else {
                lo = lo.max(rhs / n[0]);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }
}

/// Cell-center counts of a rasterized pair of footprints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterAreas {
    pub area_a: f64,
    pub area_b: f64,
    pub intersection: f64,
}

impl RasterAreas {
    pub fn iou(&self) -> f64 {
        let union = self.area_a + self.area_b - self.intersection;
        if union <= 0.0 {
            0.0
        } else {
            self.intersection / union
        }
    }
}

/// Number of grid points `x0 + (i + 0.5) * dx`, `i in 0..cells`, inside `[lo, hi]`.
fn count_cells(lo: f64, hi: f64, x0: f64, dx: f64, cells: usize) -> usize {
    if lo > hi {
        return 0;
    }
    let first = ((lo - x0) / dx - 0.5).ceil().max(0.0);
    let last = ((hi - x0) / dx - 0.5).floor().min(cells as f64 - 1.0);
    if last < first {
        0
    } else {
        (last - first) as usize + 1
    }
}

/// Rasterizes both footprints on a `cells x cells` grid spanning the union
/// of their bounding rectangles and counts cell centers inside each and both.
pub fn rasterize_bev(a: &Box3D, b: &Box3D, cells: usize) -> RasterAreas {
    let fa = Footprint::of(a);
    let fb = Footprint::of(b);
    let x0 = fa.bounds[0].min(fb.bounds[0]);
    let x1 = fa.bounds[1].max(fb.bounds[1]);
    let y0 = fa.bounds[2].min(fb.bounds[2]);
    let y1 = fa.bounds[3].max(fb.bounds[3]);
    let dx = (x1 - x0) / cells as f64;
    let dy = (y1 - y0) / cells as f64;
    let (mut na, mut nb, mut nab) = (0usize, 0usize, 0usize);
    for row in 0..cells {
        let y = y0 + (row as f64 + 0.5) * dy;
        let ia = fa.row_interval(y);
        let ib = fb.row_interval(y);
        if let Some((lo, hi)) = ia {
            na += count_cells(lo, hi, x0, dx, cells);
        }
        if let Some((lo, hi)) = ib {
            nb += count_cells(lo, hi, x0, dx, cells);
        }
        if let (Some((la, ha)), Some((lb, hb))) = (ia, ib) {
            nab += count_cells(la.max(lb), ha.min(hb), x0, dx, cells);
        }
    }
    let cell = dx * dy;
    RasterAreas {
        area_a: na as f64 * cell,
        area_b: nb as f64 * cell,
        intersection: nab as f64 * cell,
    }
}

/// Rasterized BEV IoU at [`RASTER_CELLS`] resolution.
pub fn raster_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    rasterize_bev(a, b, RASTER_CELLS).iou()
}
