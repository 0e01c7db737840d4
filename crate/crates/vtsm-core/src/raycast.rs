//! Ray-triangle queries against a uniform XY grid of triangles.
//!
//! The maps this crate renders are terrain-like (mostly a height field), so a
//! 2-D grid over the ground plane with per-cell height bounds answers
//! occlusion and shadow queries in a handful of triangle tests.

use nalgebra::Vector3;

const EDGE_EPS: f64 = 1e-12;

/// Möller–Trumbore intersection; returns the ray parameter `t` such that
/// `origin + t * dir` lies on the triangle, for any `t > t_min`.
pub(crate) fn ray_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    v0: &Vector3<f64>,
    v1: &Vector3<f64>,
    v2: &Vector3<f64>,
    t_min: f64,
) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - v0;
    let u = s.dot(&p) * inv;
    if u < -EDGE_EPS || u > 1.0 + EDGE_EPS {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -EDGE_EPS || u + v > 1.0 + EDGE_EPS {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > t_min).then_some(t)
}

/// Uniform grid over the XY footprint of a triangle soup.
#[derive(Debug, Clone)]
pub(crate) struct TriangleGrid {
    min: [f64; 2],
    cell: [f64; 2],
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
    cell_zmax: Vec<f64>,
    zmax: f64,
}

impl TriangleGrid {
    pub fn build(vertices: &[Vector3<f64>], triangles: &[[u32; 3]]) -> Self {
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut zmax = f64::NEG_INFINITY;
        for v in vertices {
            min_x = min_x.min(v.x);
            min_y = min_y.min(v.y);
            max_x = max_x.max(v.x);
            max_y = max_y.max(v.y);
            zmax = zmax.max(v.z);
        }
        if vertices.is_empty() {
            (min_x, min_y, max_x, max_y, zmax) = (0.0, 0.0, 1.0, 1.0, 0.0);
        }
        let n = ((triangles.len() as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 512);
        let (nx, ny) = (n, n);
        let cell = [
            ((max_x - min_x) / nx as f64).max(1e-9),
            ((max_y - min_y) / ny as f64).max(1e-9),
        ];
        let mut cells = vec![Vec::new(); nx * ny];
        let mut cell_zmax = vec![f64::NEG_INFINITY; nx * ny];
        let clamp_idx = |x: f64, min: f64, c: f64, n: usize| -> usize {
            (((x - min) / c).floor().max(0.0) as usize).min(n - 1)
        };
        for (ti, tri) in triangles.iter().enumerate() {
            let (a, b, c) = (
                &vertices[tri[0] as usize],
                &vertices[tri[1] as usize],
                &vertices[tri[2] as usize],
            );
            let x0 = clamp_idx(a.x.min(b.x).min(c.x), min_x, cell[0], nx);
            let x1 = clamp_idx(a.x.max(b.x).max(c.x), min_x, cell[0], nx);
            let y0 = clamp_idx(a.y.min(b.y).min(c.y), min_y, cell[1], ny);
            let y1 = clamp_idx(a.y.max(b.y).max(c.y), min_y, cell[1], ny);
            let tz = a.z.max(b.z).max(c.z);
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    cells[iy * nx + ix].push(ti as u32);
                    cell_zmax[iy * nx + ix] = cell_zmax[iy * nx + ix].max(tz);
                }
            }
        }
        Self {
            min: [min_x, min_y],
            cell,
            nx,
            ny,
            cells,
            cell_zmax,
            zmax,
        }
    }

    /// Whether the ray hits any triangle with parameter in `(t_min, t_max)`,
    /// optionally ignoring triangles incident to vertex `skip_vertex`.
    pub fn any_hit(
        &self,
        vertices: &[Vector3<f64>],
        triangles: &[[u32; 3]],
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t_min: f64,
        t_max: f64,
        skip_vertex: Option<u32>,
    ) -> bool {
        let mut found = false;
        self.walk(origin, dir, t_min, t_max, |cell_tris, lo, hi| {
            for &ti in cell_tris {
                let tri = &triangles[ti as usize];
                if let Some(sv) = skip_vertex {
                    if tri.contains(&sv) {
                        continue;
                    }
                }
                if let Some(t) = ray_triangle(
                    origin,
                    dir,
                    &vertices[tri[0] as usize],
                    &vertices[tri[1] as usize],
                    &vertices[tri[2] as usize],
                    lo,
                ) {
                    if t < hi {
                        found = true;
                        return true;
                    }
                }
            }
            false
        });
        found
    }

    /// Highest geometry z coordinate seen at build time.
    pub fn max_z(&self) -> f64 {
        self.zmax
    }

    /// Indices of all triangles whose cells intersect the XY disc, sorted
    /// and deduplicated (triangles straddle cells).
    pub fn triangles_near_disc(&self, x: f64, y: f64, radius: f64) -> Vec<u32> {
        let x0 = (((x - radius - self.min[0]) / self.cell[0]).floor().max(0.0) as usize)
            .min(self.nx - 1);
        let x1 = (((x + radius - self.min[0]) / self.cell[0]).floor().max(0.0) as usize)
            .min(self.nx - 1);
        let y0 = (((y - radius - self.min[1]) / self.cell[1]).floor().max(0.0) as usize)
            .min(self.ny - 1);
        let y1 = (((y + radius - self.min[1]) / self.cell[1]).floor().max(0.0) as usize)
            .min(self.ny - 1);
        let mut out = Vec::new();
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                out.extend_from_slice(&self.cells[iy * self.nx + ix]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Nearest intersection along the ray with `t` in `(t_min, t_max)`,
    /// returning the parameter and the triangle index.
    pub fn closest_hit(
        &self,
        vertices: &[Vector3<f64>],
        triangles: &[[u32; 3]],
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t_min: f64,
        t_max: f64,
    ) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        self.walk(origin, dir, t_min, t_max, |cell_tris, lo, hi| {
            for &ti in cell_tris {
                let tri = &triangles[ti as usize];
                if let Some(t) = ray_triangle(
                    origin,
                    dir,
                    &vertices[tri[0] as usize],
                    &vertices[tri[1] as usize],
                    &vertices[tri[2] as usize],
                    lo,
                ) {
                    if t < hi && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, ti));
                    }
                }
            }
            // Triangles straddle cell boundaries, so a hit found in one cell
            // could be preceded by one in a later cell only if it lies past
            // that cell; keep walking until the best hit is provably final.
            false
        });
        best
    }

    /// Marches the ray over grid cells, invoking `visit` with each cell's
    /// triangle list and the clipped parameter interval until it returns true.
    fn walk<F: FnMut(&[u32], f64, f64) -> bool>(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t_min: f64,
        t_max: f64,
        mut visit: F,
    ) {
        // Clip the parameter range to the grid's XY extent.
        let mut t0 = t_min.max(0.0);
        let mut t1 = t_max;
        for axis in 0..2 {
            let (o, d) = (origin[axis], dir[axis]);
            let lo = self.min[axis];
            let hi = self.min[axis]
                + self.cell[axis] * (if axis == 0 { self.nx } else { self.ny }) as f64;
            if d.abs() < 1e-15 {
                if o < lo || o > hi {
                    return;
                }
            } else {
                let (ta, tb) = ((lo - o) / d, (hi - o) / d);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 > t1 {
            return;
        }
        let start = origin + dir * t0;
        let idx = |p: f64, axis: usize, n: usize| -> i64 {
            ((((p - self.min[axis]) / self.cell[axis]).floor()) as i64).clamp(0, n as i64 - 1)
        };
        let mut ix = idx(start.x, 0, self.nx);
        let mut iy = idx(start.y, 1, self.ny);
        let step = |d: f64| if d > 0.0 { 1i64 } else { -1 };
        let (sx, sy) = (step(dir.x), step(dir.y));
        let next_boundary = |i: i64, s: i64, axis: usize| -> f64 {
            self.min[axis] + self.cell[axis] * (i + if s > 0 { 1 } else { 0 }) as f64
        };
        let cross_t = |b: f64, o: f64, d: f64| -> f64 {
            if d.abs() < 1e-15 {
                f64::INFINITY
            } else {
                (b - o) / d
            }
        };
        let mut tx = cross_t(next_boundary(ix, sx, 0), origin.x, dir.x);
        let mut ty = cross_t(next_boundary(iy, sy, 1), origin.y, dir.y);
        let dtx = if dir.x.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (self.cell[0] / dir.x).abs()
        };
        let dty = if dir.y.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (self.cell[1] / dir.y).abs()
        };
        let mut t_entry = t0;
        loop {
            let t_exit = tx.min(ty).min(t1);
            let ci = iy as usize * self.nx + ix as usize;
            // Skip cells the ray passes entirely above.
            let z_lo = (origin.z + dir.z * t_entry).min(origin.z + dir.z * t_exit);
            if z_lo <= self.cell_zmax[ci] {
                // Triangles straddle cells, so accept hits in the full range.
                if visit(&self.cells[ci], t_min, t_max) {
                    return;
                }
            } else if dir.z >= 0.0 && origin.z + dir.z * t_entry > self.zmax {
                return;
            }
            if t_exit >= t1 {
                return;
            }
            if tx < ty {
                ix += sx;
                if ix < 0 || ix >= self.nx as i64 {
                    return;
                }
                tx += dtx;
            } else {
                iy += sy;
                if iy < 0 || iy >= self.ny as i64 {
                    return;
                }
                ty += dty;
            }
            t_entry = t_exit;
        }
    }
}
