//! Signed distance fields from closed triangle meshes.
//!
//! Distances come from a nearest-triangle query on an AABB hierarchy. The
//! sign comes from ray parity: one ray per grid row along +x, counting the
//! crossings beyond each voxel center. Rays that pass within tolerance of a
//! triangle edge are re-cast with a small deterministic offset.

use rayon::prelude::*;

use super::mesh::TriangleMesh;
use super::volume::{ScalarVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};

const LEAF_SIZE: usize = 4;
const MAX_JITTERS: usize = 24;

#[derive(Debug, Clone)]
struct Node<T: Real> {
    lo: Vec3<T>,
    hi: Vec3<T>,
    // Leaf: triangles[start..start + count]; inner: children at `start`, `start + 1`.
    start: usize,
    count: usize,
}

/// Nearest-surface and inside/outside queries against a closed mesh.
#[derive(Debug, Clone)]
pub struct SurfaceQuery<'a, T: Real> {
    mesh: &'a TriangleMesh<T>,
    nodes: Vec<Node<T>>,
    order: Vec<usize>,
    edge_tol: T,
}

impl<'a, T: Real> SurfaceQuery<'a, T> {
    /// Validates the mesh (watertight, no degenerate faces) and builds the
    /// hierarchy.
    pub fn new(mesh: &'a TriangleMesh<T>) -> Result<Self> {
        mesh.check_faces()?;
        mesh.check_watertight()?;
        let (lo, hi) = mesh
            .bounding_box()
            .ok_or_else(|| Error::invalid("mesh has no vertices"))?;
        let scale = (hi - lo).norm();
        let mut q = Self {
            mesh,
            nodes: Vec::new(),
            order: (0..mesh.faces().len()).collect(),
            edge_tol: scale * scale * T::lit(1e-12),
        };
        let centroids: Vec<Vec3<T>> = (0..mesh.faces().len())
            .map(|f| {
                let [a, b, c] = mesh.triangle(f);
                (a + b + c) / T::lit(3.0)
            })
            .collect();
        q.nodes.push(Node {
            lo,
            hi,
            start: 0,
            count: 0,
        });
        q.build(0, 0, mesh.faces().len(), &centroids);
        Ok(q)
    }

    fn build(&mut self, node: usize, start: usize, end: usize, centroids: &[Vec3<T>]) {
        let (lo, hi) = self.order[start..end].iter().fold(
            (
                Vec3::repeat(T::max_value().unwrap()),
                Vec3::repeat(T::min_value().unwrap()),
            ),
            |(lo, hi), &f| {
                let [a, b, c] = self.mesh.triangle(f);
                (lo.inf(&a).inf(&b).inf(&c), hi.sup(&a).sup(&b).sup(&c))
            },
        );
        self.nodes[node].lo = lo;
        self.nodes[node].hi = hi;
        if end - start <= LEAF_SIZE {
            self.nodes[node].start = start;
            self.nodes[node].count = end - start;
            return;
        }
        let (clo, chi) = self.order[start..end].iter().fold(
            (centroids[self.order[start]], centroids[self.order[start]]),
            |(lo, hi), &f| (lo.inf(&centroids[f]), hi.sup(&centroids[f])),
        );
        let ext = chi - clo;
        let axis = ext.imax();
        let mid = (start + end) / 2;
        self.order[start..end].sort_by(|&a, &b| {
            centroids[a][axis]
                .partial_cmp(&centroids[b][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let left = self.nodes.len();
        let placeholder = Node {
            lo,
            hi,
            start: 0,
            count: 0,
        };
        self.nodes.push(placeholder.clone());
        self.nodes.push(placeholder);
        self.nodes[node].start = left;
        self.nodes[node].count = 0;
        self.build(left, start, mid, centroids);
        self.build(left + 1, mid, end, centroids);
    }

    pub fn mesh(&self) -> &TriangleMesh<T> {
        self.mesh
    }

    /// Unsigned Euclidean distance from `p` to the surface.
    pub fn distance(&self, p: &Vec3<T>) -> T {
        self.closest(p).0.sqrt()
    }

    /// Squared distance and the index of the nearest face.
    pub fn closest(&self, p: &Vec3<T>) -> (T, usize) {
        let mut best = T::max_value().unwrap();
        let mut best_face = 0;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if box_dist2(p, &node.lo, &node.hi) >= best {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.start..node.start + node.count] {
                    let [a, b, c] = self.mesh.triangle(f);
                    let d = (closest_point_on_triangle(p, &a, &b, &c) - p).norm_squared();
                    if d < best || (d == best && f < best_face) {
                        best = d;
                        best_face = f;
                    }
                }
            } else {
                let (l, r) = (node.start, node.start + 1);
                let dl = box_dist2(p, &self.nodes[l].lo, &self.nodes[l].hi);
                let dr = box_dist2(p, &self.nodes[r].lo, &self.nodes[r].hi);
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        (best, best_face)
    }

    /// x-coordinates where the ray `{(x, y, z) : x ∈ ℝ}` crosses the
    /// surface, sorted ascending. `None` when the ray grazes an edge.
    fn row_crossings(&self, y: T, z: T, faces: &[usize]) -> Option<Vec<T>> {
        let mut hits = Vec::new();
        for &f in faces {
            let [a, b, c] = self.mesh.triangle(f);
            let e0 = edge(b.y, b.z, c.y, c.z, y, z);
            let e1 = edge(c.y, c.z, a.y, a.z, y, z);
            let e2 = edge(a.y, a.z, b.y, b.z, y, z);
            let area = e0 + e1 + e2;
            if area.abs() <= self.edge_tol {
                // Triangle parallel to the ray: its neighbours decide, unless
                // the ray runs through its (segment-shaped) footprint.
                let on_line = e0.abs() <= self.edge_tol
                    && e1.abs() <= self.edge_tol
                    && e2.abs() <= self.edge_tol;
                let tol = self.edge_tol.sqrt();
                let in_box = y >= a.y.min(b.y).min(c.y) - tol
                    && y <= a.y.max(b.y).max(c.y) + tol
                    && z >= a.z.min(b.z).min(c.z) - tol
                    && z <= a.z.max(b.z).max(c.z) + tol;
                if on_line && in_box {
                    return None;
                }
                continue;
            }
            let near = |e: T| e.abs() <= self.edge_tol;
            if near(e0) || near(e1) || near(e2) {
                let pos = e0 >= T::zero() && e1 >= T::zero() && e2 >= T::zero();
                let neg = e0 <= T::zero() && e1 <= T::zero() && e2 <= T::zero();
                if pos || neg {
                    return None;
                }
                continue;
            }
            let inside = (e0 > T::zero() && e1 > T::zero() && e2 > T::zero())
                || (e0 < T::zero() && e1 < T::zero() && e2 < T::zero());
            if inside {
                hits.push((e0 * a.x + e1 * b.x + e2 * c.x) / area);
            }
        }
        hits.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Some(hits)
    }

    fn faces_overlapping(&self, y: T, z: T, tol: T) -> Vec<usize> {
        (0..self.mesh.faces().len())
            .filter(|&f| {
                let [a, b, c] = self.mesh.triangle(f);
                let ylo = a.y.min(b.y).min(c.y) - tol;
                let yhi = a.y.max(b.y).max(c.y) + tol;
                let zlo = a.z.min(b.z).min(c.z) - tol;
                let zhi = a.z.max(b.z).max(c.z) + tol;
                y >= ylo && y <= yhi && z >= zlo && z <= zhi
            })
            .collect()
    }

    /// Crossings of a row, re-casting with small offsets if it grazes an edge.
    fn robust_crossings(&self, y: T, z: T, faces: &[usize], jitter_scale: T) -> Result<Vec<T>> {
        for attempt in 0..=MAX_JITTERS {
            let (dy, dz) = jitter(attempt, jitter_scale);
            if let Some(hits) = self.row_crossings(y + dy, z + dz, faces) {
                return Ok(hits);
            }
        }
        Err(Error::Numerical(format!(
            "ray parity ambiguous at y={}, z={} after {MAX_JITTERS} jitters",
            y.as_f64(),
            z.as_f64()
        )))
    }

    /// True when `p` is inside the closed surface.
    pub fn is_inside(&self, p: &Vec3<T>) -> Result<bool> {
        let tol = self.edge_tol.sqrt() + T::lit(1e-6);
        let faces = self.faces_overlapping(p.y, p.z, tol);
        let hits = self.robust_crossings(p.y, p.z, &faces, T::lit(1e-7))?;
        Ok(hits.iter().filter(|&&x| x > p.x).count() % 2 == 1)
    }

    /// Signed distance at an arbitrary point; negative inside.
    pub fn signed_distance(&self, p: &Vec3<T>) -> Result<T> {
        let d = self.distance(p);
        Ok(if self.is_inside(p)? { -d } else { d })
    }
}

#[inline]
fn edge<T: Real>(ay: T, az: T, by: T, bz: T, y: T, z: T) -> T {
    (by - ay) * (z - az) - (bz - az) * (y - ay)
}

fn jitter<T: Real>(attempt: usize, scale: T) -> (T, T) {
    if attempt == 0 {
        return (T::zero(), T::zero());
    }
    let k = attempt as f64;
    let dy = ((k * 0.618_033_988_749_895).fract() - 0.5) * 2.0;
    let dz = ((k * 0.414_213_562_373_095).fract() - 0.5) * 2.0;
    (scale * T::lit(dy * k), scale * T::lit(dz * k))
}

#[inline]
fn box_dist2<T: Real>(p: &Vec3<T>, lo: &Vec3<T>, hi: &Vec3<T>) -> T {
    let mut d = T::zero();
    for a in 0..3 {
        let v = if p[a] < lo[a] {
            lo[a] - p[a]
        } else if p[a] > hi[a] {
            p[a] - hi[a]
        } else {
            T::zero()
        };
        d += v * v;
    }
    d
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle<T: Real>(
    p: &Vec3<T>,
    a: &Vec3<T>,
    b: &Vec3<T>,
    c: &Vec3<T>,
) -> Vec3<T> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= T::zero() && d2 <= T::zero() {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= T::zero() && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= T::zero() && d1 >= T::zero() && d3 <= T::zero() {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= T::zero() && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= T::zero() && d2 >= T::zero() && d6 <= T::zero() {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= T::zero() && (d4 - d3) >= T::zero() && (d5 - d6) >= T::zero() {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = T::one() / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Signed distance field of `mesh` sampled on a caller-supplied grid.
pub fn sdf_on_grid<T: Real>(
    mesh: &TriangleMesh<T>,
    dims: [usize; 3],
    spacing: Vec3<T>,
    origin: Vec3<T>,
) -> Result<ScalarVolume<T>> {
    let query = SurfaceQuery::new(mesh)?;
    let grid = ScalarVolume::filled(dims, spacing, origin, T::zero(), VolumeKind::Sdf)?;
    let [nx, ny, nz] = dims;
    let tol = query.edge_tol.sqrt() + spacing.min() * T::lit(1e-3);

    // Faces bucketed by the z-layers their extent touches.
    let mut layer_faces: Vec<Vec<usize>> = vec![Vec::new(); nz];
    for f in 0..mesh.faces().len() {
        let [a, b, c] = mesh.triangle(f);
        let zlo = ((a.z.min(b.z).min(c.z) - tol - origin.z) / spacing.z).floor().as_f64();
        let zhi = ((a.z.max(b.z).max(c.z) + tol - origin.z) / spacing.z).ceil().as_f64();
        let lo = zlo.max(0.0) as usize;
        let hi = (zhi.min((nz - 1) as f64)).max(-1.0);
        if hi < 0.0 {
            continue;
        }
        for layer in layer_faces.iter_mut().take(hi as usize + 1).skip(lo) {
            layer.push(f);
        }
    }

    let jitter_scale = spacing.min() * T::lit(1e-5);
    let layers: Vec<Result<Vec<T>>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                let row_origin = grid.voxel_center(0, j, k);
                let (y, z) = (row_origin.y, row_origin.z);
                let faces: Vec<usize> = layer_faces[k]
                    .iter()
                    .copied()
                    .filter(|&f| {
                        let [a, b, c] = mesh.triangle(f);
                        y >= a.y.min(b.y).min(c.y) - tol && y <= a.y.max(b.y).max(c.y) + tol
                    })
                    .collect();
                let hits = query.robust_crossings(y, z, &faces, jitter_scale)?;
                let mut beyond = hits.len();
                let mut h = 0;
                for i in 0..nx {
                    let p = grid.voxel_center(i, j, k);
                    while h < hits.len() && hits[h] <= p.x {
                        h += 1;
                        beyond -= 1;
                    }
                    let d = query.distance(&p);
                    out.push(if beyond % 2 == 1 { -d } else { d });
                }
            }
            Ok(out)
        })
        .collect();
    let mut values = Vec::with_capacity(nx * ny * nz);
    for layer in layers {
        values.extend(layer?);
    }
    grid.with_values(values, VolumeKind::Sdf)
}

/// Grid covering the mesh bounding box grown by `padding` on every side.
pub fn padded_grid<T: Real>(
    mesh: &TriangleMesh<T>,
    spacing: Vec3<T>,
    padding: T,
) -> Result<([usize; 3], Vec3<T>)> {
    if spacing.iter().any(|s| *s <= T::zero()) {
        return Err(Error::invalid("spacing must be strictly positive"));
    }
    if padding < T::zero() {
        return Err(Error::invalid("padding must be non-negative"));
    }
    let (lo, hi) = mesh
        .bounding_box()
        .ok_or_else(|| Error::invalid("mesh has no vertices"))?;
    let origin = lo - Vec3::repeat(padding);
    let extent = hi - lo + Vec3::repeat(padding * T::lit(2.0));
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = (extent[a] / spacing[a]).ceil().as_f64() as usize + 1;
    }
    Ok((dims, origin))
}

/// Voxelizes the signed distance to `mesh` (negative inside) over its
/// bounding box expanded by `padding` mm.
pub fn voxelize_sdf<T: Real>(
    mesh: &TriangleMesh<T>,
    spacing: Vec3<T>,
    padding: T,
) -> Result<ScalarVolume<T>> {
    let (dims, origin) = padded_grid(mesh, spacing, padding)?;
    sdf_on_grid(mesh, dims, spacing, origin)
}
