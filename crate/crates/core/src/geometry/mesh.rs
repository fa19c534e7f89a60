use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};

/// Indexed triangle mesh in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh<T: Real> {
    vertices: Vec<Vec3<T>>,
    faces: Vec<[usize; 3]>,
}

impl<T: Real> TriangleMesh<T> {
    pub fn new(vertices: Vec<Vec3<T>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(i) = vertices
            .iter()
            .position(|v| !(v.x.finite() && v.y.finite() && v.z.finite()))
        {
            return Err(Error::invalid(format!("vertex {i} is not finite")));
        }
        let n = vertices.len();
        if let Some((fi, _)) = faces
            .iter()
            .enumerate()
            .find(|(_, f)| f.iter().any(|&i| i >= n))
        {
            return Err(Error::invalid(format!(
                "face {fi} references a vertex index >= {n}"
            )));
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3<T>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Same connectivity, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3<T>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::invalid(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Self::new(vertices, self.faces.clone())
    }

    pub fn triangle(&self, face: usize) -> [Vec3<T>; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn bounding_box(&self) -> Option<(Vec3<T>, Vec3<T>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    pub fn centroid(&self) -> Option<Vec3<T>> {
        if self.vertices.is_empty() {
            return None;
        }
        let sum = self
            .vertices
            .iter()
            .fold(Vec3::zeros(), |acc, v| acc + v);
        Some(sum / T::from_usize_lossy(self.vertices.len()))
    }

    /// `(min z, max z)` over the vertices.
    pub fn z_extent(&self) -> Option<(T, T)> {
        self.bounding_box().map(|(lo, hi)| (lo.z, hi.z))
    }

    /// Rejects repeated indices and (near-)zero-area faces.
    pub fn check_faces(&self) -> Result<()> {
        let scale = self
            .bounding_box()
            .map(|(lo, hi)| (hi - lo).norm())
            .unwrap_or_else(T::one);
        let min_area2 = (scale * scale * T::lit(1e-12)).powi(2);
        for (fi, f) in self.faces.iter().enumerate() {
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::DegenerateFace {
                    face: fi,
                    reason: "repeated vertex index".into(),
                });
            }
            let [a, b, c] = self.triangle(fi);
            if (b - a).cross(&(c - a)).norm_squared() <= min_area2 {
                return Err(Error::DegenerateFace {
                    face: fi,
                    reason: "zero area".into(),
                });
            }
        }
        Ok(())
    }

    /// Every undirected edge must be shared by exactly two faces that
    /// traverse it in opposite directions (closed, consistently oriented).
    pub fn check_watertight(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::NotWatertight("mesh has no faces".into()));
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *directed.entry((a, b)).or_default() += 1;
            }
        }
        let mut keys: Vec<_> = directed.iter().collect();
        keys.sort();
        for (&(a, b), &count) in keys {
            if count != 1 {
                return Err(Error::NotWatertight(format!(
                    "directed edge ({a}, {b}) used {count} times (inconsistent orientation or non-manifold)"
                )));
            }
            if !directed.contains_key(&(b, a)) {
                return Err(Error::NotWatertight(format!(
                    "boundary edge ({a}, {b})"
                )));
            }
        }
        Ok(())
    }

    /// Enclosed volume by the divergence theorem; positive for outward
    /// oriented closed meshes.
    pub fn signed_volume(&self) -> T {
        let six = T::lit(6.0);
        self.faces
            .iter()
            .enumerate()
            .map(|(fi, _)| {
                let [a, b, c] = self.triangle(fi);
                a.dot(&b.cross(&c)) / six
            })
            .fold(T::zero(), |acc, v| acc + v)
    }

    pub fn surface_area(&self) -> T {
        let half = T::lit(0.5);
        (0..self.faces.len())
            .map(|fi| {
                let [a, b, c] = self.triangle(fi);
                (b - a).cross(&(c - a)).norm() * half
            })
            .fold(T::zero(), |acc, v| acc + v)
    }

    /// Index of the vertex nearest to `p` (lowest index on ties).
    pub fn nearest_vertex(&self, p: &Vec3<T>) -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        for (i, v) in self.vertices.iter().enumerate() {
            let d = (v - p).norm_squared();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Unit icosphere (outward oriented), refined `subdivisions` times.
pub fn icosphere<T: Real>(subdivisions: usize) -> TriangleMesh<T> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let normalize = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    for v in verts.iter_mut() {
        *v = normalize(*v);
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(normalize([
                    (p[0] + q[0]) / 2.0,
                    (p[1] + q[1]) / 2.0,
                    (p[2] + q[2]) / 2.0,
                ]));
                verts.len() - 1
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = verts
        .into_iter()
        .map(|v| Vec3::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2])))
        .collect();
    TriangleMesh { vertices, faces }
}
