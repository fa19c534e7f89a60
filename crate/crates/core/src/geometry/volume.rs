use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{vec3_to_f64, Real, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VolumeKind {
    #[serde(rename = "US")]
    Us,
    #[serde(rename = "LABEL")]
    Label,
    #[serde(rename = "SDF")]
    Sdf,
}

/// Regular voxel grid with physical geometry. Values are stored x-fastest:
/// `index = i + nx * (j + ny * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume<T: Real> {
    dims: [usize; 3],
    spacing: Vec3<T>,
    origin: Vec3<T>,
    values: Vec<T>,
    kind: VolumeKind,
}

impl<T: Real> ScalarVolume<T> {
    pub fn new(
        dims: [usize; 3],
        spacing: Vec3<T>,
        origin: Vec3<T>,
        values: Vec<T>,
        kind: VolumeKind,
    ) -> Result<Self> {
        let count = dims.iter().product::<usize>();
        if dims.contains(&0) {
            return Err(Error::invalid(format!("volume dims {dims:?} contain zero")));
        }
        if values.len() != count {
            return Err(Error::invalid(format!(
                "volume has {} values, dims {dims:?} require {count}",
                values.len()
            )));
        }
        if spacing.iter().any(|s| !(*s > T::zero() && s.finite())) {
            return Err(Error::invalid("spacing must be strictly positive"));
        }
        if origin.iter().any(|o| !o.finite()) {
            return Err(Error::invalid("origin must be finite"));
        }
        if kind == VolumeKind::Label
            && values.iter().any(|&v| v != T::zero() && v != T::one())
        {
            return Err(Error::invalid("label volume values must be 0 or 1"));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            values,
            kind,
        })
    }

    pub fn filled(
        dims: [usize; 3],
        spacing: Vec3<T>,
        origin: Vec3<T>,
        value: T,
        kind: VolumeKind,
    ) -> Result<Self> {
        let count = dims.iter().product();
        Self::new(dims, spacing, origin, vec![value; count], kind)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn spacing(&self) -> Vec3<T> {
        self.spacing
    }
    pub fn origin(&self) -> Vec3<T> {
        self.origin
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn kind(&self) -> VolumeKind {
        self.kind
    }
    pub fn max_spacing(&self) -> T {
        self.spacing.max()
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let j = (index / self.dims[0]) % self.dims[1];
        let k = index / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.values[self.index(i, j, k)]
    }

    /// Value at signed voxel coordinates, or `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, idx: [isize; 3]) -> Option<T> {
        if idx
            .iter()
            .zip(self.dims.iter())
            .any(|(&c, &n)| c < 0 || c as usize >= n)
        {
            return None;
        }
        Some(self.get(idx[0] as usize, idx[1] as usize, idx[2] as usize))
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        self.origin
            + Vec3::new(
                T::from_usize_lossy(i) * self.spacing.x,
                T::from_usize_lossy(j) * self.spacing.y,
                T::from_usize_lossy(k) * self.spacing.z,
            )
    }

    /// Position of `p` in continuous voxel coordinates.
    pub fn continuous_index(&self, p: &Vec3<T>) -> Vec3<T> {
        (p - self.origin).component_div(&self.spacing)
    }

    /// Signed index of the voxel whose center is nearest to `p`
    /// (halves round away from zero).
    pub fn nearest_voxel(&self, p: &Vec3<T>) -> [isize; 3] {
        let c = self.continuous_index(p);
        [
            c.x.as_f64().round() as isize,
            c.y.as_f64().round() as isize,
            c.z.as_f64().round() as isize,
        ]
    }

    /// Physical position of the last voxel center.
    pub fn far_corner(&self) -> Vec3<T> {
        self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    /// Physical center of the grid (midpoint of first and last voxel centers).
    pub fn center(&self) -> Vec3<T> {
        (self.origin + self.far_corner()) * T::lit(0.5)
    }

    /// Trilinear interpolation; defined on the hull of voxel centers.
    pub fn trilinear_sample(&self, p: &Vec3<T>) -> Result<T> {
        let c = self.continuous_index(p);
        let eps = T::lit(1e-9);
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for axis in 0..3 {
            let n = self.dims[axis];
            let x = c[axis];
            let hi = T::from_usize_lossy(n - 1);
            if !x.finite() || x < -eps || x > hi + eps {
                return Err(Error::OutOfBounds {
                    point: vec3_to_f64(p),
                });
            }
            let x = x.max(T::zero()).min(hi);
            let fl = x.floor().as_f64() as usize;
            let b = fl.min(n.saturating_sub(2));
            base[axis] = b;
            frac[axis] = if n == 1 {
                T::zero()
            } else {
                x - T::from_usize_lossy(b)
            };
        }
        let step = |axis: usize| usize::from(self.dims[axis] > 1);
        let mut acc = T::zero();
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = weight(frac[0], dx) * weight(frac[1], dy) * weight(frac[2], dz);
                    if w == T::zero() {
                        continue;
                    }
                    let v = self.get(
                        base[0] + dx * step(0),
                        base[1] + dy * step(1),
                        base[2] + dz * step(2),
                    );
                    acc += w * v;
                }
            }
        }
        Ok(acc)
    }

    /// New volume on the same grid.
    pub fn with_values(&self, values: Vec<T>, kind: VolumeKind) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, values, kind)
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    /// Shifts the physical frame without touching the voxels.
    pub fn with_origin(mut self, origin: Vec3<T>) -> Self {
        self.origin = origin;
        self
    }

    /// Sub-volume of full x/y extent covering `depth` z-layers starting at
    /// `k0` (may be negative or run past the end; missing layers are filled
    /// with `pad`).
    pub fn z_slab(&self, k0: isize, depth: usize, pad: T) -> Result<Self> {
        let [nx, ny, nz] = self.dims;
        let mut values = Vec::with_capacity(nx * ny * depth);
        for dk in 0..depth {
            let k = k0 + dk as isize;
            if k < 0 || k as usize >= nz {
                values.extend(std::iter::repeat_n(pad, nx * ny));
            } else {
                let start = self.index(0, 0, k as usize);
                values.extend_from_slice(&self.values[start..start + nx * ny]);
            }
        }
        let origin = Vec3::new(
            self.origin.x,
            self.origin.y,
            self.origin.z + T::lit(k0 as f64) * self.spacing.z,
        );
        Self::new([nx, ny, depth], self.spacing, origin, values, self.kind)
    }
}

#[inline]
fn weight<T: Real>(frac: T, hi: usize) -> T {
    if hi == 1 {
        frac
    } else {
        T::one() - frac
    }
}
