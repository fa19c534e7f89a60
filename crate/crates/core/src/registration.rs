//! Embedding-space matching and rigid pose estimation.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{vec3_to_f64, Real, Vec3};

/// Proper rigid motion `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn translation(t: Vec3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Checks `RᵀR = I` and `det R = 1` to `tol`.
    pub fn new(rotation: Matrix3<T>, translation: Vec3<T>, tol: f64) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate(tol)?;
        Ok(t)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max().as_f64();
        let det = r.determinant().as_f64();
        if !(orth <= tol) || !((det - 1.0).abs() <= tol) {
            return Err(Error::invalid(format!(
                "not a proper rotation (|RᵀR − I| = {orth:e}, det = {det})"
            )));
        }
        if self.translation.iter().any(|v| !v.finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Angle of the rotation in radians.
    pub fn rotation_angle(&self) -> T {
        rotation_angle(&self.rotation)
    }
}

/// `arccos((tr R − 1)/2)` with the argument clamped to `[−1, 1]`.
pub fn rotation_angle<T: Real>(r: &Matrix3<T>) -> T {
    let c = (r.trace() - T::one()) * T::lit(0.5);
    c.max(-T::one()).min(T::one()).acos()
}

/// Rotation by `angle` radians about a unit `axis`.
pub fn axis_angle<T: Real>(axis: &Vec3<T>, angle: T) -> Matrix3<T> {
    let k = axis.normalize();
    let kx = Matrix3::new(
        T::zero(),
        -k.z,
        k.y,
        k.z,
        T::zero(),
        -k.x,
        -k.y,
        k.x,
        T::zero(),
    );
    Matrix3::identity() + kx * angle.sin() + kx * kx * (T::one() - angle.cos())
}

/// Optimal assignment for a non-negative `r × c` cost matrix. Returns
/// `min(r, c)` pairs `(row, col)` sorted by row.
pub fn hungarian<T: Real>(cost: &DMatrix<T>) -> Result<Vec<(usize, usize)>> {
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    if cost.iter().any(|v| !v.finite()) {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    if cost.iter().any(|&v| v < T::zero()) {
        return Err(Error::invalid("cost matrix has negative entries"));
    }
    let data: Vec<f64> = cost.iter().map(|v| v.as_f64()).collect();
    // column-major storage: (i, j) at i + r·j
    if r <= c {
        let at = |i: usize, j: usize| data[i + r * j];
        Ok(solve_rows(r, c, at))
    } else {
        let at = |i: usize, j: usize| data[j + r * i];
        let mut pairs: Vec<_> = solve_rows(c, r, at).into_iter().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Shortest augmenting path with dual potentials, `n ≤ m`, O(n²m).
fn solve_rows(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    // 1-based with column 0 as the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub us: usize,
    pub sdf: usize,
    pub cost: f64,
}

/// One-to-one US → SDF patch correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet<T: Real> {
    pub pairs: Vec<MatchPair>,
    pub source_centers: Vec<Vec3<T>>,
    pub target_centers: Vec<Vec3<T>>,
}

impl<T: Real> MatchSet<T> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn total_cost(&self) -> f64 {
        self.pairs.iter().map(|p| p.cost).sum()
    }

    /// JSON lines, one pair per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line {
            us: usize,
            sdf: usize,
            cost: f64,
            us_center: [f64; 3],
            sdf_center: [f64; 3],
        }
        let mut out = Vec::new();
        for ((p, s), t) in self.pairs.iter().zip(&self.source_centers).zip(&self.target_centers) {
            let line = Line {
                us: p.us,
                sdf: p.sdf,
                cost: p.cost,
                us_center: vec3_to_f64(s),
                sdf_center: vec3_to_f64(t),
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| Error::json(path, e))?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Euclidean distances between every US and SDF embedding.
pub fn embedding_costs<T: Real>(us: &[DVector<T>], sdf: &[DVector<T>]) -> Result<DMatrix<T>> {
    if let Some(d) = us.first().or(sdf.first()).map(|e| e.len()) {
        if us.iter().chain(sdf).any(|e| e.len() != d) {
            return Err(Error::invalid("embeddings differ in dimension"));
        }
    }
    let rows: Vec<Vec<T>> = us
        .par_iter()
        .map(|a| sdf.iter().map(|b| (a - b).norm()).collect())
        .collect();
    Ok(DMatrix::from_fn(us.len(), sdf.len(), |i, j| rows[i][j]))
}

/// Assigns every US patch to a distinct SDF patch minimising the summed
/// embedding distance.
pub fn match_patches<T: Real>(
    us_embeddings: &[DVector<T>],
    sdf_embeddings: &[DVector<T>],
    us_centers: &[Vec3<T>],
    sdf_centers: &[Vec3<T>],
) -> Result<MatchSet<T>> {
    if us_embeddings.len() != us_centers.len() || sdf_embeddings.len() != sdf_centers.len() {
        return Err(Error::invalid("embedding and center counts differ"));
    }
    if us_embeddings.len() > sdf_embeddings.len() {
        return Err(Error::invalid(format!(
            "{} US patches cannot be matched to {} SDF patches",
            us_embeddings.len(),
            sdf_embeddings.len()
        )));
    }
    let cost = embedding_costs(us_embeddings, sdf_embeddings)?;
    let assignment = hungarian(&cost)?;
    let mut set = MatchSet {
        pairs: Vec::with_capacity(assignment.len()),
        source_centers: Vec::with_capacity(assignment.len()),
        target_centers: Vec::with_capacity(assignment.len()),
    };
    for (i, j) in assignment {
        set.pairs.push(MatchPair {
            us: i,
            sdf: j,
            cost: cost[(i, j)].as_f64(),
        });
        set.source_centers.push(us_centers[i]);
        set.target_centers.push(sdf_centers[j]);
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcrustesMode {
    #[default]
    Rigid,
    /// Also fits an isotropic scale; the scale is reported but not part of
    /// the returned pose.
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcrustesFit<T: Real> {
    pub transform: RigidTransform<T>,
    pub scale: T,
    /// `Σ ‖s·R·xᵢ + t − yᵢ‖²` at the optimum, mm².
    pub loss: T,
}

/// Least-squares rigid alignment of `source` onto `target`.
pub fn procrustes<T: Real>(source: &[Vec3<T>], target: &[Vec3<T>]) -> Result<(RigidTransform<T>, T)> {
    let fit = procrustes_fit(source, target, ProcrustesMode::Rigid)?;
    Ok((fit.transform, fit.loss))
}

pub fn procrustes_fit<T: Real>(source: &[Vec3<T>], target: &[Vec3<T>], mode: ProcrustesMode) -> Result<ProcrustesFit<T>> {
    let n = source.len();
    if n != target.len() {
        return Err(Error::invalid("source and target sizes differ"));
    }
    if n < 3 {
        return Err(Error::invalid(format!("procrustes needs at least 3 points, got {n}")));
    }
    if source.iter().chain(target).any(|p| p.iter().any(|v| !v.finite())) {
        return Err(Error::invalid("non-finite point"));
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let sc = source.iter().fold(Vec3::zeros(), |a, p| a + p) * inv_n;
    let tc = target.iter().fold(Vec3::zeros(), |a, p| a + p) * inv_n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut src_var = T::zero();
    for (s, t) in source.iter().zip(target) {
        let a = s - sc;
        let b = t - tc;
        h += a * b.transpose();
        spread += a * a.transpose();
        src_var += a.norm_squared();
    }
    // rank of the centred source: at least two directions are needed
    let sv = spread.symmetric_eigenvalues();
    let mut ev = [sv[0].as_f64(), sv[1].as_f64(), sv[2].as_f64()];
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::invalid("source points are collinear or coincident"));
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let v = vt.transpose();
    let d = if (v * u.transpose()).determinant() < T::zero() {
        -T::one()
    } else {
        T::one()
    };
    // nalgebra does not order singular values; flip the smallest
    let sig = svd.singular_values;
    let smallest = (0..3).min_by(|&a, &b| sig[a].as_f64().total_cmp(&sig[b].as_f64())).unwrap_or(2);
    let mut dm = Matrix3::identity();
    dm[(smallest, smallest)] = d;
    let rotation = v * dm * u.transpose();
    let scale = match mode {
        ProcrustesMode::Rigid => T::one(),
        ProcrustesMode::Similarity => {
            let tr = (0..3).fold(T::zero(), |a, k| a + sig[k] * dm[(k, k)]);
            tr / src_var
        }
    };
    let translation = tc - rotation * sc * scale;
    let loss = source
        .iter()
        .zip(target)
        .fold(T::zero(), |a, (s, t)| a + (rotation * s * scale + translation - t).norm_squared());
    Ok(ProcrustesFit {
        transform: RigidTransform {
            rotation,
            translation,
        },
        scale,
        loss,
    })
}
