//! Point distribution model over corresponded shapes.
//!
//! Shapes are flattened to rows `(x0, y0, z0, x1, …)`. The eigenpairs of
//! the `d × d` covariance are recovered from the `n × n` Gram matrix of the
//! centered data, which has the same non-zero spectrum.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{io as geo_io, TriangleMesh};
use crate::scalar::{Real, Vec3};

/// How mode coefficients are scaled when synthesizing a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeScaling {
    /// `α_j · √λ_j · v_j`: unit-normal coefficients reproduce the covariance.
    #[default]
    Sqrt,
    /// `α_j · λ_j · v_j`, the literal variant.
    Raw,
}

#[derive(Debug, Clone)]
pub struct CorrespondedShapeSet<T: Real> {
    coords: DMatrix<T>,
    faces: Vec<[usize; 3]>,
}

impl<T: Real> CorrespondedShapeSet<T> {
    /// Shapes corresponded by vertex index. All meshes must have the same
    /// vertex count; the first mesh's faces are kept as the shared topology.
    pub fn from_meshes(meshes: &[TriangleMesh<T>]) -> Result<Self> {
        if meshes.len() < 2 {
            return Err(Error::invalid(format!(
                "a shape set needs at least 2 shapes, got {}",
                meshes.len()
            )));
        }
        let m = meshes[0].vertex_count();
        if m == 0 {
            return Err(Error::invalid("shapes have no vertices"));
        }
        if let Some((i, mesh)) = meshes
            .iter()
            .enumerate()
            .find(|(_, mesh)| mesh.vertex_count() != m)
        {
            return Err(Error::invalid(format!(
                "shape {i} has {} vertices, shape 0 has {m}",
                mesh.vertex_count()
            )));
        }
        let coords = DMatrix::from_fn(meshes.len(), 3 * m, |r, c| {
            meshes[r].vertices()[c / 3][c % 3]
        });
        Ok(Self {
            coords,
            faces: meshes[0].faces().to_vec(),
        })
    }

    pub fn from_matrix(coords: DMatrix<T>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if coords.nrows() < 2 {
            return Err(Error::invalid("a shape set needs at least 2 shapes"));
        }
        if coords.ncols() == 0 || coords.ncols() % 3 != 0 {
            return Err(Error::invalid("shape rows must hold 3·m coordinates"));
        }
        Ok(Self { coords, faces })
    }

    /// Directory of OBJ files, ordered by file name.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "obj"))
            .collect();
        paths.sort();
        let meshes = paths
            .iter()
            .map(|p| geo_io::read_obj(p))
            .collect::<Result<Vec<_>>>()?;
        Self::from_meshes(&meshes)
    }

    pub fn n_shapes(&self) -> usize {
        self.coords.nrows()
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.ncols() / 3
    }

    pub fn coords(&self) -> &DMatrix<T> {
        &self.coords
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn shape(&self, i: usize) -> DVector<T> {
        self.coords.row(i).transpose()
    }

    pub fn mesh(&self, i: usize) -> Result<TriangleMesh<T>> {
        mesh_from_flat(&self.shape(i), &self.faces)
    }

    /// Subset of shapes by row index, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let coords = self.coords.select_rows(rows.iter());
        Self::from_matrix(coords, self.faces.clone())
    }
}

pub fn mesh_from_flat<T: Real>(flat: &DVector<T>, faces: &[[usize; 3]]) -> Result<TriangleMesh<T>> {
    let vertices = (0..flat.len() / 3)
        .map(|v| Vec3::new(flat[3 * v], flat[3 * v + 1], flat[3 * v + 2]))
        .collect();
    TriangleMesh::new(vertices, faces.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdmModel<T: Real> {
    n: usize,
    mean: DVector<T>,
    /// `d × modes`, columns are unit eigenvectors.
    eigvecs: DMatrix<T>,
    eigvals: Vec<T>,
}

impl<T: Real> PdmModel<T> {
    pub fn n_shapes(&self) -> usize {
        self.n
    }
    pub fn n_vertices(&self) -> usize {
        self.mean.len() / 3
    }
    pub fn modes(&self) -> usize {
        self.eigvals.len()
    }
    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }
    pub fn eigvals(&self) -> &[T] {
        &self.eigvals
    }
    pub fn eigvecs(&self) -> &DMatrix<T> {
        &self.eigvecs
    }
    pub fn covariance_divisor(&self) -> usize {
        self.n - 1
    }

    /// Mean shape with the given topology.
    pub fn mean_mesh(&self, faces: &[[usize; 3]]) -> Result<TriangleMesh<T>> {
        mesh_from_flat(&self.mean, faces)
    }

    /// Mode coefficients of `shape` in the same scaling `sample_shape` uses.
    pub fn project(&self, shape: &DVector<T>, scaling: ModeScaling) -> Result<SampleCoefficients<T>> {
        if shape.len() != self.mean.len() {
            return Err(Error::invalid("shape length does not match the model"));
        }
        let centered = shape - &self.mean;
        let alphas = (0..self.modes())
            .map(|j| {
                let c = self.eigvecs.column(j).dot(&centered);
                c / mode_scale(self.eigvals[j], scaling)
            })
            .collect();
        Ok(SampleCoefficients { alphas })
    }
}

#[inline]
fn mode_scale<T: Real>(lambda: T, scaling: ModeScaling) -> T {
    match scaling {
        ModeScaling::Sqrt => lambda.sqrt(),
        ModeScaling::Raw => lambda,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCoefficients<T: Real> {
    pub alphas: Vec<T>,
}

/// Builds the model; modes whose eigenvalue does not exceed `1e-10·λ_max`
/// are dropped, so at most `n − 1` remain.
pub fn build_pdm<T: Real>(shapes: &CorrespondedShapeSet<T>) -> Result<PdmModel<T>> {
    let x = shapes.coords();
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("PDM needs at least 2 shapes"));
    }
    let nf = T::from_usize_lossy(n);
    let divisor = T::from_usize_lossy(n - 1);
    let mean: DVector<T> = x.row_sum().transpose() / nf;
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let gram = (&centered * centered.transpose()) / divisor;
    let eig = SymmetricEigen::new(gram);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lambda_max = eig.eigenvalues[order[0]].max(T::zero());
    // Round-off floor for a PSD matrix: relative to its largest eigenvalue.
    let rel = T::lit(1e-10).max(T::default_epsilon() * T::lit(100.0));
    let neg_tol = rel * lambda_max.max(T::one());
    let keep_tol = rel * lambda_max;
    let mut eigvals = Vec::new();
    let mut columns = Vec::new();
    for &i in &order {
        let lambda = eig.eigenvalues[i];
        if lambda < -neg_tol {
            return Err(Error::Numerical(format!(
                "covariance eigenvalue {} is negative beyond round-off",
                lambda.as_f64()
            )));
        }
        if lambda <= keep_tol || lambda <= T::zero() {
            continue;
        }
        // v = Yᵀu / √((n−1)λ) is a unit eigenvector of S = YᵀY/(n−1).
        let u = eig.eigenvectors.column(i);
        let v = centered.transpose() * u / (divisor * lambda).sqrt();
        eigvals.push(lambda);
        columns.push(v);
    }
    let d = x.ncols();
    let eigvecs = if columns.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&columns)
    };
    Ok(PdmModel {
        n,
        mean,
        eigvecs,
        eigvals,
    })
}

/// `mean + Σ α_j · s(λ_j) · v_j` with `s` chosen by `scaling`.
pub fn sample_shape<T: Real>(
    pdm: &PdmModel<T>,
    coeffs: &SampleCoefficients<T>,
    scaling: ModeScaling,
) -> Result<DVector<T>> {
    if coeffs.alphas.len() > pdm.modes() {
        return Err(Error::invalid(format!(
            "{} coefficients for a model with {} modes",
            coeffs.alphas.len(),
            pdm.modes()
        )));
    }
    let mut out = pdm.mean.clone();
    for (j, &a) in coeffs.alphas.iter().enumerate() {
        out.axpy(a * mode_scale(pdm.eigvals[j], scaling), &pdm.eigvecs.column(j), T::one());
    }
    Ok(out)
}

/// `modes` independent draws from `N(0, std²)`.
pub fn random_coeffs<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    std: f64,
    modes: usize,
) -> Result<SampleCoefficients<T>> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid(format!("coefficient std {std} must be >= 0")));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(SampleCoefficients {
        alphas: (0..modes).map(|_| T::lit(normal.sample(rng))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdmHeader {
    pub n: usize,
    pub m: usize,
    pub modes: usize,
    pub covariance_divisor: usize,
}

/// `<stem>.pdm.json` and `<stem>.pdm.raw`.
pub fn pdm_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.pdm.json")), PathBuf::from(format!("{s}.pdm.raw")))
}

/// Raw layout: mean, eigenvalues, eigenvectors (mode-major), as f32le.
pub fn write_pdm<T: Real>(pdm: &PdmModel<T>, stem: &Path) -> Result<()> {
    let (json_path, raw_path) = pdm_paths(stem);
    let header = PdmHeader {
        n: pdm.n,
        m: pdm.n_vertices(),
        modes: pdm.modes(),
        covariance_divisor: pdm.covariance_divisor(),
    };
    let text = serde_json::to_string(&header).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::new();
    let mut push = |v: T| bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    pdm.mean.iter().for_each(|&v| push(v));
    pdm.eigvals.iter().for_each(|&v| push(v));
    for j in 0..pdm.modes() {
        pdm.eigvecs.column(j).iter().for_each(|&v| push(v));
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

pub fn read_pdm<T: Real>(stem: &Path) -> Result<PdmModel<T>> {
    let (json_path, raw_path) = pdm_paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let bad = |path: &Path, reason: String| Error::Format {
        format: "PDM",
        path: path.to_path_buf(),
        reason,
    };
    let h: PdmHeader = serde_json::from_str(&text).map_err(|e| bad(&json_path, e.to_string()))?;
    if h.n < 2 || h.covariance_divisor != h.n - 1 || h.modes > h.n - 1 {
        return Err(bad(&json_path, "inconsistent header".into()));
    }
    let d = 3 * h.m;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = (d + h.modes + h.modes * d) * 4;
    if bytes.len() != expected {
        return Err(bad(
            &raw_path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let vals: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok(PdmModel {
        n: h.n,
        mean: DVector::from_column_slice(&vals[..d]),
        eigvals: vals[d..d + h.modes].to_vec(),
        eigvecs: DMatrix::from_column_slice(d, h.modes, &vals[d + h.modes..]),
    })
}
