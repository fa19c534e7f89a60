//! Slice pose inference: global match, then KDE-restricted refinement.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{oracle_embed_point, EncoderModel};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sampling, ScalarVolume, VolumeKind};
use crate::patching::{centroid_vertex, default_pad, extract_patch, sample_inference_patches, Patch, PatchDims};
use crate::registration::{match_patches, procrustes_fit, ProcrustesMode, RigidTransform};
use crate::scalar::{Real, Vec3};
use crate::seeding::{derive_seed, rng_from_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationConfig {
    pub m_kde: usize,
    /// Half-width of the z band kept around a candidate, mm.
    pub w_restr: f64,
    pub m_step: usize,
    pub n_us_patches: usize,
    pub n_sdf_patches: usize,
    pub kde_bandwidth: Bandwidth,
    pub kde_grid_step: f64,
    pub procrustes: ProcrustesMode,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            m_kde: 3,
            w_restr: 5.0,
            m_step: 2,
            n_us_patches: 64,
            n_sdf_patches: 256,
            kde_bandwidth: Bandwidth::default(),
            kde_grid_step: 0.25,
            procrustes: ProcrustesMode::Rigid,
        }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_kde == 0 || self.n_us_patches == 0 || self.n_sdf_patches == 0 {
            return Err(Error::invalid("m_kde and patch counts must be at least 1"));
        }
        if !(self.w_restr > 0.0 && self.w_restr.is_finite()) {
            return Err(Error::invalid("w_restr must be > 0"));
        }
        if !(self.kde_grid_step > 0.0 && self.kde_grid_step.is_finite()) {
            return Err(Error::invalid("kde_grid_step must be > 0"));
        }
        if let Bandwidth::Fixed(h) = self.kde_bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::invalid("kde_bandwidth must be > 0 or \"auto\""));
            }
        }
        Ok(())
    }

    fn bandwidth(&self, zs: &[f64]) -> f64 {
        match self.kde_bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto(_) => silverman_bandwidth(zs).max(self.kde_grid_step),
        }
    }
}

/// `1.06·σ̂·n^(−1/5)` with the sample standard deviation.
pub fn silverman_bandwidth(zs: &[f64]) -> f64 {
    let n = zs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = zs.iter().sum::<f64>() / n as f64;
    let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.06 * var.sqrt() * (n as f64).powf(-0.2)
}

/// Gaussian-kernel density of `zs` on a regular grid over
/// `[min − 3h, max + 3h]`; returns up to `m` strict local maxima, highest
/// density first. A flat run of equal values counts once, at its middle.
pub fn kde_local_maxima(zs: &[f64], bandwidth: f64, grid_step: f64, m: usize) -> Result<Vec<f64>> {
    if zs.is_empty() {
        return Err(Error::invalid("kde needs at least one value"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) || !(grid_step > 0.0 && grid_step.is_finite()) {
        return Err(Error::invalid("bandwidth and grid step must be > 0"));
    }
    if zs.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("non-finite kde sample"));
    }
    let lo = zs.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    let n_grid = ((hi - lo) / grid_step).floor() as usize + 1;
    let norm = 1.0 / (zs.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..n_grid).map(|g| lo + g as f64 * grid_step).collect();
    let density: Vec<f64> = grid
        .iter()
        .map(|&z| {
            norm * zs
                .iter()
                .map(|&zi| (-0.5 * ((z - zi) / bandwidth).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    let mut maxima = Vec::new();
    let mut g = 0;
    while g < n_grid {
        let mut end = g;
        while end + 1 < n_grid && density[end + 1] == density[g] {
            end += 1;
        }
        let left = if g == 0 { f64::NEG_INFINITY } else { density[g - 1] };
        let right = if end + 1 == n_grid { f64::NEG_INFINITY } else { density[end + 1] };
        if density[g] > left && density[g] > right {
            maxima.push(((g + end) / 2, density[g]));
        }
        g = end + 1;
    }
    maxima.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    maxima.truncate(m);
    Ok(maxima.into_iter().map(|(i, _)| grid[i]).collect())
}

/// Indices of vertices with `z ∈ [z_center − w, z_center + w]`.
pub fn restrict_mesh<T: Real>(vertices: &[Vec3<T>], z_center: f64, w_restr: f64) -> Vec<usize> {
    vertices
        .iter()
        .enumerate()
        .filter(|(_, p)| (p.z.as_f64() - z_center).abs() <= w_restr)
        .map(|(i, _)| i)
        .collect()
}

/// Maps patches into the shared embedding space.
pub trait Embedder<T: Real>: Sync {
    fn embed_us(&self, patches: &[Patch<T>], rng: &mut SeededRng) -> Result<Vec<DVector<T>>>;

    /// Embeddings of SDF patches centred on the given shape vertices.
    fn embed_sdf(&self, vertices: &[usize], positions: &[Vec3<T>], rng: &mut SeededRng) -> Result<Vec<DVector<T>>>;
}

/// Trained encoders; SDF embeddings of every vertex are computed once.
pub struct LearnedEmbedder<T: Real> {
    us_model: EncoderModel<T>,
    vertex_embeddings: Vec<DVector<T>>,
}

impl<T: Real> LearnedEmbedder<T> {
    pub fn new(
        us_model: EncoderModel<T>,
        sdf_model: &EncoderModel<T>,
        sdf: &ScalarVolume<T>,
        vertices: &[Vec3<T>],
    ) -> Result<Self> {
        if sdf.kind() != VolumeKind::Sdf {
            return Err(Error::invalid("learned embedder needs an SDF volume"));
        }
        if us_model.embedding_dim() != sdf_model.embedding_dim() {
            return Err(Error::invalid("encoders disagree on embedding dimension"));
        }
        let dims = sdf_model.config().patch_dims;
        let pad = default_pad(sdf, dims);
        let vertex_embeddings = vertices
            .par_iter()
            .map(|v| sdf_model.embed(&extract_patch(sdf, *v, dims, pad)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            us_model,
            vertex_embeddings,
        })
    }

    pub fn patch_dims(&self) -> PatchDims {
        self.us_model.config().patch_dims
    }
}

impl<T: Real> Embedder<T> for LearnedEmbedder<T> {
    fn embed_us(&self, patches: &[Patch<T>], _: &mut SeededRng) -> Result<Vec<DVector<T>>> {
        patches.par_iter().map(|p| self.us_model.embed(p)).collect()
    }

    fn embed_sdf(&self, vertices: &[usize], _: &[Vec3<T>], _: &mut SeededRng) -> Result<Vec<DVector<T>>> {
        vertices
            .iter()
            .map(|&v| {
                self.vertex_embeddings
                    .get(v)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("vertex {v} out of range")))
            })
            .collect()
    }
}

/// Test double: US patches embed as their ground-truth position in the
/// shape frame plus isotropic noise; SDF patches embed as their exact center,
/// so `noise_std` is the whole cross-modal discrepancy.
pub struct OracleEmbedder<T: Real> {
    pub slice_to_shape: RigidTransform<T>,
    pub noise_std: f64,
}

impl<T: Real> Embedder<T> for OracleEmbedder<T> {
    fn embed_us(&self, patches: &[Patch<T>], rng: &mut SeededRng) -> Result<Vec<DVector<T>>> {
        patches
            .iter()
            .map(|p| oracle_embed_point(&self.slice_to_shape.apply(&p.center), self.noise_std, rng))
            .collect()
    }

    fn embed_sdf(&self, _: &[usize], positions: &[Vec3<T>], _: &mut SeededRng) -> Result<Vec<DVector<T>>> {
        Ok(positions.iter().map(|p| DVector::from_column_slice(p.as_slice())).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrediction<T: Real> {
    /// Slice frame → shape frame.
    pub transform: RigidTransform<T>,
    pub procrustes_loss: f64,
    pub candidate_z: Option<f64>,
    pub iterations_used: usize,
    /// Every candidate was abandoned; this is the global pass.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation_mm: [f64; 3],
    pub procrustes_loss: f64,
    pub candidate_z_mm: Option<f64>,
    pub fallback: bool,
}

impl<T: Real> SlicePrediction<T> {
    pub fn record(&self) -> PredictionRecord {
        let r = &self.transform.rotation;
        let t = &self.transform.translation;
        PredictionRecord {
            rotation: [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[(i, j)].as_f64())),
            translation_mm: [t.x.as_f64(), t.y.as_f64(), t.z.as_f64()],
            procrustes_loss: self.procrustes_loss,
            candidate_z_mm: self.candidate_z,
            fallback: self.fallback,
        }
    }
}

impl PredictionRecord {
    pub fn transform<T: Real>(&self) -> Result<RigidTransform<T>> {
        let r = nalgebra::Matrix3::from_fn(|i, j| T::lit(self.rotation[i][j]));
        let [x, y, z] = self.translation_mm;
        RigidTransform::new(r, Vec3::new(T::lit(x), T::lit(y), T::lit(z)), 1e-5)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            format: "prediction",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Result of one match + Procrustes pass.
struct Pass<T: Real> {
    transform: RigidTransform<T>,
    loss: f64,
    matched_z: Vec<f64>,
}

fn run_pass<T: Real, E: Embedder<T> + ?Sized>(
    us_patches: &[Patch<T>],
    us_embeddings: &[DVector<T>],
    vertices: &[Vec3<T>],
    pool: &[usize],
    n_sdf: usize,
    embedder: &E,
    mode: ProcrustesMode,
    rng: &mut SeededRng,
) -> Result<Pass<T>> {
    let points: Vec<Vec3<T>> = pool.iter().map(|&i| vertices[i]).collect();
    let take = n_sdf.min(points.len());
    let start = centroid_vertex(&points)?;
    let picks: Vec<usize> = farthest_point_sampling(&points, take, start)?
        .into_iter()
        .map(|p| pool[p])
        .collect();
    let centers: Vec<Vec3<T>> = picks.iter().map(|&i| vertices[i]).collect();
    let sdf_embeddings = embedder.embed_sdf(&picks, &centers, rng)?;
    let us_centers: Vec<Vec3<T>> = us_patches.iter().map(|p| p.center).collect();
    let matches = match_patches(us_embeddings, &sdf_embeddings, &us_centers, &centers)?;
    let fit = procrustes_fit(&matches.source_centers, &matches.target_centers, mode)?;
    Ok(Pass {
        transform: fit.transform,
        loss: fit.loss.as_f64(),
        matched_z: matches.target_centers.iter().map(|c| c.z.as_f64()).collect(),
    })
}

/// Pose of a slice given its US patches (centers in the slice frame) and the
/// target shape's vertices (shape frame).
pub fn localize_patches<T: Real, E: Embedder<T> + ?Sized>(
    us_patches: &[Patch<T>],
    vertices: &[Vec3<T>],
    embedder: &E,
    cfg: &LocalizationConfig,
    rng: &mut SeededRng,
) -> Result<SlicePrediction<T>> {
    cfg.validate()?;
    let n_us = us_patches.len();
    if n_us < 3 {
        return Err(Error::invalid(format!("{n_us} US patches; at least 3 are needed")));
    }
    if vertices.len() < n_us {
        return Err(Error::invalid(format!(
            "{} shape vertices cannot host {n_us} matches",
            vertices.len()
        )));
    }
    let candidate_seed: u64 = rng.random();
    let us_embeddings = embedder.embed_us(us_patches, rng)?;
    let all: Vec<usize> = (0..vertices.len()).collect();
    let n_sdf = cfg.n_sdf_patches.max(n_us);
    let global = run_pass(us_patches, &us_embeddings, vertices, &all, n_sdf, embedder, cfg.procrustes, rng)?;
    if cfg.m_step == 0 {
        return Ok(SlicePrediction {
            transform: global.transform,
            procrustes_loss: global.loss,
            candidate_z: None,
            iterations_used: 0,
            fallback: false,
        });
    }
    let h = cfg.bandwidth(&global.matched_z);
    let candidates = kde_local_maxima(&global.matched_z, h, cfg.kde_grid_step, cfg.m_kde)?;

    let results: Vec<Option<(Pass<T>, f64, usize)>> = candidates
        .par_iter()
        .enumerate()
        .map(|(ci, &z0)| {
            let mut crng = rng_from_seed(derive_seed(candidate_seed, &format!("candidate/{ci}")));
            let mut zc = z0;
            let mut best: Option<(Pass<T>, f64, usize)> = None;
            for step in 0..cfg.m_step {
                let band = restrict_mesh(vertices, zc, cfg.w_restr);
                if band.len() < n_us {
                    break;
                }
                let pass = run_pass(us_patches, &us_embeddings, vertices, &band, n_sdf, embedder, cfg.procrustes, &mut crng)?;
                debug_assert!(pass.matched_z.iter().all(|z| (z - zc).abs() <= cfg.w_restr));
                let used_z = zc;
                let h = cfg.bandwidth(&pass.matched_z);
                if let Some(&next) = kde_local_maxima(&pass.matched_z, h, cfg.kde_grid_step, 1)?.first() {
                    zc = next;
                }
                best = Some((pass, used_z, step + 1));
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;

    let chosen = results
        .into_iter()
        .flatten()
        .min_by(|a, b| a.0.loss.total_cmp(&b.0.loss));
    Ok(match chosen {
        Some((pass, z, steps)) => SlicePrediction {
            transform: pass.transform,
            procrustes_loss: pass.loss,
            candidate_z: Some(z),
            iterations_used: steps,
            fallback: false,
        },
        None => SlicePrediction {
            transform: global.transform,
            procrustes_loss: global.loss,
            candidate_z: None,
            iterations_used: 0,
            fallback: true,
        },
    })
}

/// Samples US patches on the slice's label boundary, then localizes.
pub fn localize_slice<T: Real, E: Embedder<T> + ?Sized>(
    slice: &ScalarVolume<T>,
    labels: &ScalarVolume<T>,
    vertices: &[Vec3<T>],
    embedder: &E,
    patch_dims: PatchDims,
    cfg: &LocalizationConfig,
    rng: &mut SeededRng,
) -> Result<SlicePrediction<T>> {
    if slice.dims()[2] != patch_dims[2] {
        return Err(Error::invalid(format!(
            "slice has {} layers but patches span {}",
            slice.dims()[2],
            patch_dims[2]
        )));
    }
    let patches = sample_inference_patches(slice, labels, cfg.n_us_patches, patch_dims, rng)?;
    localize_patches(&patches, vertices, embedder, cfg, rng)
}
