//! Voxel patches and training triplets.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sampling, ScalarVolume, TriangleMesh, VolumeKind};
use crate::scalar::{vec3_from_f64, vec3_to_f64, Real, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "US")]
    Us,
    #[serde(rename = "SDF")]
    Sdf,
}

/// Patch shape in voxels, `(dx, dy, dz)`.
pub type PatchDims = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T: Real> {
    pub modality: Modality,
    /// Physical point the patch stands for (before voxel snapping).
    pub center: Vec3<T>,
    pub dims: PatchDims,
    pub spacing: Vec3<T>,
    /// `dx·dy·dz` values, x-fastest.
    pub values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet<T: Real> {
    pub anchor: Patch<T>,
    pub positive: Patch<T>,
    pub negative: Patch<T>,
    pub anchor_center: Vec3<T>,
    pub positive_center: Vec3<T>,
    pub negative_center: Vec3<T>,
}

/// Source vertex index → corresponding point in the target (SDF) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap<T: Real> {
    targets: Vec<Vec3<T>>,
}

impl<T: Real> CorrespondenceMap<T> {
    /// Patient-specific case: every vertex maps to itself.
    pub fn identity(mesh: &TriangleMesh<T>) -> Self {
        Self {
            targets: mesh.vertices().to_vec(),
        }
    }

    /// Index-identity correspondence into another mesh with the same
    /// vertex count.
    pub fn by_index(source: &TriangleMesh<T>, target: &TriangleMesh<T>) -> Result<Self> {
        if source.vertex_count() != target.vertex_count() {
            return Err(Error::invalid(format!(
                "correspondence needs equal vertex counts ({} vs {})",
                source.vertex_count(),
                target.vertex_count()
            )));
        }
        Ok(Self {
            targets: target.vertices().to_vec(),
        })
    }

    pub fn map(&self, vertex: usize) -> Vec3<T> {
        self.targets[vertex]
    }

    pub fn targets(&self) -> &[Vec3<T>] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Pad value used outside a volume: 0 for intensities, the patch diagonal
/// (far outside) for distance fields.
pub fn default_pad<T: Real>(volume: &ScalarVolume<T>, dims: PatchDims) -> T {
    match volume.kind() {
        VolumeKind::Sdf => {
            let s = volume.spacing();
            Vec3::new(
                T::from_usize_lossy(dims[0]) * s.x,
                T::from_usize_lossy(dims[1]) * s.y,
                T::from_usize_lossy(dims[2]) * s.z,
            )
            .norm()
        }
        _ => T::zero(),
    }
}

/// First voxel index covered by a patch of extent `d` around voxel `c`.
#[inline]
pub fn patch_start(c: isize, d: usize) -> isize {
    c - (d / 2) as isize
}

/// Axis-aligned block of `dims` voxels around the voxel nearest `center`;
/// voxels outside the grid read `pad`.
pub fn extract_patch<T: Real>(
    volume: &ScalarVolume<T>,
    center: Vec3<T>,
    dims: PatchDims,
    pad: T,
) -> Patch<T> {
    let c = volume.nearest_voxel(&center);
    let start = [
        patch_start(c[0], dims[0]),
        patch_start(c[1], dims[1]),
        patch_start(c[2], dims[2]),
    ];
    let [vx, vy, vz] = volume.dims();
    let mut values = Vec::with_capacity(dims.iter().product());
    for dz in 0..dims[2] {
        let k = start[2] + dz as isize;
        let k_in = k >= 0 && (k as usize) < vz;
        for dy in 0..dims[1] {
            let j = start[1] + dy as isize;
            let j_in = j >= 0 && (j as usize) < vy;
            if !(k_in && j_in) {
                values.extend(std::iter::repeat_n(pad, dims[0]));
                continue;
            }
            for dx in 0..dims[0] {
                let i = start[0] + dx as isize;
                values.push(if i >= 0 && (i as usize) < vx {
                    volume.get(i as usize, j as usize, k as usize)
                } else {
                    pad
                });
            }
        }
    }
    let modality = match volume.kind() {
        VolumeKind::Sdf => Modality::Sdf,
        _ => Modality::Us,
    };
    Patch {
        modality,
        center,
        dims,
        spacing: volume.spacing(),
        values,
    }
}

/// Vertex nearest the vertex centroid; the deterministic FPS start.
pub fn centroid_vertex<T: Real>(points: &[Vec3<T>]) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::invalid("no vertices"));
    }
    let c = points.iter().fold(Vec3::zeros(), |a, p| a + p) / T::from_usize_lossy(points.len());
    let mut best = (0, T::max_value().unwrap());
    for (i, p) in points.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Anchor vertices for triplet sampling: `count` FPS picks starting at the
/// vertex nearest the centroid.
pub fn anchor_vertices<T: Real>(surface: &TriangleMesh<T>, count: usize) -> Result<Vec<usize>> {
    if count > surface.vertex_count() {
        return Err(Error::invalid(format!(
            "{count} anchors requested from {} vertices",
            surface.vertex_count()
        )));
    }
    let start = centroid_vertex(surface.vertices())?;
    farthest_point_sampling(surface.vertices(), count, start)
}

/// Picks a negative center uniformly among the mapped vertices whose
/// distance from `positive` is at least that of the `⌈percentile·V⌉`-th
/// nearest (ascending rank, ties broken by vertex index). The drawn center
/// is therefore at least as far as `⌈percentile·V⌉` vertices.
pub fn draw_negative<T: Real, R: Rng + ?Sized>(
    corr: &CorrespondenceMap<T>,
    positive: &Vec3<T>,
    percentile: f64,
    rng: &mut R,
) -> Result<Vec3<T>> {
    check_percentile(percentile)?;
    let v = corr.len();
    if v == 0 {
        return Err(Error::invalid("empty correspondence"));
    }
    let rank = near_count(v, percentile);
    let mut by_dist: Vec<(T, usize)> = corr
        .targets()
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - positive).norm_squared(), i))
        .collect();
    by_dist.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let pick = rng.random_range(rank - 1..v);
    Ok(corr.map(by_dist[pick].1))
}

pub(crate) fn near_count(v: usize, percentile: f64) -> usize {
    ((percentile * v as f64).ceil() as usize).clamp(1, v)
}

fn check_percentile(percentile: f64) -> Result<()> {
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(Error::invalid(format!(
            "percentile {percentile} must lie in (0, 1]"
        )));
    }
    Ok(())
}

/// Triplet centers only; patches are cut from volumes on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletCenters<T: Real> {
    pub anchor_vertex: usize,
    pub anchor: Vec3<T>,
    pub positive: Vec3<T>,
    pub negative: Vec3<T>,
}

/// Centers for `count` triplets: FPS anchors on `surface` (US frame),
/// positives through `corr`, negatives from the far `percentile`.
#[allow(clippy::too_many_arguments)]
pub fn sample_triplet_centers<T: Real, R: Rng + ?Sized>(
    surface: &TriangleMesh<T>,
    corr: &CorrespondenceMap<T>,
    count: usize,
    percentile: f64,
    rng: &mut R,
) -> Result<Vec<TripletCenters<T>>> {
    check_percentile(percentile)?;
    if corr.len() != surface.vertex_count() {
        return Err(Error::invalid("correspondence does not cover the surface"));
    }
    let anchors = anchor_vertices(surface, count)?;
    anchors
        .into_iter()
        .map(|a| {
            let positive = corr.map(a);
            let negative = draw_negative(corr, &positive, percentile, rng)?;
            Ok(TripletCenters {
                anchor_vertex: a,
                anchor: surface.vertices()[a],
                positive,
                negative,
            })
        })
        .collect()
}

pub fn assemble_triplet<T: Real>(
    us: &ScalarVolume<T>,
    sdf: &ScalarVolume<T>,
    centers: &TripletCenters<T>,
    dims: PatchDims,
) -> Triplet<T> {
    let us_pad = default_pad(us, dims);
    let sdf_pad = default_pad(sdf, dims);
    Triplet {
        anchor: extract_patch(us, centers.anchor, dims, us_pad),
        positive: extract_patch(sdf, centers.positive, dims, sdf_pad),
        negative: extract_patch(sdf, centers.negative, dims, sdf_pad),
        anchor_center: centers.anchor,
        positive_center: centers.positive,
        negative_center: centers.negative,
    }
}

/// Full triplet sampling: centers plus the voxel patches.
#[allow(clippy::too_many_arguments)]
pub fn sample_triplets<T: Real, R: Rng + ?Sized>(
    us: &ScalarVolume<T>,
    sdf: &ScalarVolume<T>,
    surface: &TriangleMesh<T>,
    corr: &CorrespondenceMap<T>,
    count: usize,
    percentile: f64,
    dims: PatchDims,
    rng: &mut R,
) -> Result<Vec<Triplet<T>>> {
    if sdf.kind() != VolumeKind::Sdf {
        return Err(Error::invalid("positive/negative volume must be an SDF"));
    }
    let centers = sample_triplet_centers(surface, corr, count, percentile, rng)?;
    Ok(centers
        .iter()
        .map(|c| assemble_triplet(us, sdf, c, dims))
        .collect())
}

/// Foreground voxels on the central z-layer of `labels` with at least one
/// in-grid background 6-neighbour. Returns flat voxel indices.
pub fn boundary_voxels<T: Real>(labels: &ScalarVolume<T>) -> Vec<usize> {
    let [nx, ny, nz] = labels.dims();
    let k = nz / 2;
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if labels.get(i, j, k) != T::one() {
                continue;
            }
            let (i, j, kk) = (i as isize, j as isize, k as isize);
            let nbrs = [
                [i - 1, j, kk],
                [i + 1, j, kk],
                [i, j - 1, kk],
                [i, j + 1, kk],
                [i, j, kk - 1],
                [i, j, kk + 1],
            ];
            if nbrs
                .iter()
                .any(|n| labels.get_signed(*n).is_some_and(|v| v == T::zero()))
            {
                out.push(labels.index(i as usize, j as usize, k));
            }
        }
    }
    out
}

/// US patches of a slice centered on label-boundary voxels of the slice's
/// central layer, spread by FPS (random start). At most `n_us` patches;
/// fewer when the boundary has fewer voxels. A lone foreground voxel counts
/// as boundary.
pub fn sample_inference_patches<T: Real, R: Rng + ?Sized>(
    slice: &ScalarVolume<T>,
    labels: &ScalarVolume<T>,
    n_us: usize,
    dims: PatchDims,
    rng: &mut R,
) -> Result<Vec<Patch<T>>> {
    if !slice.same_grid(labels) {
        return Err(Error::invalid("slice and labels must share grid geometry"));
    }
    if labels.kind() != VolumeKind::Label {
        return Err(Error::invalid("labels volume must have kind LABEL"));
    }
    if n_us == 0 {
        return Err(Error::invalid("n_us must be at least 1"));
    }
    let [nx, ny, nz] = labels.dims();
    let k = nz / 2;
    let mut boundary = boundary_voxels(labels);
    if boundary.is_empty() {
        let layer = (0..nx * ny).map(|p| labels.index(p % nx, p / nx, k));
        boundary = layer.filter(|&idx| labels.values()[idx] == T::one()).collect();
    }
    if boundary.is_empty() {
        return Err(Error::invalid("no foreground on the slice's central layer"));
    }
    let points: Vec<Vec3<T>> = boundary
        .iter()
        .map(|&idx| {
            let [i, j, k] = labels.coords(idx);
            labels.voxel_center(i, j, k)
        })
        .collect();
    let take = n_us.min(points.len());
    let start = rng.random_range(0..points.len());
    let picks = farthest_point_sampling(&points, take, start)?;
    let pad = default_pad(slice, dims);
    Ok(picks
        .into_iter()
        .map(|p| extract_patch(slice, points[p], dims, pad))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub anchor_center: [f64; 3],
    pub positive_center: [f64; 3],
    pub negative_center: [f64; 3],
}

pub fn write_manifest<T: Real>(centers: &[TripletCenters<T>], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for c in centers {
        let line = ManifestLine {
            anchor_center: vec3_to_f64(&c.anchor),
            positive_center: vec3_to_f64(&c.positive),
            negative_center: vec3_to_f64(&c.negative),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::json(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a manifest back into `(anchor, positive, negative)` centers.
pub fn read_manifest<T: Real>(path: &Path) -> Result<Vec<[Vec3<T>; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let m: ManifestLine = serde_json::from_str(l).map_err(|e| Error::json(path, e))?;
            Ok([
                vec3_from_f64(m.anchor_center),
                vec3_from_f64(m.positive_center),
                vec3_from_f64(m.negative_center),
            ])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::icosphere;
    use crate::seeding::rng_from_seed;

    fn vol(dims: [usize; 3], f: impl Fn(usize) -> f64, kind: VolumeKind) -> ScalarVolume<f64> {
        let n = dims.iter().product();
        ScalarVolume::new(
            dims,
            Vec3::new(0.5, 0.5, 0.5),
            Vec3::new(-1.0, -1.0, -1.0),
            (0..n).map(f).collect(),
            kind,
        )
        .unwrap()
    }

    #[test]
    fn constant_volume_patch() {
        let v = vol([10, 10, 10], |_| 3.0, VolumeKind::Us);
        let p = extract_patch(&v, v.center(), [4, 3, 5], -1.0);
        assert_eq!(p.values.len(), 60);
        assert!(p.values.iter().all(|&x| x == 3.0));
    }

    #[test]
    fn unit_patch_is_the_voxel() {
        let v = vol([4, 5, 6], |i| i as f64, VolumeKind::Us);
        let c = v.voxel_center(2, 3, 1);
        let p = extract_patch(&v, c, [1, 1, 1], -1.0);
        assert_eq!(p.values, vec![v.get(2, 3, 1)]);
    }

    #[test]
    fn corner_patch_pads_exactly_out_of_grid_positions() {
        let v = vol([6, 6, 6], |i| i as f64, VolumeKind::Us);
        let p = extract_patch(&v, v.voxel_center(0, 0, 0), [4, 4, 4], -9.0);
        // Oracle: enumerate offsets; index −2..=1 per axis, in-grid iff ≥ 0.
        let mut n = 0;
        for dz in 0..4isize {
            for dy in 0..4isize {
                for dx in 0..4isize {
                    let (i, j, k) = (dx - 2, dy - 2, dz - 2);
                    let got = p.values[(dx + 4 * (dy + 4 * dz)) as usize];
                    if i >= 0 && j >= 0 && k >= 0 {
                        assert_eq!(got, v.get(i as usize, j as usize, k as usize));
                    } else {
                        assert_eq!(got, -9.0);
                        n += 1;
                    }
                }
            }
        }
        assert_eq!(n, 64 - 8);
    }

    #[test]
    fn sdf_pad_is_patch_diagonal() {
        let v = vol([4, 4, 4], |_| 0.0, VolumeKind::Sdf);
        let pad = default_pad(&v, [4, 4, 2]);
        assert!((pad - (4.0f64 + 4.0 + 1.0).sqrt()).abs() < 1e-12);
        let u = vol([4, 4, 4], |_| 0.0, VolumeKind::Us);
        assert_eq!(default_pad(&u, [4, 4, 2]), 0.0);
    }

    fn sphere(r: f64) -> TriangleMesh<f64> {
        let m = icosphere::<f64>(2);
        let v = m.vertices().iter().map(|p| p * r).collect();
        m.with_vertices(v).unwrap()
    }

    #[test]
    fn negatives_come_from_far_fraction() {
        let mesh = sphere(5.0);
        let corr = CorrespondenceMap::identity(&mesh);
        let mut rng = rng_from_seed(5);
        let centers = sample_triplet_centers(&mesh, &corr, 40, 0.5, &mut rng).unwrap();
        assert_eq!(centers.len(), 40);
        let v = mesh.vertex_count();
        for c in &centers {
            assert_eq!(c.anchor, c.positive);
            let dn = (c.negative - c.positive).norm();
            let mut dists: Vec<f64> = mesh.vertices().iter().map(|p| (p - c.positive).norm()).collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = dists[(v - 1) / 2];
            assert!(dn >= median);
            let closer = dists.iter().filter(|&&d| d <= dn).count();
            assert!(closer >= near_count(v, 0.5));
        }
        let mut anchors: Vec<usize> = centers.iter().map(|c| c.anchor_vertex).collect();
        anchors.sort();
        anchors.dedup();
        assert_eq!(anchors.len(), 40);
    }

    #[test]
    fn triplet_errors() {
        let mesh = sphere(5.0);
        let corr = CorrespondenceMap::identity(&mesh);
        let mut rng = rng_from_seed(1);
        assert!(sample_triplet_centers(&mesh, &corr, mesh.vertex_count() + 1, 0.5, &mut rng).is_err());
        assert!(sample_triplet_centers(&mesh, &corr, 3, 0.0, &mut rng).is_err());
        assert!(sample_triplet_centers(&mesh, &corr, 3, 1.5, &mut rng).is_err());
    }

    fn labels_from(dims: [usize; 3], fg: impl Fn(usize, usize, usize) -> bool) -> ScalarVolume<f64> {
        let mut vals = vec![0.0; dims.iter().product()];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    if fg(i, j, k) {
                        vals[i + dims[0] * (j + dims[1] * k)] = 1.0;
                    }
                }
            }
        }
        ScalarVolume::new(dims, Vec3::new(1.0, 1.0, 1.0), Vec3::zeros(), vals, VolumeKind::Label).unwrap()
    }

    #[test]
    fn single_voxel_label() {
        let labels = labels_from([9, 9, 4], |i, j, k| (i, j, k) == (4, 5, 2));
        let slice = labels.with_values(vec![1.0; labels.len()], VolumeKind::Us).unwrap();
        let p = sample_inference_patches(&slice, &labels, 10, [3, 3, 4], &mut rng_from_seed(0)).unwrap();
        assert!(!p.is_empty());
        assert!(p.iter().all(|p| p.center == labels.voxel_center(4, 5, 2)));
    }

    #[test]
    fn ball_boundary_shell_and_exhaustion() {
        let c = 7.0;
        let inside = |i: usize, j: usize, k: usize| {
            let (x, y, z) = (i as f64 - c, j as f64 - c, k as f64 - 2.0);
            x * x + y * y + z * z <= 20.0
        };
        let labels = labels_from([15, 15, 5], inside);
        let slice = labels.with_values(vec![0.5; labels.len()], VolumeKind::Us).unwrap();
        let boundary = boundary_voxels(&labels);
        let n = boundary.len();
        assert!(n > 4);
        let patches = sample_inference_patches(&slice, &labels, n, [3, 3, 5], &mut rng_from_seed(2)).unwrap();
        assert_eq!(patches.len(), n);
        let mut centers: Vec<[usize; 3]> = patches
            .iter()
            .map(|p| {
                let v = labels.nearest_voxel(&p.center);
                [v[0] as usize, v[1] as usize, v[2] as usize]
            })
            .collect();
        centers.sort();
        centers.dedup();
        assert_eq!(centers.len(), n);
        for [i, j, k] in centers {
            assert!(inside(i, j, k));
            let on_shell = !(inside(i - 1, j, k) && inside(i + 1, j, k) && inside(i, j - 1, k) && inside(i, j + 1, k) && inside(i, j, k - 1) && inside(i, j, k + 1));
            assert!(on_shell);
        }
    }

    #[test]
    fn empty_labels_error() {
        let labels = labels_from([5, 5, 3], |_, _, _| false);
        let slice = labels.with_values(vec![0.0; labels.len()], VolumeKind::Us).unwrap();
        assert!(sample_inference_patches(&slice, &labels, 4, [3, 3, 3], &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mesh = sphere(4.0);
        let corr = CorrespondenceMap::identity(&mesh);
        let centers = sample_triplet_centers(&mesh, &corr, 5, 0.5, &mut rng_from_seed(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_manifest(&centers, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("{\"anchor_center\":["));
        let back: Vec<[Vec3<f64>; 3]> = read_manifest(&path).unwrap();
        assert_eq!(back[2], [centers[2].anchor, centers[2].positive, centers[2].negative]);
    }
}
