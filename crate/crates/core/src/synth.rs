//! Synthetic organ families and fake ultrasound volumes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{icosphere, padded_grid, sdf_on_grid, ScalarVolume, TriangleMesh, VolumeKind};
use crate::scalar::Vec3;
use crate::seeding::{counter_normal, stream};
use crate::shape_model::CorrespondedShapeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_shapes: usize,
    pub template_subdivisions: usize,
    /// Ellipsoid semi-axes, mm.
    pub base_radii: [f64; 3],
    pub deform_modes: usize,
    /// Coefficient standard deviation, mm.
    pub deform_std: f64,
    pub intensity_in: f64,
    pub intensity_out: f64,
    pub speckle_std: f64,
    pub edge_gain: f64,
    pub spacing: f64,
    /// Margin around the shape's bounding box, mm.
    pub padding: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_shapes: 16,
            template_subdivisions: 4,
            base_radii: [10.0, 10.0, 20.0],
            deform_modes: 8,
            deform_std: 1.0,
            intensity_in: 0.6,
            intensity_out: 0.3,
            speckle_std: 0.2,
            edge_gain: 0.5,
            spacing: 0.5,
            padding: 5.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_shapes == 0 {
            return Err(Error::invalid("n_shapes must be positive"));
        }
        if self.base_radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::invalid("base_radii must be > 0"));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::invalid("spacing must be > 0"));
        }
        if !(self.speckle_std >= 0.0) || !(self.deform_std >= 0.0) || !(self.padding >= 0.0) {
            return Err(Error::invalid("speckle_std, deform_std and padding must be >= 0"));
        }
        if self.template_subdivisions > 7 {
            return Err(Error::invalid("template_subdivisions above 7 is impractically large"));
        }
        Ok(())
    }
}

/// `(l, m)` pairs used for deformation: degree 0, then degrees 2, 3, …
/// (degree 1 only shifts the shape).
fn harmonic_orders(count: usize) -> Vec<(usize, isize)> {
    let mut out = Vec::with_capacity(count);
    let mut l = 0;
    while out.len() < count {
        if l != 1 {
            for m in -(l as isize)..=(l as isize) {
                if out.len() == count {
                    break;
                }
                out.push((l, m));
            }
        }
        l += 1;
    }
    out
}

/// Associated Legendre `P_l^m(x)` for `m ≥ 0` (no Condon–Shortley phase).
fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for i in 0..m {
        pmm *= (2 * i + 1) as f64 * s;
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut pm0 = pmm;
    for ll in (m + 2)..=l {
        let p = ((2 * ll - 1) as f64 * x * pm1 - (ll + m - 1) as f64 * pm0) / (ll - m) as f64;
        pm0 = pm1;
        pm1 = p;
    }
    pm1
}

/// Unnormalised real spherical harmonic at unit direction `u`.
fn real_harmonic(l: usize, m: isize, u: &Vec3<f64>) -> f64 {
    let phi = u.y.atan2(u.x);
    let p = legendre(l, m.unsigned_abs(), u.z.clamp(-1.0, 1.0));
    match m.cmp(&0) {
        std::cmp::Ordering::Greater => p * (m as f64 * phi).cos(),
        std::cmp::Ordering::Less => p * ((-m) as f64 * phi).sin(),
        std::cmp::Ordering::Equal => p,
    }
}

/// Template directions and the deformation basis, each basis function
/// scaled to unit RMS over the template vertices.
struct Basis {
    template: TriangleMesh<f64>,
    functions: Vec<Vec<f64>>,
}

impl Basis {
    fn new(cfg: &SynthConfig) -> Self {
        let template = icosphere::<f64>(cfg.template_subdivisions);
        let functions = harmonic_orders(cfg.deform_modes)
            .into_iter()
            .map(|(l, m)| {
                let mut f: Vec<f64> = template.vertices().iter().map(|u| real_harmonic(l, m, u)).collect();
                let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
                if rms > 0.0 {
                    f.iter_mut().for_each(|v| *v /= rms);
                }
                f
            })
            .collect();
        Self { template, functions }
    }

    /// Ellipsoid vertex `i` pushed out along its own direction by `d` mm.
    fn shape(&self, cfg: &SynthConfig, coeffs: &[f64]) -> Option<Vec<Vec3<f64>>> {
        let r = Vec3::from(cfg.base_radii);
        let mut out = Vec::with_capacity(self.template.vertex_count());
        for (i, u) in self.template.vertices().iter().enumerate() {
            let e = u.component_mul(&r);
            let len = e.norm();
            let d: f64 = coeffs.iter().zip(&self.functions).map(|(c, f)| c * f[i]).sum();
            // radial positivity: keep at least a fifth of the base radius
            if len + d < 0.2 * len {
                return None;
            }
            out.push(e * ((len + d) / len));
        }
        Some(out)
    }
}

const MAX_RESAMPLES: usize = 100;

/// Corresponded family: the icosphere template scaled to the ellipsoid,
/// displaced radially by random low-order spherical harmonics.
pub fn generate_shape_family(cfg: &SynthConfig) -> Result<CorrespondedShapeSet<f64>> {
    cfg.validate()?;
    let basis = Basis::new(cfg);
    let meshes = (0..cfg.n_shapes)
        .map(|i| {
            let mut rng = stream(cfg.seed, &format!("synth.family/{i}"));
            for _ in 0..MAX_RESAMPLES {
                let coeffs: Vec<f64> = (0..basis.functions.len())
                    .map(|_| cfg.deform_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if let Some(v) = basis.shape(cfg, &coeffs) {
                    let mesh = basis.template.with_vertices(v)?;
                    mesh.check_watertight()?;
                    return Ok(mesh);
                }
            }
            Err(Error::invalid(format!(
                "shape {i}: no radially valid deformation in {MAX_RESAMPLES} draws; lower deform_std"
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    CorrespondedShapeSet::from_meshes(&meshes)
}

/// Co-registered volumes of one shape.
#[derive(Debug, Clone)]
pub struct RenderedVolumes {
    pub us: ScalarVolume<f64>,
    pub labels: ScalarVolume<f64>,
    pub sdf: ScalarVolume<f64>,
}

/// Renders on the mesh's padded bounding-box grid.
pub fn render_volume<R: Rng + ?Sized>(mesh: &TriangleMesh<f64>, cfg: &SynthConfig, rng: &mut R) -> Result<RenderedVolumes> {
    cfg.validate()?;
    let (dims, origin) = padded_grid(mesh, Vec3::repeat(cfg.spacing), cfg.padding)?;
    render_on_grid(mesh, cfg, dims, origin, rng)
}

/// Label from the SDF sign; US intensity is the two-level phantom with
/// multiplicative Gaussian speckle plus surface brightening
/// `edge_gain·exp(−(sdf/1 mm)²)`.
pub fn render_on_grid<R: Rng + ?Sized>(
    mesh: &TriangleMesh<f64>,
    cfg: &SynthConfig,
    dims: [usize; 3],
    origin: Vec3<f64>,
    rng: &mut R,
) -> Result<RenderedVolumes> {
    let spacing = Vec3::repeat(cfg.spacing);
    let sdf = sdf_on_grid(mesh, dims, spacing, origin)?;
    let key: u64 = rng.random();
    let labels: Vec<f64> = sdf.values().iter().map(|&d| if d < 0.0 { 1.0 } else { 0.0 }).collect();
    let us: Vec<f64> = sdf
        .values()
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let base = if d < 0.0 { cfg.intensity_in } else { cfg.intensity_out };
            let speckle = if cfg.speckle_std > 0.0 {
                cfg.speckle_std * counter_normal(key, i as u64)
            } else {
                0.0
            };
            base * (1.0 + speckle) + cfg.edge_gain * (-d * d).exp()
        })
        .collect();
    Ok(RenderedVolumes {
        us: sdf.with_values(us, VolumeKind::Us)?,
        labels: sdf.with_values(labels, VolumeKind::Label)?,
        sdf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub shapes: Vec<String>,
    /// Volume stems (without extension), per shape: US, label, SDF.
    #[serde(default)]
    pub volumes: Vec<[String; 3]>,
}

impl FamilyManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            format: "family manifest",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub fn shape_file_name(i: usize) -> String {
    format!("shape_{i:03}.obj")
}

/// Writes the shapes (and optionally their volumes) plus `family.json`.
pub fn write_family(
    dir: &Path,
    family: &CorrespondedShapeSet<f64>,
    cfg: &SynthConfig,
    with_volumes: bool,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = FamilyManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        shapes: Vec::new(),
        volumes: Vec::new(),
    };
    for i in 0..family.n_shapes() {
        let mesh = family.mesh(i)?;
        let name = shape_file_name(i);
        crate::geometry::io::write_obj(&mesh, &dir.join(&name))?;
        manifest.shapes.push(name);
        if with_volumes {
            let mut rng = stream(cfg.seed, &format!("synth.render/{i}"));
            let vols = render_volume(&mesh, cfg, &mut rng)?;
            let stems = [format!("us_{i:03}"), format!("label_{i:03}"), format!("sdf_{i:03}")];
            crate::geometry::io::write_volume(&vols.us, &dir.join(&stems[0]))?;
            crate::geometry::io::write_volume(&vols.labels, &dir.join(&stems[1]))?;
            crate::geometry::io::write_volume(&vols.sdf, &dir.join(&stems[2]))?;
            manifest.volumes.push(stems);
        }
    }
    let path = dir.join("family.json");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape_model::build_pdm;

    fn small(std: f64) -> SynthConfig {
        SynthConfig {
            n_shapes: 6,
            template_subdivisions: 2,
            deform_std: std,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn orders_skip_degree_one() {
        let o = harmonic_orders(8);
        assert_eq!(o[0], (0, 0));
        assert_eq!(&o[1..6], &[(2, -2), (2, -1), (2, 0), (2, 1), (2, 2)]);
        assert_eq!(o[6], (3, -3));
    }

    #[test]
    fn legendre_low_orders() {
        let x: f64 = 0.3;
        let s = (1.0 - x * x).sqrt();
        assert!((legendre(2, 0, x) - 0.5 * (3.0 * x * x - 1.0)).abs() < 1e-14);
        assert!((legendre(2, 1, x) - 3.0 * x * s).abs() < 1e-14);
        assert!((legendre(2, 2, x) - 3.0 * s * s).abs() < 1e-14);
        assert!((legendre(3, 0, x) - 0.5 * (5.0 * x.powi(3) - 3.0 * x)).abs() < 1e-14);
    }

    #[test]
    fn zero_deformation_is_scaled_template() {
        let cfg = small(0.0);
        let fam = generate_shape_family(&cfg).unwrap();
        let t = icosphere::<f64>(2);
        for i in 0..fam.n_shapes() {
            let m = fam.mesh(i).unwrap();
            for (p, u) in m.vertices().iter().zip(t.vertices()) {
                let e = Vec3::new(10.0 * u.x, 10.0 * u.y, 20.0 * u.z);
                assert!((p - e).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn family_shape_and_watertightness() {
        let cfg = SynthConfig {
            n_shapes: 16,
            template_subdivisions: 2,
            ..Default::default()
        };
        let fam = generate_shape_family(&cfg).unwrap();
        assert_eq!(fam.n_shapes(), 16);
        for i in 0..16 {
            let m = fam.mesh(i).unwrap();
            assert_eq!(m.vertex_count(), 162);
            m.check_watertight().unwrap();
            assert!(m.signed_volume() > 0.0);
        }
    }

    #[test]
    fn family_is_deterministic() {
        let a = generate_shape_family(&small(1.0)).unwrap();
        let b = generate_shape_family(&small(1.0)).unwrap();
        assert_eq!(a.coords(), b.coords());
    }

    #[test]
    fn variance_grows_with_deform_std() {
        let mut prev = -1.0;
        for std in [0.5, 1.0, 2.0] {
            let pdm = build_pdm(&generate_shape_family(&small(std)).unwrap()).unwrap();
            let total: f64 = pdm.eigvals().iter().sum();
            assert!(pdm.eigvals()[0] > 0.0);
            assert!(total > prev, "{total} after {prev}");
            prev = total;
        }
    }

    fn sphere(r: f64, level: usize) -> TriangleMesh<f64> {
        let t = icosphere::<f64>(level);
        t.with_vertices(t.vertices().iter().map(|v| v * r).collect()).unwrap()
    }

    #[test]
    fn noiseless_rendering_is_two_level() {
        let cfg = SynthConfig {
            speckle_std: 0.0,
            edge_gain: 0.0,
            spacing: 1.0,
            padding: 2.0,
            ..Default::default()
        };
        let v = render_volume(&sphere(5.0, 2), &cfg, &mut stream(1, "r")).unwrap();
        assert!(v.us.same_grid(&v.labels) && v.us.same_grid(&v.sdf));
        for ((u, l), d) in v.us.values().iter().zip(v.labels.values()).zip(v.sdf.values()) {
            assert_eq!(*l == 1.0, *d < 0.0);
            assert_eq!(*u, if *l == 1.0 { 0.6 } else { 0.3 });
        }
    }

    #[test]
    fn speckle_statistics() {
        let cfg = SynthConfig {
            speckle_std: 0.1,
            edge_gain: 0.0,
            spacing: 0.5,
            ..Default::default()
        };
        let mesh = sphere(14.0, 3);
        let origin = Vec3::repeat(-16.0);
        let v = render_on_grid(&mesh, &cfg, [64, 64, 64], origin, &mut stream(2, "r")).unwrap();
        let inside: Vec<f64> = v
            .us
            .values()
            .iter()
            .zip(v.labels.values())
            .filter(|(_, l)| **l == 1.0)
            .map(|(u, _)| *u)
            .collect();
        assert!(inside.len() > 50_000);
        let n = inside.len() as f64;
        let mean = inside.iter().sum::<f64>() / n;
        let sd = (inside.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let ratio = sd / mean;
        assert!((0.095..=0.105).contains(&ratio), "{ratio}");
    }

    #[test]
    fn label_volume_matches_enclosed_volume() {
        let cfg = SynthConfig {
            n_shapes: 3,
            template_subdivisions: 3,
            ..Default::default()
        };
        let fam = generate_shape_family(&cfg).unwrap();
        for i in 0..3 {
            let m = fam.mesh(i).unwrap();
            let v = render_volume(&m, &cfg, &mut stream(3, "r")).unwrap();
            let fg = v.labels.values().iter().filter(|l| **l == 1.0).count() as f64 * cfg.spacing.powi(3);
            let enclosed = m.signed_volume();
            assert!((fg - enclosed).abs() <= 0.1 * enclosed, "{fg} vs {enclosed}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = SynthConfig {
            spacing: 1.0,
            ..Default::default()
        };
        let m = sphere(4.0, 2);
        let a = render_volume(&m, &cfg, &mut stream(4, "r")).unwrap();
        let b = render_volume(&m, &cfg, &mut stream(4, "r")).unwrap();
        assert_eq!(a.us.values(), b.us.values());
    }

    #[test]
    fn family_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_shapes: 2,
            template_subdivisions: 1,
            spacing: 1.5,
            ..Default::default()
        };
        let fam = generate_shape_family(&cfg).unwrap();
        let path = write_family(dir.path(), &fam, &cfg, true).unwrap();
        let man = FamilyManifest::read(&path).unwrap();
        assert_eq!(man.shapes, vec!["shape_000.obj", "shape_001.obj"]);
        assert_eq!(man.volumes.len(), 2);
        assert!(dir.path().join("us_001.json").exists());
        let back = CorrespondedShapeSet::<f64>::read_dir(dir.path()).unwrap();
        assert_eq!(back.n_shapes(), 2);
    }
}
