//! Slice errors, evaluation sweeps and k-fold experiments.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Task};
use crate::encoder::{train, EncoderModel, TrainConfig, TripletSource};
use crate::error::{Error, Result};
use crate::geometry::{voxelize_sdf, ScalarVolume, TriangleMesh, VolumeKind};
use crate::localization::{localize_slice, Embedder, LearnedEmbedder, OracleEmbedder, SlicePrediction};
use crate::patching::{anchor_vertices, assemble_triplet, draw_negative, CorrespondenceMap, PatchDims, Triplet, TripletCenters};
use crate::registration::{rotation_angle, RigidTransform};
use crate::scalar::Vec3;
use crate::seeding::{derive_seed, stream, SeededRng};
use crate::shape_model::{build_pdm, mesh_from_flat, random_coeffs, sample_shape, CorrespondedShapeSet, ModeScaling};
use crate::geometry::io::{read_obj, read_volume};
use crate::synth::{render_volume, FamilyManifest, RenderedVolumes};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceErrors {
    pub translational_mm: f64,
    pub rotational_deg: f64,
}

/// Distance between where the two poses put `center_local`, and the angle
/// of `R_pred·R_gtᵀ`.
pub fn slice_errors(pred: &RigidTransform<f64>, gt: &RigidTransform<f64>, center_local: &Vec3<f64>) -> SliceErrors {
    SliceErrors {
        translational_mm: (pred.apply(center_local) - gt.apply(center_local)).norm(),
        rotational_deg: rotation_angle(&(pred.rotation * gt.rotation.transpose())).to_degrees(),
    }
}

/// An axial slab cut from a volume, re-expressed in a frame centred on the
/// slice, plus the pose placing that frame in the volume.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub us: ScalarVolume<f64>,
    pub labels: ScalarVolume<f64>,
    /// Slice frame → volume frame.
    pub ground_truth: RigidTransform<f64>,
    /// Physical z of the central layer in the volume frame.
    pub z_mm: f64,
}

/// Slab of `depth` layers whose central layer (index `depth/2`) is the
/// layer nearest `z_mm`. The slice frame has its origin at the slab's x/y
/// center on the central layer.
pub fn extract_slice(us: &ScalarVolume<f64>, labels: &ScalarVolume<f64>, z_mm: f64, depth: usize) -> Result<SliceSample> {
    if !us.same_grid(labels) {
        return Err(Error::invalid("US and label volumes must share a grid"));
    }
    if depth == 0 {
        return Err(Error::invalid("slice depth must be positive"));
    }
    let kc = ((z_mm - us.origin().z) / us.spacing().z).round() as isize;
    let k0 = kc - (depth / 2) as isize;
    let us_slab = us.z_slab(k0, depth, 0.0)?;
    let label_slab = labels.z_slab(k0, depth, 0.0)?;
    let grid_center = us.center();
    let center = Vec3::new(grid_center.x, grid_center.y, us.origin().z + kc as f64 * us.spacing().z);
    let local_origin = us_slab.origin() - center;
    Ok(SliceSample {
        us: us_slab.with_origin(local_origin),
        labels: label_slab.with_origin(local_origin),
        ground_truth: RigidTransform::translation(center),
        z_mm: center.z,
    })
}

/// `n` positions `zmin + (k + ½)(zmax − zmin)/n` over the z-range of
/// foreground voxel centers.
pub fn slice_positions(labels: &ScalarVolume<f64>, n: usize) -> Result<Vec<f64>> {
    let [nx, ny, nz] = labels.dims();
    let layer = nx * ny;
    let has_fg = |k: usize| labels.values()[k * layer..(k + 1) * layer].contains(&1.0);
    let first = (0..nz).find(|&k| has_fg(k));
    let last = (0..nz).rev().find(|&k| has_fg(k));
    let (Some(a), Some(b)) = (first, last) else {
        return Err(Error::invalid("label volume has no foreground"));
    };
    let z = |k: usize| labels.origin().z + k as f64 * labels.spacing().z;
    let (lo, hi) = (z(a), z(b));
    Ok((0..n).map(|k| lo + (k as f64 + 0.5) * (hi - lo) / n as f64).collect())
}

/// One evaluated slice. Failed slices carry no errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub shape_index: usize,
    pub slice_index: usize,
    pub z_mm: f64,
    pub trans_mm: Option<f64>,
    pub rot_deg: Option<f64>,
    pub loss: Option<f64>,
    pub fallback: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub slices: Vec<SliceRecord>,
    pub n_failed: usize,
    pub mean_trans_mm: Option<f64>,
    pub std_trans_mm: Option<f64>,
    pub mean_rot_deg: Option<f64>,
    pub std_rot_deg: Option<f64>,
    pub pct_within_10: f64,
    pub pct_within_15: f64,
    pub reference_length_mm: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl SweepReport {
    /// Failed slices count as misses for both thresholds and are left out
    /// of the means.
    pub fn from_records(slices: Vec<SliceRecord>, reference_length_mm: f64) -> Self {
        let trans: Vec<f64> = slices.iter().filter_map(|s| s.trans_mm).collect();
        let rots: Vec<f64> = slices.iter().filter_map(|s| s.rot_deg).collect();
        let total = slices.len().max(1) as f64;
        let within = |f: f64| trans.iter().filter(|&&t| t < f * reference_length_mm).count() as f64 / total;
        let t = mean_std(&trans);
        let r = mean_std(&rots);
        Self {
            n_failed: slices.iter().filter(|s| s.trans_mm.is_none()).count(),
            slices,
            mean_trans_mm: t.map(|x| x.0),
            std_trans_mm: t.map(|x| x.1),
            mean_rot_deg: r.map(|x| x.0),
            std_rot_deg: r.map(|x| x.1),
            pct_within_10: within(0.10),
            pct_within_15: within(0.15),
            reference_length_mm,
        }
    }

    pub fn merge(reports: &[SweepReport], reference_length_mm: f64) -> Self {
        Self::from_records(reports.iter().flat_map(|r| r.slices.iter().cloned()).collect(), reference_length_mm)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("slice_index,z_mm,trans_mm,rot_deg,loss,fallback\n");
        for s in &self.slices {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.slice_index,
                s.z_mm,
                opt(s.trans_mm),
                opt(s.rot_deg),
                opt(s.loss),
                s.fallback
            ));
        }
        out
    }

    /// Translational error, rotational error and the two threshold rates.
    pub fn table_row(&self) -> String {
        let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
            _ => "n/a".into(),
        };
        format!(
            "trans. {} mm | rot. {} ° | 10% thresh. {:.1}% | 15% thresh. {:.1}%",
            pm(self.mean_trans_mm, self.std_trans_mm),
            pm(self.mean_rot_deg, self.std_rot_deg),
            100.0 * self.pct_within_10,
            100.0 * self.pct_within_15
        )
    }
}

pub(crate) fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// How slices are localized during a sweep.
pub enum Method<'a> {
    /// Ground-truth embeddings with isotropic noise.
    Oracle { noise_std: f64 },
    Learned(&'a LearnedEmbedder<f64>),
    /// Identity rotation, target x/y center, z uniform over the target.
    RandomBaseline,
}

/// Registration target: vertices in the frame predictions are expressed in.
pub struct Target<'a> {
    pub vertices: &'a [Vec3<f64>],
}

fn random_axial_pose(vertices: &[Vec3<f64>], rng: &mut SeededRng) -> RigidTransform<f64> {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for v in vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    let c = (lo + hi) * 0.5;
    let z = if hi.z > lo.z { rng.random_range(lo.z..=hi.z) } else { lo.z };
    RigidTransform::translation(Vec3::new(c.x, c.y, z))
}

/// Localizes `n_slices` evenly spaced axial slices of one volume.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_sweep(
    shape_index: usize,
    us: &ScalarVolume<f64>,
    labels: &ScalarVolume<f64>,
    target: &Target<'_>,
    method: &Method<'_>,
    cfg: &PipelineConfig,
    n_slices: usize,
    reference_length_mm: f64,
    seed: u64,
) -> Result<SweepReport> {
    if n_slices == 0 {
        return Err(Error::invalid("n_slices must be at least 1"));
    }
    if !(reference_length_mm > 0.0) {
        return Err(Error::invalid("reference length must be > 0"));
    }
    let zs = slice_positions(labels, n_slices)?;
    let dims = cfg.patch_dims;
    let records: Vec<SliceRecord> = zs
        .par_iter()
        .enumerate()
        .map(|(i, &z)| {
            let mut rng = stream(seed, &format!("localize/{shape_index}/{i}"));
            let sample = extract_slice(us, labels, z, dims[2]);
            let outcome = sample.and_then(|s| {
                let pred = predict(&s, target, method, dims, cfg, &mut rng)?;
                Ok((s, pred))
            });
            match outcome {
                Ok((s, pred)) => {
                    let e = slice_errors(&pred.transform, &s.ground_truth, &Vec3::zeros());
                    SliceRecord {
                        shape_index,
                        slice_index: i,
                        z_mm: s.z_mm,
                        trans_mm: Some(e.translational_mm),
                        rot_deg: Some(e.rotational_deg),
                        loss: Some(pred.procrustes_loss),
                        fallback: pred.fallback,
                        error: None,
                    }
                }
                Err(e) => SliceRecord {
                    shape_index,
                    slice_index: i,
                    z_mm: z,
                    trans_mm: None,
                    rot_deg: None,
                    loss: None,
                    fallback: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SweepReport::from_records(records, reference_length_mm))
}

fn predict(
    s: &SliceSample,
    target: &Target<'_>,
    method: &Method<'_>,
    dims: PatchDims,
    cfg: &PipelineConfig,
    rng: &mut SeededRng,
) -> Result<SlicePrediction<f64>> {
    let run = |e: &dyn Embedder<f64>, rng: &mut SeededRng| {
        localize_slice(&s.us, &s.labels, target.vertices, e, dims, &cfg.localization, rng)
    };
    match method {
        Method::Oracle { noise_std } => run(
            &OracleEmbedder {
                slice_to_shape: s.ground_truth,
                noise_std: *noise_std,
            },
            rng,
        ),
        Method::Learned(e) => run(*e, rng),
        Method::RandomBaseline => Ok(SlicePrediction {
            transform: random_axial_pose(target.vertices, rng),
            procrustes_loss: 0.0,
            candidate_z: None,
            iterations_used: 0,
            fallback: false,
        }),
    }
}

/// Contiguous folds; the first `n mod k` folds take one extra shape.
pub fn fold_partition(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::invalid(format!("cannot split {n} shapes into {k} folds")));
    }
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    Ok((0..k)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let fold = (start..start + len).collect();
            start += len;
            fold
        })
        .collect())
}

/// One training shape's contribution to the triplet pool.
struct TripletEntry<'a> {
    us: &'a ScalarVolume<f64>,
    sdf: Cow<'a, ScalarVolume<f64>>,
    corr: CorrespondenceMap<f64>,
    /// Fixed anchors; negatives are redrawn per epoch.
    anchors: Vec<(usize, Vec3<f64>)>,
}

/// Triplets from several (US volume, SDF target) pairs.
pub struct ShapeTripletSource<'a> {
    entries: Vec<TripletEntry<'a>>,
    percentile: f64,
    dims: PatchDims,
}

impl<'a> ShapeTripletSource<'a> {
    pub fn new(percentile: f64, dims: PatchDims) -> Self {
        Self {
            entries: Vec::new(),
            percentile,
            dims,
        }
    }

    /// `surface` lives in the US volume's frame; `corr` maps its vertices
    /// into the SDF's frame.
    pub fn push(
        &mut self,
        us: &'a ScalarVolume<f64>,
        sdf: Cow<'a, ScalarVolume<f64>>,
        surface: &TriangleMesh<f64>,
        corr: CorrespondenceMap<f64>,
        anchors: usize,
    ) -> Result<()> {
        if sdf.kind() != VolumeKind::Sdf {
            return Err(Error::invalid("triplet targets must be SDF volumes"));
        }
        let ids = anchor_vertices(surface, anchors.min(surface.vertex_count()))?;
        let anchors = ids.into_iter().map(|a| (a, surface.vertices()[a])).collect();
        self.entries.push(TripletEntry { us, sdf, corr, anchors });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.anchors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TripletSource<f64> for ShapeTripletSource<'_> {
    fn epoch(&mut self, _: usize, _: bool, rng: &mut SeededRng) -> Result<Vec<Triplet<f64>>> {
        let mut jobs = Vec::with_capacity(self.len());
        for (ei, e) in self.entries.iter().enumerate() {
            for &(a, anchor) in &e.anchors {
                let positive = e.corr.map(a);
                let negative = draw_negative(&e.corr, &positive, self.percentile, rng)?;
                jobs.push((
                    ei,
                    TripletCenters {
                        anchor_vertex: a,
                        anchor,
                        positive,
                        negative,
                    },
                ));
            }
        }
        Ok(jobs
            .par_iter()
            .map(|(ei, c)| {
                let e = &self.entries[*ei];
                assemble_triplet(e.us, &e.sdf, c, self.dims)
            })
            .collect())
    }
}

/// Everything shared across folds: the family and its rendered volumes.
pub struct Dataset {
    pub family: CorrespondedShapeSet<f64>,
    pub volumes: Vec<RenderedVolumes>,
}

impl Dataset {
    /// Generates the family and renders every shape.
    pub fn synthesize(cfg: &PipelineConfig) -> Result<Self> {
        let mut synth = cfg.synth.clone();
        synth.seed = derive_seed(cfg.seed, "synth");
        let family = crate::synth::generate_shape_family(&synth)?;
        let volumes = (0..family.n_shapes())
            .map(|i| {
                let mut rng = stream(synth.seed, &format!("synth.render/{i}"));
                render_volume(&family.mesh(i)?, &synth, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { family, volumes })
    }

    /// Reads a directory written by `write_family` with volumes.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = FamilyManifest::read(&dir.join("family.json"))?;
        if manifest.volumes.len() != manifest.shapes.len() {
            return Err(Error::invalid(format!("{} lists no volumes for its shapes", dir.display())));
        }
        let meshes = manifest
            .shapes
            .iter()
            .map(|s| read_obj(&dir.join(s)))
            .collect::<Result<Vec<TriangleMesh<f64>>>>()?;
        let family = CorrespondedShapeSet::from_meshes(&meshes)?;
        let volumes = manifest
            .volumes
            .iter()
            .map(|[us, labels, sdf]| {
                Ok(RenderedVolumes {
                    us: read_volume(&dir.join(us))?,
                    labels: read_volume(&dir.join(labels))?,
                    sdf: read_volume(&dir.join(sdf))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { family, volumes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_shapes: Vec<usize>,
    pub test_shapes: Vec<usize>,
    pub loss_history: Vec<f64>,
    pub report: SweepReport,
    pub baseline: Option<SweepReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean ± std over folds of the per-fold means.
    pub trans_mm: (f64, f64),
    pub rot_deg: (f64, f64),
    pub pct_within_10: (f64, f64),
    pub pct_within_15: (f64, f64),
    /// Mean over all successful slices of all folds.
    pub pooled_trans_mm: Option<f64>,
    pub pooled_rot_deg: Option<f64>,
    pub n_slices: usize,
    pub n_failed: usize,
    pub mean_reference_length_mm: f64,
}

impl Aggregate {
    pub fn from_reports(reports: &[&SweepReport]) -> Self {
        let col = |f: &dyn Fn(&SweepReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
            mean_std(&v).unwrap_or((f64::NAN, f64::NAN))
        };
        let all: Vec<&SliceRecord> = reports.iter().flat_map(|r| &r.slices).collect();
        let pooled = |f: &dyn Fn(&SliceRecord) -> Option<f64>| {
            let v: Vec<f64> = all.iter().filter_map(|s| f(s)).collect();
            mean_std(&v).map(|x| x.0)
        };
        Self {
            trans_mm: col(&|r| r.mean_trans_mm),
            rot_deg: col(&|r| r.mean_rot_deg),
            pct_within_10: col(&|r| Some(r.pct_within_10)),
            pct_within_15: col(&|r| Some(r.pct_within_15)),
            pooled_trans_mm: pooled(&|s| s.trans_mm),
            pooled_rot_deg: pooled(&|s| s.rot_deg),
            n_slices: all.len(),
            n_failed: all.iter().filter(|s| s.trans_mm.is_none()).count(),
            mean_reference_length_mm: mean_std(&reports.iter().map(|r| r.reference_length_mm).collect::<Vec<_>>())
                .map(|x| x.0)
                .unwrap_or(f64::NAN),
        }
    }

    pub fn table_row(&self) -> String {
        format!(
            "trans. {:.2} ± {:.2} mm | rot. {:.2} ± {:.2} ° | 10% thresh. {:.1}% | 15% thresh. {:.1}%",
            self.trans_mm.0,
            self.trans_mm.1,
            self.rot_deg.0,
            self.rot_deg.1,
            100.0 * self.pct_within_10.0,
            100.0 * self.pct_within_15.0
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldsReport {
    pub task: Task,
    pub seed: u64,
    pub method: String,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
    pub baseline: Option<Aggregate>,
    pub config: PipelineConfig,
}

impl FoldsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(e.to_string()))
    }
}

/// How `run_folds` obtains embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FoldMethod {
    Learned,
    Oracle { noise_std: f64 },
}

/// Registration target of one held-out shape under `task`.
struct FoldTarget {
    vertices: Vec<Vec3<f64>>,
    sdf: ScalarVolume<f64>,
}

/// k-fold protocol: per fold, PDM from the training shapes, encoders
/// trained for the task, then a slice sweep over every held-out shape.
pub fn run_folds(data: &Dataset, cfg: &PipelineConfig, method: FoldMethod, with_baseline: bool) -> Result<FoldsReport> {
    cfg.validate()?;
    let n = data.family.n_shapes();
    let task = cfg.evaluation.task;
    let folds = fold_partition(n, cfg.evaluation.folds)?;
    let spacing = Vec3::repeat(cfg.synth.spacing);
    let mut reports = Vec::with_capacity(folds.len());
    for (f, test) in folds.iter().enumerate() {
        let train_ids: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
        if train_ids.len() < 2 {
            return Err(Error::invalid(format!("fold {f} has fewer than 2 training shapes")));
        }
        let training = data.family.select(&train_ids)?;
        let pdm = build_pdm(&training)?;
        let mean_mesh = pdm.mean_mesh(data.family.faces())?;
        let (zlo, zhi) = mean_mesh.z_extent().ok_or_else(|| Error::invalid("empty mean shape"))?;
        let reference = zhi - zlo;
        let mean_target = match task {
            Task::PatientSdf => None,
            _ => Some(FoldTarget {
                vertices: mean_mesh.vertices().to_vec(),
                sdf: voxelize_sdf(&mean_mesh, spacing, cfg.synth.padding)?,
            }),
        };

        let fold_seed = derive_seed(cfg.seed, &format!("fold/{f}"));
        let (models, history) = match method {
            FoldMethod::Learned => {
                let (us, sdf, h) = train_fold(data, &train_ids, &pdm, &mean_mesh, mean_target.as_ref(), cfg, fold_seed)?;
                (Some((us, sdf)), h)
            }
            FoldMethod::Oracle { .. } => (None, Vec::new()),
        };

        let mut sweeps = Vec::with_capacity(test.len());
        let mut baselines = Vec::new();
        for &s in test {
            let vols = &data.volumes[s];
            let own;
            let target = match &mean_target {
                Some(t) => t,
                None => {
                    own = FoldTarget {
                        vertices: data.family.mesh(s)?.vertices().to_vec(),
                        sdf: vols.sdf.clone(),
                    };
                    &own
                }
            };
            let tgt = Target {
                vertices: &target.vertices,
            };
            let eval_seed = derive_seed(fold_seed, "eval");
            let sweep = match (&models, method) {
                (Some((us, sdf)), _) => {
                    let emb = LearnedEmbedder::new(us.clone(), sdf, &target.sdf, &target.vertices)?;
                    evaluate_sweep(s, &vols.us, &vols.labels, &tgt, &Method::Learned(&emb), cfg, cfg.evaluation.n_slices, reference, eval_seed)?
                }
                (None, FoldMethod::Oracle { noise_std }) => evaluate_sweep(
                    s,
                    &vols.us,
                    &vols.labels,
                    &tgt,
                    &Method::Oracle { noise_std },
                    cfg,
                    cfg.evaluation.n_slices,
                    reference,
                    eval_seed,
                )?,
                (None, FoldMethod::Learned) => unreachable!(),
            };
            sweeps.push(sweep);
            if with_baseline {
                baselines.push(evaluate_sweep(
                    s,
                    &vols.us,
                    &vols.labels,
                    &tgt,
                    &Method::RandomBaseline,
                    cfg,
                    cfg.evaluation.n_slices,
                    reference,
                    derive_seed(cfg.seed, "baseline"),
                )?);
            }
        }
        reports.push(FoldReport {
            fold: f,
            train_shapes: train_ids,
            test_shapes: test.clone(),
            loss_history: history,
            report: SweepReport::merge(&sweeps, reference),
            baseline: with_baseline.then(|| SweepReport::merge(&baselines, reference)),
        });
    }
    let aggregate = Aggregate::from_reports(&reports.iter().map(|r| &r.report).collect::<Vec<_>>());
    let baseline = with_baseline.then(|| {
        Aggregate::from_reports(&reports.iter().filter_map(|r| r.baseline.as_ref()).collect::<Vec<_>>())
    });
    Ok(FoldsReport {
        task,
        seed: cfg.seed,
        method: match method {
            FoldMethod::Learned => "learned".into(),
            FoldMethod::Oracle { noise_std } => format!("oracle(noise={noise_std})"),
        },
        folds: reports,
        aggregate,
        baseline,
        config: cfg.clone(),
    })
}

/// Trains a fresh encoder pair on the fold's training shapes.
fn train_fold(
    data: &Dataset,
    train_ids: &[usize],
    pdm: &crate::shape_model::PdmModel<f64>,
    mean_mesh: &TriangleMesh<f64>,
    mean_target: Option<&FoldTarget>,
    cfg: &PipelineConfig,
    fold_seed: u64,
) -> Result<(EncoderModel<f64>, EncoderModel<f64>, Vec<f64>)> {
    let spacing = Vec3::repeat(cfg.synth.spacing);
    let mut source = ShapeTripletSource::new(cfg.triplets.negative_percentile, cfg.patch_dims);
    let mut ssm_rng = stream(fold_seed, "ssm.samples");
    for &i in train_ids {
        let surface = data.family.mesh(i)?;
        let vols = &data.volumes[i];
        let (sdf, corr) = match cfg.evaluation.task {
            Task::PatientSdf => (Cow::Borrowed(&vols.sdf), CorrespondenceMap::identity(&surface)),
            Task::MeanShape => {
                let t = mean_target.ok_or_else(|| Error::invalid("mean shape target missing"))?;
                (Cow::Owned(t.sdf.clone()), CorrespondenceMap::by_index(&surface, mean_mesh)?)
            }
            Task::SsmSamples => {
                let coeffs = random_coeffs::<f64, _>(&mut ssm_rng, cfg.evaluation.ssm_std, pdm.modes())?;
                let flat = sample_shape(pdm, &coeffs, ModeScaling::Sqrt)?;
                let sample = mesh_from_flat(&flat, data.family.faces())?;
                let sdf = voxelize_sdf(&sample, spacing, cfg.synth.padding)?;
                (Cow::Owned(sdf), CorrespondenceMap::by_index(&surface, &sample)?)
            }
        };
        source.push(&vols.us, sdf, &surface, corr, cfg.triplets.anchors_per_shape)?;
    }
    let enc = cfg.encoder_config();
    let us = EncoderModel::init(enc, &mut stream(fold_seed, "encoder.init.us"))?;
    let sdf = EncoderModel::init(enc, &mut stream(fold_seed, "encoder.init.sdf"))?;
    let tc = TrainConfig {
        seed: derive_seed(fold_seed, "train"),
        ..cfg.train.clone()
    };
    let out = train(us, sdf, &mut source, &tc)?;
    Ok((out.us_model, out.sdf_model, out.history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::axis_angle;
    use crate::synth::SynthConfig;

    #[test]
    fn identical_poses_have_zero_error() {
        let g = RigidTransform {
            rotation: axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7),
            translation: Vec3::new(4.0, 5.0, 6.0),
        };
        let e = slice_errors(&g, &g, &Vec3::new(1.0, 1.0, 0.0));
        assert!(e.translational_mm < 1e-12 && e.rotational_deg < 1e-6);
    }

    #[test]
    fn shifted_pose() {
        let g = RigidTransform {
            rotation: axis_angle(&Vec3::new(0.0, 1.0, 0.0), 0.3),
            translation: Vec3::new(1.0, 0.0, 0.0),
        };
        let shift = RigidTransform::translation(Vec3::new(0.0, 0.0, 5.0));
        let e = slice_errors(&shift.compose(&g), &g, &Vec3::new(2.0, -1.0, 0.0));
        assert!((e.translational_mm - 5.0).abs() < 1e-12);
        assert!(e.rotational_deg < 1e-6);
    }

    #[test]
    fn rotation_about_center() {
        let c = Vec3::new(3.0, -2.0, 1.0);
        let g = RigidTransform::translation(Vec3::new(10.0, 0.0, 0.0));
        let r = axis_angle(&Vec3::new(0.3, 0.4, 1.0), 10f64.to_radians());
        // rotate about the mapped center: x ↦ R(x − g(c)) + g(c)
        let gc = g.apply(&c);
        let about = RigidTransform {
            rotation: r,
            translation: gc - r * gc,
        };
        let e = slice_errors(&about.compose(&g), &g, &c);
        assert!(e.translational_mm < 1e-12);
        assert!((e.rotational_deg - 10.0).abs() < 1e-9);
        let back = slice_errors(&g, &about.compose(&g), &c);
        assert!((back.rotational_deg - e.rotational_deg).abs() < 1e-9);
    }

    #[test]
    fn folds_partition_evenly() {
        let f = fold_partition(16, 4).unwrap();
        assert_eq!(f.len(), 4);
        assert!(f.iter().all(|x| x.len() == 4));
        let f = fold_partition(10, 4).unwrap();
        assert_eq!(f.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
        let all: Vec<usize> = f.concat();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(fold_partition(3, 4).is_err());
    }

    #[test]
    fn report_statistics() {
        let rec = |i: usize, t: Option<f64>| SliceRecord {
            shape_index: 0,
            slice_index: i,
            z_mm: i as f64,
            trans_mm: t,
            rot_deg: t.map(|x| x / 2.0),
            loss: t,
            fallback: false,
            error: t.is_none().then(|| "x".into()),
        };
        let one = SweepReport::from_records(vec![rec(0, Some(3.0))], 40.0);
        assert_eq!(one.mean_trans_mm, Some(3.0));
        assert_eq!(one.std_trans_mm, Some(0.0));
        assert_eq!(one.pct_within_10, 1.0);

        let r = SweepReport::from_records(vec![rec(0, Some(1.0)), rec(1, Some(5.0)), rec(2, None), rec(3, Some(7.0))], 40.0);
        assert_eq!(r.n_failed, 1);
        assert!((r.mean_trans_mm.unwrap() - 13.0 / 3.0).abs() < 1e-12);
        // 10% of 40 mm = 4 mm, 15% = 6 mm; the failed slice counts as a miss
        assert_eq!(r.pct_within_10, 0.25);
        assert_eq!(r.pct_within_15, 0.5);
        assert!(r.pct_within_10 <= r.pct_within_15);
        let text = serde_json::to_string(&r).unwrap();
        let back: SweepReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert!(r.csv().starts_with("slice_index,z_mm,trans_mm,rot_deg,loss,fallback\n0,0,1,0.5,1,false\n"));
    }

    #[test]
    fn pooled_mean_is_count_weighted_fold_mean() {
        let mk = |vals: &[f64]| {
            SweepReport::from_records(
                vals.iter()
                    .enumerate()
                    .map(|(i, &t)| SliceRecord {
                        shape_index: 0,
                        slice_index: i,
                        z_mm: 0.0,
                        trans_mm: Some(t),
                        rot_deg: Some(t),
                        loss: None,
                        fallback: false,
                        error: None,
                    })
                    .collect(),
                10.0,
            )
        };
        let a = mk(&[1.0, 2.0, 3.0]);
        let b = mk(&[10.0]);
        let agg = Aggregate::from_reports(&[&a, &b]);
        let weighted = (3.0 * a.mean_trans_mm.unwrap() + b.mean_trans_mm.unwrap()) / 4.0;
        assert!((agg.pooled_trans_mm.unwrap() - weighted).abs() < 1e-12);
        assert!((agg.trans_mm.0 - (2.0 + 10.0) / 2.0).abs() < 1e-12);
    }

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            synth: SynthConfig {
                n_shapes: 4,
                template_subdivisions: 3,
                spacing: 1.0,
                padding: 4.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn slices_are_centered_frames() {
        let cfg = tiny_config();
        let data = Dataset::synthesize(&cfg).unwrap();
        let v = &data.volumes[0];
        let zs = slice_positions(&v.labels, 5).unwrap();
        assert!(zs.windows(2).all(|w| w[1] > w[0]));
        let s = extract_slice(&v.us, &v.labels, zs[2], 8).unwrap();
        assert_eq!(s.us.dims()[2], 8);
        // central layer of the slab sits at local z = 0
        assert!(s.us.voxel_center(0, 0, 4).z.abs() < 1e-9);
        let world = s.ground_truth.apply(&s.us.voxel_center(3, 5, 4));
        let kc = ((world.z - v.us.origin().z) / v.us.spacing().z).round() as usize;
        let i = ((world.x - v.us.origin().x) / v.us.spacing().x).round() as usize;
        let j = ((world.y - v.us.origin().y) / v.us.spacing().y).round() as usize;
        assert_eq!((i, j), (3, 5));
        assert_eq!(s.us.get(3, 5, 4), v.us.get(i, j, kc));
    }

    #[test]
    fn oracle_sweep_single_slice() {
        let cfg = tiny_config();
        let data = Dataset::synthesize(&cfg).unwrap();
        let v = &data.volumes[1];
        let mesh = data.family.mesh(1).unwrap();
        let target = Target {
            vertices: mesh.vertices(),
        };
        let r = evaluate_sweep(1, &v.us, &v.labels, &target, &Method::Oracle { noise_std: 0.0 }, &cfg, 1, 40.0, 3).unwrap();
        assert_eq!(r.slices.len(), 1);
        assert_eq!(r.std_trans_mm, Some(0.0));
        assert_eq!(r.mean_trans_mm, r.slices[0].trans_mm);
        assert!(r.mean_trans_mm.unwrap() < 2.0, "{r:?}");
    }

    #[test]
    fn dataset_written_and_loaded_matches() {
        let cfg = tiny_config();
        let data = Dataset::synthesize(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut synth = cfg.synth.clone();
        synth.seed = derive_seed(cfg.seed, "synth");
        crate::synth::write_family(dir.path(), &data.family, &synth, true).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.family.n_shapes(), 4);
        // volumes are stored as f32
        for (a, b) in data.volumes.iter().zip(&back.volumes) {
            assert!(a.us.same_grid(&b.us));
            assert_eq!(a.labels.values(), b.labels.values());
            let worst = a.sdf.values().iter().zip(b.sdf.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-4);
        }
    }

    #[test]
    fn reference_length_tracks_radius() {
        let cfg = tiny_config();
        let data = Dataset::synthesize(&cfg).unwrap();
        let pdm = build_pdm(&data.family).unwrap();
        let (lo, hi) = pdm.mean_mesh(data.family.faces()).unwrap().z_extent().unwrap();
        assert!(((hi - lo) - 40.0).abs() < 4.0, "{}", hi - lo);
    }
}
