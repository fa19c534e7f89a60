//! `sliceloc`: pipeline runs from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sliceloc::config::{with_suffix, PipelineConfig, Task};
use sliceloc::encoder::{encoder_paths, gradcheck, read_encoder, train, write_encoder, EncoderModel};
use sliceloc::evaluation::{
    evaluate_sweep, extract_slice, run_folds, slice_errors, Dataset, FoldMethod, Method, ShapeTripletSource, Target,
};
use sliceloc::geometry::io::{read_obj, write_obj, write_volume};
use sliceloc::geometry::voxelize_sdf;
use sliceloc::localization::{localize_slice, LearnedEmbedder, OracleEmbedder, PredictionRecord};
use sliceloc::patching::{sample_triplet_centers, write_manifest, CorrespondenceMap};
use sliceloc::scalar::Vec3;
use sliceloc::seeding::{derive_seed, stream};
use sliceloc::shape_model::{
    build_pdm, read_pdm, random_coeffs, sample_shape, write_pdm, CorrespondedShapeSet, ModeScaling,
};
use sliceloc::synth::{generate_shape_family, write_family};
use sliceloc::{Error, Result};

#[derive(Parser)]
#[command(name = "sliceloc", version, about = "Localize 2D ultrasound slices on 3D organ shape models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON). Unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Directory all outputs are written under.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corresponded shape family with US, label and SDF volumes.
    Synth {
        /// Number of shapes; overrides `synth.n_shapes`.
        #[arg(long)]
        n_shapes: Option<usize>,
        /// Write meshes only.
        #[arg(long)]
        no_volumes: bool,
    },
    /// Signed distance volume of a closed OBJ mesh.
    Voxelize {
        /// Input mesh.
        #[arg(long, value_name = "OBJ")]
        mesh: PathBuf,
        /// Isotropic voxel spacing in mm (default: `synth.spacing`).
        #[arg(long)]
        spacing: Option<f64>,
        /// Margin around the mesh in mm (default: `synth.padding`).
        #[arg(long)]
        padding: Option<f64>,
    },
    /// Point distribution model of a directory of corresponded OBJ meshes.
    BuildPdm {
        /// Directory of OBJ files, read in file-name order.
        #[arg(long, value_name = "DIR")]
        shapes: PathBuf,
    },
    /// Draw one shape from a PDM.
    SampleShape {
        /// PDM stem (`<stem>.pdm.json` / `<stem>.pdm.raw`).
        #[arg(long, value_name = "STEM")]
        pdm: PathBuf,
        /// Any mesh of the modelled family; supplies the faces.
        #[arg(long, value_name = "OBJ")]
        template: PathBuf,
        /// Standard deviation of the mode coefficients.
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        /// How coefficients scale each mode.
        #[arg(long, value_enum, default_value_t = Scaling::Sqrt)]
        scaling: Scaling,
    },
    /// Anchor/positive/negative centers for one synthetic shape (JSONL).
    SampleTriplets {
        #[command(flatten)]
        data: DataArgs,
        /// Shape index within the family.
        #[arg(long)]
        shape: usize,
        /// Number of triplets (default: `triplets.anchors_per_shape`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the US and SDF encoders on patient-SDF triplets.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Training shape indices, comma separated (default: all).
        #[arg(long, value_delimiter = ',')]
        shapes: Vec<usize>,
    },
    /// Finite-difference check of the analytic encoder gradients.
    Gradcheck {
        /// Patch dims to check, e.g. `32,32,32`; repeat for several
        /// (default: 32,32,32 and 64,64,8).
        #[arg(long, value_parser = parse_dims)]
        dims: Vec<[usize; 3]>,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
    /// Localize one axial slice of a synthetic volume.
    Localize {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        slice: SliceArgs,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Sweep evenly spaced slices of one shape, or score a saved prediction.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Shape index within the family.
        #[arg(long)]
        shape: usize,
        /// Score this prediction (from `localize`) instead of sweeping.
        #[arg(long, value_name = "JSON", requires = "z")]
        prediction: Option<PathBuf>,
        /// Slice position in mm (with `--prediction`).
        #[arg(long, allow_hyphen_values = true)]
        z: Option<f64>,
        /// Number of slices (default: `evaluation.n_slices`).
        #[arg(long)]
        slices: Option<usize>,
        /// Threshold reference length in mm (default: z-extent of the
        /// family's mean shape).
        #[arg(long)]
        reference_length: Option<f64>,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// k-fold cross-validation over a shape family.
    Folds {
        /// Family directory; synthesized from the config when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Task; overrides `evaluation.task`.
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Use the oracle embedder instead of training encoders.
        #[arg(long)]
        oracle: bool,
        /// Oracle noise in mm.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Also score the random axial-slice baseline.
        #[arg(long)]
        baseline: bool,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Family directory written by `synth` (default: `paths.data_dir`).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SliceArgs {
    /// Shape index within the family.
    #[arg(long)]
    shape: usize,
    /// Physical z of the slice in mm.
    #[arg(long, allow_hyphen_values = true)]
    z: f64,
}

#[derive(Args)]
struct MethodArgs {
    /// Use the oracle embedder (ground-truth positions plus noise).
    #[arg(long, conflicts_with = "encoders")]
    oracle: bool,
    /// Oracle noise in mm.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Encoder stem from `train` (default: `paths.encoders`).
    #[arg(long, value_name = "STEM")]
    encoders: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scaling {
    Sqrt,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    PatientSdf,
    MeanShape,
    SsmSamples,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad dimension '{x}'")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated dimensions".to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{} does not exist", path.display())))
    }
}

fn data_dir(args: &DataArgs, cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = args
        .data
        .clone()
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| Error::InvalidInput("no family directory: pass --data or set paths.data_dir".into()))?;
    require(&dir.join("family.json"))?;
    Ok(dir)
}

fn encoder_stem(args: &MethodArgs, cfg: &PipelineConfig) -> Result<PathBuf> {
    args.encoders
        .clone()
        .or_else(|| cfg.paths.encoders.clone())
        .ok_or_else(|| Error::InvalidInput("pass --oracle or --encoders (or set paths.encoders)".into()))
}

fn load_encoders(stem: &Path) -> Result<(EncoderModel<f64>, EncoderModel<f64>)> {
    let us_stem = with_suffix(stem, "_us");
    let sdf_stem = with_suffix(stem, "_sdf");
    require(&encoder_paths(&us_stem).0)?;
    require(&encoder_paths(&sdf_stem).0)?;
    Ok((read_encoder(&us_stem)?.0, read_encoder(&sdf_stem)?.0))
}

fn check_shape(data: &Dataset, shape: usize) -> Result<()> {
    if shape >= data.family.n_shapes() {
        return Err(Error::InvalidInput(format!(
            "shape {shape} out of range (family has {})",
            data.family.n_shapes()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::InvalidInput("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
    }
    let mut cfg = load_config(&cli.common)?;
    let out = cli.common.out.clone();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;

    match cli.command {
        Command::Synth { n_shapes, no_volumes } => {
            if let Some(n) = n_shapes {
                cfg.synth.n_shapes = n;
            }
            cfg.synth.seed = derive_seed(cfg.seed, "synth");
            cfg.synth.validate()?;
            let family = generate_shape_family(&cfg.synth)?;
            let manifest = write_family(&out, &family, &cfg.synth, !no_volumes)?;
            println!("wrote {} shapes to {}", family.n_shapes(), manifest.display());
        }
        Command::Voxelize { mesh, spacing, padding } => {
            require(&mesh)?;
            let m = read_obj::<f64>(&mesh)?;
            m.check_watertight()?;
            let spacing = spacing.unwrap_or(cfg.synth.spacing);
            let vol = voxelize_sdf(&m, Vec3::repeat(spacing), padding.unwrap_or(cfg.synth.padding))?;
            let name = mesh.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "mesh".into());
            let stem = out.join(format!("{name}_sdf"));
            write_volume(&vol, &stem)?;
            println!("wrote {:?} SDF to {}", vol.dims(), stem.display());
        }
        Command::BuildPdm { shapes } => {
            require(&shapes)?;
            let set = CorrespondedShapeSet::<f64>::read_dir(&shapes)?;
            let pdm = build_pdm(&set)?;
            let stem = out.join("pdm");
            write_pdm(&pdm, &stem)?;
            println!("PDM of {} shapes, {} modes -> {}", pdm.n_shapes(), pdm.modes(), stem.display());
        }
        Command::SampleShape {
            pdm,
            template,
            std,
            scaling,
        } => {
            require(&template)?;
            let model = read_pdm::<f64>(&pdm)?;
            let template = read_obj::<f64>(&template)?;
            if template.vertex_count() != model.n_vertices() {
                return Err(Error::InvalidInput(format!(
                    "template has {} vertices, PDM has {}",
                    template.vertex_count(),
                    model.n_vertices()
                )));
            }
            let mut rng = stream(cfg.seed, "sample-shape");
            let coeffs = random_coeffs::<f64, _>(&mut rng, std, model.modes())?;
            let scaling = match scaling {
                Scaling::Sqrt => ModeScaling::Sqrt,
                Scaling::Raw => ModeScaling::Raw,
            };
            let flat = sample_shape(&model, &coeffs, scaling)?;
            let mesh = sliceloc::shape_model::mesh_from_flat(&flat, template.faces())?;
            write_obj(&mesh, &out.join("sample.obj"))?;
            write_json(&coeffs.alphas, &out.join("sample_coefficients.json"))?;
            println!("wrote {}", out.join("sample.obj").display());
        }
        Command::SampleTriplets { data, shape, count } => {
            let dir = data_dir(&data, &cfg)?;
            let dataset = Dataset::load(&dir)?;
            check_shape(&dataset, shape)?;
            let mesh = dataset.family.mesh(shape)?;
            let corr = CorrespondenceMap::identity(&mesh);
            let mut rng = stream(cfg.seed, &format!("sample-triplets/{shape}"));
            let centers = sample_triplet_centers(
                &mesh,
                &corr,
                count.unwrap_or(cfg.triplets.anchors_per_shape),
                cfg.triplets.negative_percentile,
                &mut rng,
            )?;
            let path = out.join("triplets.jsonl");
            write_manifest(&centers, &path)?;
            println!("wrote {} triplets to {}", centers.len(), path.display());
        }
        Command::Train { data, shapes } => {
            let dir = data_dir(&data, &cfg)?;
            let dataset = Dataset::load(&dir)?;
            let ids: Vec<usize> = if shapes.is_empty() {
                (0..dataset.family.n_shapes()).collect()
            } else {
                shapes
            };
            let mut source = ShapeTripletSource::new(cfg.triplets.negative_percentile, cfg.patch_dims);
            let meshes = ids
                .iter()
                .map(|&i| {
                    check_shape(&dataset, i)?;
                    dataset.family.mesh(i)
                })
                .collect::<Result<Vec<_>>>()?;
            for (&i, mesh) in ids.iter().zip(&meshes) {
                let vols = &dataset.volumes[i];
                source.push(
                    &vols.us,
                    std::borrow::Cow::Borrowed(&vols.sdf),
                    mesh,
                    CorrespondenceMap::identity(mesh),
                    cfg.triplets.anchors_per_shape,
                )?;
            }
            let enc = cfg.encoder_config();
            let us = EncoderModel::init(enc, &mut stream(cfg.seed, "encoder.init.us"))?;
            let sdf = EncoderModel::init(enc, &mut stream(cfg.seed, "encoder.init.sdf"))?;
            let mut tc = cfg.train.clone();
            tc.seed = derive_seed(cfg.seed, "train");
            let history_path = out.join("train_history.json");
            let outcome = match train(us, sdf, &mut source, &tc) {
                Ok(o) => o,
                Err(Error::Diverged { epoch, history, reason }) => {
                    write_json(&history, &history_path)?;
                    return Err(Error::Diverged { epoch, history, reason });
                }
                Err(e) => return Err(e),
            };
            write_json(&outcome.history, &history_path)?;
            let stem = out.join("encoder");
            write_encoder(&outcome.us_model, tc.seed, &with_suffix(&stem, "_us"))?;
            write_encoder(&outcome.sdf_model, tc.seed, &with_suffix(&stem, "_sdf"))?;
            println!(
                "trained {} epochs, final loss {:.4}; encoders at {}_{{us,sdf}}.enc.*",
                outcome.history.len(),
                outcome.history.last().copied().unwrap_or(f64::NAN),
                stem.display()
            );
        }
        Command::Gradcheck { dims, step } => {
            let dims = if dims.is_empty() { vec![[32, 32, 32], [64, 64, 8]] } else { dims };
            let mut reports = Vec::new();
            let mut worst = 0f64;
            for d in dims {
                let r = gradcheck(d, cfg.seed, step)?;
                println!(
                    "patch {:?}: {} parameters, max relative error {:.3e}",
                    r.patch_dims, r.parameters, r.max_relative_error
                );
                worst = worst.max(r.max_relative_error);
                reports.push(r);
            }
            write_json(&reports, &out.join("gradcheck.json"))?;
            println!("max relative error {worst:.3e}");
            if !(worst < 1e-4) {
                eprintln!("error: gradient check failed (max relative error {worst:.3e} >= 1e-4)");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Localize { data, slice, method } => {
            let dir = data_dir(&data, &cfg)?;
            let dataset = Dataset::load(&dir)?;
            check_shape(&dataset, slice.shape)?;
            let vols = &dataset.volumes[slice.shape];
            let mesh = dataset.family.mesh(slice.shape)?;
            let sample = extract_slice(&vols.us, &vols.labels, slice.z, cfg.patch_dims[2])?;
            let mut rng = stream(cfg.seed, &format!("localize/{}/{}", slice.shape, slice.z));
            let pred = if method.oracle {
                let oracle = OracleEmbedder {
                    slice_to_shape: sample.ground_truth,
                    noise_std: method.noise,
                };
                localize_slice(&sample.us, &sample.labels, mesh.vertices(), &oracle, cfg.patch_dims, &cfg.localization, &mut rng)?
            } else {
                let (us, sdf) = load_encoders(&encoder_stem(&method, &cfg)?)?;
                let emb = LearnedEmbedder::new(us, &sdf, &vols.sdf, mesh.vertices())?;
                localize_slice(&sample.us, &sample.labels, mesh.vertices(), &emb, cfg.patch_dims, &cfg.localization, &mut rng)?
            };
            let path = out.join("prediction.json");
            pred.record().write(&path)?;
            println!(
                "slice z = {:.2} mm: loss {:.3}, candidate z {:?}, fallback {} -> {}",
                sample.z_mm,
                pred.procrustes_loss,
                pred.candidate_z,
                pred.fallback,
                path.display()
            );
        }
        Command::Evaluate {
            data,
            shape,
            prediction,
            z,
            slices,
            reference_length,
            method,
        } => {
            let dir = data_dir(&data, &cfg)?;
            let dataset = Dataset::load(&dir)?;
            check_shape(&dataset, shape)?;
            let vols = &dataset.volumes[shape];
            if let Some(pred_path) = prediction {
                require(&pred_path)?;
                let z = z.ok_or_else(|| Error::InvalidInput("--prediction needs --z".into()))?;
                let pred = PredictionRecord::read(&pred_path)?.transform::<f64>()?;
                let sample = extract_slice(&vols.us, &vols.labels, z, cfg.patch_dims[2])?;
                let e = slice_errors(&pred, &sample.ground_truth, &Vec3::zeros());
                write_json(&e, &out.join("errors.json"))?;
                println!(
                    "translational error {:.4} mm, rotational error {:.4} deg",
                    e.translational_mm, e.rotational_deg
                );
                return Ok(ExitCode::SUCCESS);
            }
            let reference = match reference_length {
                Some(r) => r,
                None => {
                    let pdm = build_pdm(&dataset.family)?;
                    let (lo, hi) = pdm
                        .mean_mesh(dataset.family.faces())?
                        .z_extent()
                        .ok_or_else(|| Error::InvalidInput("empty mean shape".into()))?;
                    hi - lo
                }
            };
            let mesh = dataset.family.mesh(shape)?;
            let target = Target {
                vertices: mesh.vertices(),
            };
            let n = slices.unwrap_or(cfg.evaluation.n_slices);
            let seed = derive_seed(cfg.seed, "evaluate");
            let report = if method.oracle {
                evaluate_sweep(shape, &vols.us, &vols.labels, &target, &Method::Oracle { noise_std: method.noise }, &cfg, n, reference, seed)?
            } else {
                let (us, sdf) = load_encoders(&encoder_stem(&method, &cfg)?)?;
                let emb = LearnedEmbedder::new(us, &sdf, &vols.sdf, mesh.vertices())?;
                evaluate_sweep(shape, &vols.us, &vols.labels, &target, &Method::Learned(&emb), &cfg, n, reference, seed)?
            };
            #[derive(Serialize)]
            struct Output<'a> {
                seed: u64,
                shape: usize,
                report: &'a sliceloc::evaluation::SweepReport,
                config: &'a PipelineConfig,
            }
            write_json(
                &Output {
                    seed: cfg.seed,
                    shape,
                    report: &report,
                    config: &cfg,
                },
                &out.join("report.json"),
            )?;
            let csv = out.join("slices.csv");
            fs::write(&csv, report.csv()).map_err(|e| io_err(&csv, e))?;
            println!("{}", report.table_row());
        }
        Command::Folds {
            data,
            task,
            oracle,
            noise,
            baseline,
        } => {
            if let Some(t) = task {
                cfg.evaluation.task = match t {
                    TaskArg::PatientSdf => Task::PatientSdf,
                    TaskArg::MeanShape => Task::MeanShape,
                    TaskArg::SsmSamples => Task::SsmSamples,
                };
            }
            let dataset = match data.or_else(|| cfg.paths.data_dir.clone()) {
                Some(dir) => {
                    require(&dir.join("family.json"))?;
                    Dataset::load(&dir)?
                }
                None => Dataset::synthesize(&cfg)?,
            };
            let method = if oracle {
                FoldMethod::Oracle { noise_std: noise }
            } else {
                FoldMethod::Learned
            };
            let report = run_folds(&dataset, &cfg, method, baseline)?;
            report.write_json(&out.join("folds.json"))?;
            for f in &report.folds {
                println!("fold {}: {}", f.fold, f.report.table_row());
            }
            println!("{} ({}): {}", report.task, report.method, report.aggregate.table_row());
            if let Some(b) = &report.baseline {
                println!("random baseline: {}", b.table_row());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
