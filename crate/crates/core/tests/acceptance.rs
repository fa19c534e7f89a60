//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test --release -p sliceloc-core --test acceptance -- 1 6` runs a
//! subset by criterion number.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sliceloc::config::PipelineConfig;
use sliceloc::encoder::{gradcheck, gradcheck_config, triplet_loss};
use sliceloc::evaluation::{evaluate_sweep, run_folds, Dataset, FoldMethod, Method, SweepReport, Target};
use sliceloc::geometry::{icosphere, voxelize_sdf};
use sliceloc::registration::{hungarian, procrustes};
use sliceloc::scalar::Vec3;
use sliceloc::seeding::derive_seed;
use sliceloc::shape_model::{build_pdm, random_coeffs, sample_shape, CorrespondedShapeSet, ModeScaling, SampleCoefficients};

const MASTER_SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(MASTER_SEED, label))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for dims in [[32, 32, 32], [64, 64, 8]] {
        let weights = gradcheck_config(dims).parameter_count();
        match gradcheck(dims, 7, 1e-4) {
            Ok(r) => {
                pass &= weights <= 500 && r.max_relative_error < 1e-4;
                details.push(format!("{dims:?}: {weights} weights/encoder, max rel err {:.2e}", r.max_relative_error));
            }
            Err(e) => {
                pass = false;
                details.push(format!("{dims:?}: {e}"));
            }
        }
    }
    let t = start.elapsed();
    pass &= t < Duration::from_secs(60);
    outcome(pass, format!("{} ({:.1}s)", details.join("; "), t.as_secs_f64()))
}

fn triplet_loss_values() -> Outcome {
    let v = |x: f64, y: f64| DVector::from_vec(vec![x, y]);
    let equal = triplet_loss(&v(0.0, 0.0), &v(1.0, 0.0), &v(0.0, 1.0), 1.0);
    let hand = triplet_loss(&v(0.0, 0.0), &v(1.0, 0.0), &v(0.0, 2.0), 1.0);
    let want_hand = (1.0 + (-1f64).exp()).ln();
    let (de, dh) = ((equal - 2f64.ln()).abs(), (hand - want_hand).abs());
    outcome(de <= 1e-12 && dh <= 1e-12, format!("|equal − ln2| = {de:.1e}, |hand − ln(1+e⁻¹)| = {dh:.1e}"))
}

/// Exhaustive minimum over injective maps from the short side to the long
/// side, each total summed in row order.
fn brute_force_assignment(c: &DMatrix<f64>) -> f64 {
    fn rec(c: &DMatrix<f64>, short: usize, used: &mut [bool], picks: &mut Vec<(usize, usize)>, best: &mut f64) {
        let transposed = c.nrows() > c.ncols();
        let (n_short, n_long) = if transposed { (c.ncols(), c.nrows()) } else { (c.nrows(), c.ncols()) };
        if short == n_short {
            let mut p = picks.clone();
            p.sort();
            *best = best.min(p.iter().map(|&(i, j)| c[(i, j)]).sum::<f64>());
            return;
        }
        for l in 0..n_long {
            if !used[l] {
                used[l] = true;
                picks.push(if transposed { (l, short) } else { (short, l) });
                rec(c, short + 1, used, picks, best);
                picks.pop();
                used[l] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.nrows().max(c.ncols())], &mut Vec::new(), &mut best);
    best
}

fn hungarian_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng("acceptance/hungarian");
    let mut mismatches = 0;
    let mut rect = 0;
    for trial in 0..200 {
        let rows = r.random_range(1..=8);
        let cols = r.random_range(1..=8);
        rect += usize::from(rows != cols);
        // half of the trials use small integers so ties are common
        let c = DMatrix::from_fn(rows, cols, |_, _| {
            if trial % 2 == 0 {
                r.random_range(0..10) as f64
            } else {
                r.random_range(0.0..100.0)
            }
        });
        let Ok(pairs) = hungarian(&c) else {
            mismatches += 1;
            continue;
        };
        let mut p = pairs.clone();
        p.sort();
        let total: f64 = p.iter().map(|&(i, j)| c[(i, j)]).sum();
        if p.len() != rows.min(cols) || total != brute_force_assignment(&c) {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && t < Duration::from_secs(60),
        format!("{mismatches}/200 mismatches ({rect} rectangular, {:.1}s)", t.as_secs_f64()),
    )
}

fn random_rotation(r: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = nalgebra::Quaternion::new(
        r.sample::<f64, _>(rand_distr::StandardNormal),
        r.sample(rand_distr::StandardNormal),
        r.sample(rand_distr::StandardNormal),
        r.sample(rand_distr::StandardNormal),
    );
    *nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
}

fn procrustes_recovery() -> Outcome {
    let mut r = rng("acceptance/procrustes");
    let (mut worst_r, mut worst_t) = (0f64, 0f64);
    let mut reflection_ok = true;
    for _ in 0..100 {
        let n = r.random_range(4..=20);
        let src: Vec<Vec3<f64>> = loop {
            let pts: Vec<Vec3<f64>> = (0..n)
                .map(|_| Vec3::new(r.random_range(-20.0..20.0), r.random_range(-20.0..20.0), r.random_range(-20.0..20.0)))
                .collect();
            let c = pts.iter().sum::<Vec3<f64>>() / n as f64;
            let spread = pts.iter().fold(Matrix3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose());
            if SymmetricEigen::new(spread).eigenvalues.min() > 1.0 {
                break pts;
            }
        };
        let rot = random_rotation(&mut r);
        let t = Vec3::new(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0), r.random_range(-50.0..50.0));
        let tgt: Vec<Vec3<f64>> = src.iter().map(|p| rot * p + t).collect();
        match procrustes(&src, &tgt) {
            Ok((fit, _)) => {
                worst_r = worst_r.max((fit.rotation - rot).norm());
                worst_t = worst_t.max((fit.translation - t).norm());
            }
            Err(_) => worst_r = f64::INFINITY,
        }
        let mirrored: Vec<Vec3<f64>> = tgt.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        match procrustes(&src, &mirrored) {
            Ok((fit, _)) => reflection_ok &= (fit.rotation.determinant() - 1.0).abs() < 1e-9,
            Err(_) => reflection_ok = false,
        }
    }
    outcome(
        worst_r <= 1e-9 && worst_t <= 1e-9 && reflection_ok,
        format!("max ‖ΔR‖_F {worst_r:.1e}, max ‖Δt‖ {worst_t:.1e} mm, reflections proper: {reflection_ok}"),
    )
}

fn pdm_correctness() -> Outcome {
    let mut r = rng("acceptance/pdm");
    let mut worst_val = 0f64;
    let mut worst_vec = 0f64;
    let mut mean_exact = true;
    for _ in 0..20 {
        let n = r.random_range(2..=5);
        let m = r.random_range(1..=10);
        let coords = DMatrix::from_fn(n, 3 * m, |_, _| r.random_range(-5.0..5.0));
        let set = CorrespondedShapeSet::from_matrix(coords.clone(), Vec::new()).unwrap();
        let pdm = build_pdm(&set).unwrap();
        // dense covariance oracle
        let mean = coords.row_mean();
        let mut y = coords.clone();
        for mut row in y.row_iter_mut() {
            row -= &mean;
        }
        let cov = y.transpose() * &y / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (j, &lambda) in pdm.eigvals().iter().enumerate() {
            let k = order[j];
            worst_val = worst_val.max((lambda - eig.eigenvalues[k]).abs());
            let v = pdm.eigvecs().column(j);
            let w = eig.eigenvectors.column(k);
            let sign = v.dot(&w).signum();
            worst_vec = worst_vec.max((v - w * sign).amax());
        }
        let zero = SampleCoefficients {
            alphas: vec![0.0; pdm.modes()],
        };
        mean_exact &= sample_shape(&pdm, &zero, ModeScaling::Sqrt).unwrap() == *pdm.mean();
    }

    // Monte Carlo on a set with well-separated variances
    let n = 5;
    let coords = DMatrix::from_fn(n, 12, |i, c| {
        let scale = [9.0, 4.0, 1.5, 0.5, 0.2][c % 5];
        scale * r.random_range(-1.0..1.0) + (i * c) as f64 * 0.01
    });
    let pdm = build_pdm(&CorrespondedShapeSet::from_matrix(coords, Vec::new()).unwrap()).unwrap();
    let samples = 10_000;
    let top = pdm.modes().min(3);
    let mut sq = vec![0.0; top];
    for _ in 0..samples {
        let c = random_coeffs::<f64, _>(&mut r, 1.0, pdm.modes()).unwrap();
        let x = sample_shape(&pdm, &c, ModeScaling::Sqrt).unwrap() - pdm.mean();
        for (j, s) in sq.iter_mut().enumerate() {
            *s += pdm.eigvecs().column(j).dot(&x).powi(2);
        }
    }
    let worst_mc = (0..top)
        .map(|j| (sq[j] / samples as f64 / pdm.eigvals()[j] - 1.0).abs())
        .fold(0f64, f64::max);
    outcome(
        worst_val <= 1e-8 && worst_vec <= 1e-8 && mean_exact && worst_mc <= 0.05 && top == 3,
        format!(
            "eigval err {worst_val:.1e}, eigvec err {worst_vec:.1e}, α=0 exact: {mean_exact}, MC variance err {:.2}% over {top} modes",
            100.0 * worst_mc
        ),
    )
}

fn single_shape_setup() -> (PipelineConfig, Dataset) {
    let mut cfg = PipelineConfig {
        seed: MASTER_SEED,
        ..Default::default()
    };
    cfg.synth.n_shapes = 2;
    let data = Dataset::synthesize(&cfg).unwrap();
    (cfg, data)
}

fn oracle_sweep(cfg: &PipelineConfig, data: &Dataset, noise: f64, label: &str) -> SweepReport {
    let mesh = data.family.mesh(0).unwrap();
    let (lo, hi) = mesh.z_extent().unwrap();
    let v = &data.volumes[0];
    let target = Target {
        vertices: mesh.vertices(),
    };
    evaluate_sweep(
        0,
        &v.us,
        &v.labels,
        &target,
        &Method::Oracle { noise_std: noise },
        cfg,
        50,
        hi - lo,
        derive_seed(cfg.seed, label),
    )
    .unwrap()
}

fn oracle_end_to_end() -> (Outcome, String) {
    let start = Instant::now();
    let (mut cfg, data) = single_shape_setup();
    cfg.localization.n_sdf_patches = 1024;
    let r = oracle_sweep(&cfg, &data, 0.0, "acceptance/oracle");
    let t = start.elapsed();
    let (tr, rot) = (r.mean_trans_mm.unwrap_or(f64::INFINITY), r.mean_rot_deg.unwrap_or(f64::INFINITY));
    let pass = tr <= 0.5 && rot <= 1.0 && r.pct_within_10 == 1.0 && t < Duration::from_secs(300);
    let json = serde_json::to_string(&r).unwrap();
    (
        outcome(pass, format!("spacing {} mm, {} ({:.1}s)", cfg.synth.spacing, r.table_row(), t.as_secs_f64())),
        json,
    )
}

fn refinement_efficacy() -> (Outcome, String) {
    let (cfg, data) = single_shape_setup();
    let mut unrefined_cfg = cfg.clone();
    unrefined_cfg.localization.m_step = 0;
    let mut refined_cfg = cfg;
    refined_cfg.localization.m_step = 2;
    let a = oracle_sweep(&unrefined_cfg, &data, 2.0, "acceptance/refinement");
    let b = oracle_sweep(&refined_cfg, &data, 2.0, "acceptance/refinement");
    let wins = a
        .slices
        .iter()
        .zip(&b.slices)
        .filter(|(u, r)| matches!((u.trans_mm, r.trans_mm), (Some(u), Some(r)) if r <= u))
        .count();
    let json = serde_json::to_string(&(&a, &b)).unwrap();
    (
        outcome(
            wins * 10 >= 7 * a.slices.len(),
            format!(
                "refined ≤ unrefined on {wins}/{} slices; mean trans {:.2} → {:.2} mm",
                a.slices.len(),
                a.mean_trans_mm.unwrap_or(f64::NAN),
                b.mean_trans_mm.unwrap_or(f64::NAN)
            ),
        ),
        json,
    )
}

fn learned_end_to_end() -> (Outcome, String) {
    let start = Instant::now();
    let cfg = PipelineConfig {
        seed: MASTER_SEED,
        ..Default::default()
    };
    let data = Dataset::synthesize(&cfg).unwrap();
    let report = match run_folds(&data, &cfg, FoldMethod::Learned, true) {
        Ok(r) => r,
        Err(e) => return (outcome(false, e.to_string()), String::new()),
    };
    let t = start.elapsed();
    let agg = &report.aggregate;
    let base = report.baseline.as_ref().unwrap();
    let length = agg.mean_reference_length_mm;
    let pass = agg.trans_mm.0 < 0.15 * length && agg.trans_mm.0 < base.trans_mm.0 && t < Duration::from_secs(3600);
    let detail = format!(
        "{} shapes, {} folds, length {:.1} mm\n      learned:  {} ({:.1}% of length)\n      baseline: {} ({:.1}% of length)\n      ({:.0}s)",
        data.family.n_shapes(),
        report.folds.len(),
        length,
        agg.table_row(),
        100.0 * agg.trans_mm.0 / length,
        base.table_row(),
        100.0 * base.trans_mm.0 / length,
        t.as_secs_f64()
    );
    (outcome(pass, detail), report.to_json().unwrap())
}

fn sdf_fidelity() -> Outcome {
    let radius = 10.0;
    let spacing = 0.5;
    let unit = icosphere::<f64>(3);
    let sphere = unit.with_vertices(unit.vertices().iter().map(|v| v * radius).collect()).unwrap();
    // largest gap between the sphere and the inscribed mesh
    let chord = (0..sphere.faces().len())
        .map(|f| {
            let [a, b, c] = sphere.triangle(f);
            let n = (b - a).cross(&(c - a)).normalize();
            radius - n.dot(&a).abs()
        })
        .fold(0f64, f64::max);
    let vol = voxelize_sdf(&sphere, Vec3::repeat(spacing), 3.0).unwrap();
    let mut r = rng("acceptance/sdf");
    let bound = spacing / 2.0 + chord;
    let mut worst = 0f64;
    for _ in 0..1000 {
        let idx = r.random_range(0..vol.len());
        let [i, j, k] = vol.coords(idx);
        let p = vol.voxel_center(i, j, k);
        worst = worst.max((vol.get(i, j, k) - (p.norm() - radius)).abs());
    }
    outcome(worst <= bound, format!("max |Δ| {worst:.3} mm ≤ {bound:.3} mm (chord {chord:.3} mm)"))
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {name:<24} {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    if run(1) {
        report(1, "gradient correctness", gradient_correctness());
    }
    if run(2) {
        report(2, "triplet loss values", triplet_loss_values());
    }
    if run(3) {
        report(3, "hungarian vs brute force", hungarian_equivalence());
    }
    if run(4) {
        report(4, "procrustes recovery", procrustes_recovery());
    }
    if run(5) {
        report(5, "PDM correctness", pdm_correctness());
    }
    let mut first = Vec::new();
    let stages: [(usize, &'static str, fn() -> (Outcome, String)); 3] = [
        (6, "oracle end-to-end", oracle_end_to_end),
        (7, "refinement efficacy", refinement_efficacy),
        (8, "learned end-to-end", learned_end_to_end),
    ];
    for (n, name, f) in stages {
        if run(n) || run(9) {
            let (o, json) = f();
            if run(n) {
                report(n, name, o);
            }
            first.push((n, json));
        }
    }
    if run(9) {
        let mut same = Vec::new();
        let mut pass = true;
        for (n, json) in &first {
            let again = stages.iter().find(|s| s.0 == *n).unwrap().2().1;
            let identical = !json.is_empty() && *json == again;
            pass &= identical;
            same.push(format!("{n}: {}", if identical { "identical" } else { "DIFFERS" }));
        }
        report(9, "determinism", outcome(pass, same.join(", ")));
    }
    if run(10) {
        report(10, "SDF fidelity", sdf_fidelity());
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
