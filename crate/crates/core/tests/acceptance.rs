//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run alone with `cargo test --release -p rocnet --test acceptance`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rocnet::cli::read_manifest;
use rocnet::metrics_eval::{
    decode_combinations, eval_classification, eval_reconstruction, generate_samples, AffineFit,
};
use rocnet::model::{count_parameters, DecodeMode, ModelConfig, RocNet, Scope};
use rocnet::octree::{levels, Octree};
use rocnet::training::{
    end_to_end_gradient_check, fit_classifier, measure_resources, op_gradient_checks, split_train_test, TrainConfig,
};
use rocnet::voxel::{chamfer, iou, synthetic, PointSet, ShapeKind, VoxelGrid, DEFAULT_SURFACE_POINTS};

const OVERFIT_SHAPES: usize = 20;
const OVERFIT_ITERATIONS: usize = 200;
const OVERFIT_BATCH: usize = 20;
const CLASSIFIER_ITERATIONS: usize = 150;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_grid(rng: &mut ChaCha8Rng, side: usize) -> VoxelGrid {
    match rng.gen_range(0..5) {
        0 => {
            let p: f64 = rng.gen_range(0.0..1.0);
            VoxelGrid::from_fn(side, |_, _, _| rng.gen_bool(p)).unwrap()
        }
        1 => {
            let mut g = VoxelGrid::empty(side).unwrap();
            for _ in 0..rng.gen_range(1..8) {
                let size = 1 << rng.gen_range(0..=side.trailing_zeros());
                let o = [0; 3].map(|_| rng.gen_range(0..=side - size));
                g.fill_block(o, size, rng.gen_bool(0.8));
            }
            g
        }
        2 => {
            let mut g = VoxelGrid::empty(side).unwrap();
            for _ in 0..rng.gen_range(1..20) {
                g.set(rng.gen_range(0..side), rng.gen_range(0..side), rng.gen_range(0..side), true);
            }
            g
        }
        3 => synthetic(ShapeKind::ALL[rng.gen_range(0..4)], side, rng.gen()).unwrap(),
        _ => {
            if rng.gen() {
                VoxelGrid::full(side).unwrap()
            } else {
                VoxelGrid::empty(side).unwrap()
            }
        }
    }
}

fn codec_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut nodes = 0;
    for i in 0..200 {
        let side = [16, 32, 64][rng.gen_range(0..3)];
        let k = [4, 8, 16][rng.gen_range(0..3)];
        let g = random_grid(&mut rng, side);
        let t = Octree::build(&g, k).map_err(err)?;
        if t.to_voxels().map_err(err)? != g {
            return Err(format!("grid {i} (N={side}, k={k}) did not survive build/to_voxels"));
        }
        if Octree::from_bytes(&t.to_bytes()).map_err(err)? != t {
            return Err(format!("tree {i} (N={side}, k={k}) did not survive serialization"));
        }
        nodes += t.node_count();
    }
    Ok(format!("200 grids, {nodes} nodes, all bit-exact"))
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    for (name, report) in op_gradient_checks(0).map_err(err)? {
        if !report.passed() {
            return Err(format!("{name}: max relative error {:.3e}\n{report}", report.max_rel_error()));
        }
        worst = worst.max(report.max_rel_error());
    }
    let e2e = end_to_end_gradient_check(0, 8).map_err(err)?;
    check(
        e2e.passed(),
        format!(
            "ops max rel err {worst:.2e}; end-to-end loss over {} tensors {:.2e}",
            e2e.inputs.len(),
            e2e.max_rel_error()
        ),
    )
}

fn parameter_growth() -> Outcome {
    let sides = [64usize, 128, 256, 512, 1024, 2048];
    let counts: Vec<usize> =
        sides.iter().map(|&n| count_parameters(&ModelConfig::new(n, 32), Scope::Encoder)).collect();
    let xs: Vec<i64> = sides.iter().map(|&n| levels(n, 32) as i64).collect();
    let ys: Vec<i64> = counts.iter().map(|&c| c as i64).collect();
    let fit = AffineFit::through(&xs, &ys).map_err(err)?;
    let increasing = counts.windows(2).all(|w| w[1] > w[0]);
    check(fit.is_exact() && increasing, format!("encoder counts {counts:?}, +{} per level, zero residual", fit.slope))
}

fn complexity_scaling() -> Outcome {
    let k = 8;
    let mut dense = Vec::new();
    for side in [16usize, 32, 64] {
        let net = RocNet::<f32>::new(ModelConfig::new(side, k), 0).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(side as u64);
        let g = VoxelGrid::from_fn(side, |_, _, _| rng.gen_bool(0.5)).map_err(err)?;
        let t = Octree::build(&g, k).map_err(err)?;
        dense.push(measure_resources(&net, &[&t], 5.0).map_err(err)?.feature_bytes);
    }
    let mut empty = Vec::new();
    for side in [16usize, 32, 64, 128, 256, 512] {
        let net = RocNet::<f32>::new(ModelConfig::new(side, k), 0).map_err(err)?;
        let t = Octree::build(&VoxelGrid::empty(side).map_err(err)?, k).map_err(err)?;
        empty.push(measure_resources(&net, &[&t], 5.0).map_err(err)?.feature_bytes);
    }
    let ratios: Vec<f64> = dense.windows(2).map(|w| w[1] as f64 / w[0] as f64).collect();
    let ok = ratios.iter().all(|r| (4.0..=16.0).contains(r)) && empty.iter().all(|&b| b == empty[0]);
    check(
        ok,
        format!(
            "dense feature bytes {dense:?} (x{:.2}, x{:.2} per doubling); empty grids N=16..512: {:?}",
            ratios[0], ratios[1], empty
        ),
    )
}

fn brute_iou(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
    let n = a.side();
    let (mut inter, mut union) = (0usize, 0usize);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                inter += (a.get(x, y, z) && b.get(x, y, z)) as usize;
                union += (a.get(x, y, z) || b.get(x, y, z)) as usize;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn brute_chamfer(p: &[[f64; 3]], g: &[[f64; 3]]) -> f64 {
    let one_way = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        let s: f64 = from
            .iter()
            .map(|a| {
                to.iter()
                    .map(|b| {
                        let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        s / from.len() as f64
    };
    one_way(p, g) + one_way(g, p)
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..300 {
        let side = [4, 8, 16][i % 3];
        let (a, b) = (random_grid(&mut rng, side), random_grid(&mut rng, side));
        if iou(&a, &b).map_err(err)? != brute_iou(&a, &b) || iou(&a, &a).map_err(err)? != 1.0 {
            return Err(format!("iou mismatch on instance {i}"));
        }
        let mut cloud = |n: usize| -> Vec<[f64; 3]> {
            (0..n).map(|_| [0; 3].map(|_| (rng.gen_range(0..8) as f64) * 0.125 + rng.gen_range(0.0..1e-3))).collect()
        };
        let (p, g) = (cloud(1 + i % 100), cloud(100 - i % 100));
        let (ps, gs) = (PointSet::new(p.clone()), PointSet::new(g.clone()));
        if chamfer(&ps, &gs).map_err(err)? != brute_chamfer(&p, &g) || chamfer(&ps, &ps).map_err(err)? != 0.0 {
            return Err(format!("chamfer mismatch on instance {i}"));
        }
    }
    Ok("300 IoU and 300 Chamfer instances equal brute force exactly".into())
}

fn classification() -> Outcome {
    let kinds = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Torus];
    let trees: Vec<Octree> = (0..300)
        .map(|i| Octree::build(&synthetic(kinds[i % 3], 32, 1000 + i as u64)?, 8))
        .collect::<rocnet::Result<_>>()
        .map_err(err)?;
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let (train, test) = split_train_test(trees.len(), 7);
    let pick = |idx: &[usize]| -> (Vec<&Octree>, Vec<usize>) { idx.iter().map(|&i| (&trees[i], labels[i])).unzip() };
    let ((train_t, train_l), (test_t, test_l)) = (pick(&train), pick(&test));
    let mut net = RocNet::<f32>::new(ModelConfig { n_classes: 3, ..ModelConfig::new(32, 8) }, 3).map_err(err)?;
    let cfg = TrainConfig { batch_size: 32, iterations: CLASSIFIER_ITERATIONS, seed: 3, ..Default::default() };
    fit_classifier(&mut net, &train_t, &train_l, &cfg).map_err(err)?;
    let acc = eval_classification(&net, &test_t, &test_l, 50).map_err(err)?;
    check(acc >= 0.90, format!("held-out accuracy {acc:.3} on {} shapes ({} trained)", test_t.len(), train_t.len()))
}

/// Output of the overfit run shared by the reconstruction, mode, generation and
/// determinism criteria.
struct OverfitRun {
    dir: tempfile::TempDir,
    grids: Vec<VoxelGrid>,
    net: RocNet<f32>,
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rocnet"))
        .args(args)
        .current_dir(dir)
        .env("ROCNET_THREADS", "0")
        .output()
        .map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("rocnet {args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn train_args(out: &str) -> Vec<String> {
    let n = OVERFIT_ITERATIONS.to_string();
    let b = OVERFIT_BATCH.to_string();
    ["train", "data/manifest.csv", "--n", "32", "--k", "8", "--latent-dim", "80", "--alpha", "5"]
        .into_iter()
        .map(String::from)
        .chain(["--batch-size".into(), b, "--iterations".into(), n, "--seed".into(), "1".into()])
        .chain(["--out".into(), out.into()])
        .collect()
}

fn overfit_run() -> Result<OverfitRun, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let count = OVERFIT_SHAPES.to_string();
    cli(dir.path(), &["gen-data", "--kind", "mixed", "--count", &count, "--n", "32", "--seed", "0", "--out", "data"])?;
    let args = train_args("run1");
    cli(dir.path(), &args.iter().map(String::as_str).collect::<Vec<_>>())?;
    let grids = read_manifest(&dir.path().join("data/manifest.csv"))
        .map_err(err)?
        .iter()
        .map(|r| VoxelGrid::load(&r.path))
        .collect::<rocnet::Result<Vec<_>>>()
        .map_err(err)?;
    let net = RocNet::<f32>::load(dir.path().join("run1/model.rockpt")).map_err(err)?;
    Ok(OverfitRun { dir, grids, net })
}

fn overfit(run: &OverfitRun) -> Result<(Outcome, Outcome), String> {
    let predicted =
        eval_reconstruction(&run.net, &run.grids, DecodeMode::Predicted, OVERFIT_BATCH, DEFAULT_SURFACE_POINTS, 0)
            .map_err(err)?;
    let known = eval_reconstruction(&run.net, &run.grids, DecodeMode::Known, OVERFIT_BATCH, DEFAULT_SURFACE_POINTS, 0)
        .map_err(err)?;
    let reconstruction = check(
        predicted.mean_iou >= 0.95 && predicted.topology_accuracy >= 0.98,
        format!(
            "{} shapes, {OVERFIT_ITERATIONS} iterations: predicted-mode IoU {:.4}, topology accuracy {:.4}, Chamfer x1e3 {:.4}",
            run.grids.len(),
            predicted.mean_iou,
            predicted.topology_accuracy,
            predicted.mean_chamfer * 1e3
        ),
    );
    let gap = (known.mean_iou - predicted.mean_iou).abs();
    let modes =
        check(gap <= 0.02, format!("known {:.4} vs predicted {:.4}, gap {gap:.4}", known.mean_iou, predicted.mean_iou));
    Ok((reconstruction, modes))
}

fn generation(run: &OverfitRun) -> Outcome {
    let trees: Vec<Octree> =
        run.grids.iter().map(|g| Octree::build(g, 8)).collect::<rocnet::Result<_>>().map_err(err)?;
    let refs: Vec<&Octree> = trees.iter().collect();
    let latents = run.net.encode(&refs).map_err(err)?;
    let direct = run.net.decode(&latents, DecodeMode::Predicted, None).map_err(err)?;
    let n = latents.len();
    let one_hot: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for (i, s) in decode_combinations(&run.net, &latents, one_hot).map_err(err)?.iter().enumerate() {
        if s.code != latents[i] || s.grid != direct[i].to_voxels().map_err(err)? || s.nearest != i {
            return Err(format!("one-hot weights on latent {i} did not reproduce its decode"));
        }
    }
    let a = generate_samples(&run.net, &latents, 32, 5).map_err(err)?;
    let b = generate_samples(&run.net, &latents, 32, 5).map_err(err)?;
    let same = a.iter().zip(&b).all(|(x, y)| x.code == y.code && x.grid == y.grid && x.weights == y.weights);
    for s in &a {
        for (c, v) in s.code.iter().enumerate() {
            let lo = latents.iter().map(|l| l[c]).fold(f32::INFINITY, f32::min);
            let hi = latents.iter().map(|l| l[c]).fold(f32::NEG_INFINITY, f32::max);
            if !(lo <= *v && *v <= hi) {
                return Err(format!("sampled coordinate {c} = {v} outside [{lo}, {hi}]"));
            }
        }
    }
    check(same, format!("{n} one-hot decodes exact; 32 samples inside the hull and reproducible"))
}

fn determinism(run: &OverfitRun) -> Outcome {
    let args = train_args("run2");
    cli(run.dir.path(), &args.iter().map(String::as_str).collect::<Vec<_>>())?;
    let read = |p: PathBuf| std::fs::read(p).map_err(err);
    let d = run.dir.path();
    let ckpt = read(d.join("run1/model.rockpt"))? == read(d.join("run2/model.rockpt"))?;
    let curve = read(d.join("run1/loss.csv"))? == read(d.join("run2/loss.csv"))?;
    check(ckpt && curve, format!("checkpoints identical: {ckpt}; loss CSVs identical: {curve}"))
}

fn report(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    report_outcome(id, name, limit, start.elapsed(), outcome)
}

fn report_outcome(id: usize, name: &str, limit: Duration, took: Duration, outcome: Outcome) -> bool {
    let in_time = took <= limit;
    let (pass, detail) = match outcome {
        Ok(d) if in_time => (true, d),
        Ok(d) => (false, format!("{d}; exceeded {}s", limit.as_secs())),
        Err(d) => (false, d),
    };
    println!("[{}] #{id:<2} {name:<28} {:>8.1}s  {detail}", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
    pass
}

fn main() {
    std::env::set_var("ROCNET_THREADS", "0");
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let min = |m: u64| Duration::from_secs(60 * m);
    let mut results = Vec::new();

    if wanted(1) {
        results.push(report(1, "octree codec round trip", min(1), codec_round_trip));
    }
    if wanted(2) {
        results.push(report(2, "gradient correctness", min(5), gradients));
    }
    if [3, 4, 9, 10].into_iter().any(wanted) {
        let start = Instant::now();
        match overfit_run() {
            Ok(run) => {
                let scored = overfit(&run);
                let took = start.elapsed();
                let (reconstruction, modes) = match scored {
                    Ok(pair) => pair,
                    Err(e) => (Err(e.clone()), Err(e)),
                };
                if wanted(3) {
                    results.push(report_outcome(3, "overfit reconstruction", min(30), took, reconstruction));
                }
                if wanted(4) {
                    results.push(report_outcome(4, "mode near-equality", min(30), took, modes));
                }
                if wanted(9) {
                    results.push(report(9, "generation contract", min(1), || generation(&run)));
                }
                if wanted(10) {
                    results.push(report(10, "determinism", min(30), || determinism(&run)));
                }
            }
            Err(e) => {
                for (id, name) in [
                    (3, "overfit reconstruction"),
                    (4, "mode near-equality"),
                    (9, "generation contract"),
                    (10, "determinism"),
                ] {
                    if wanted(id) {
                        results.push(report_outcome(id, name, min(30), start.elapsed(), Err(e.clone())));
                    }
                }
            }
        }
    }
    if wanted(5) {
        results.push(report(5, "parameter growth law", Duration::from_secs(1), parameter_growth));
    }
    if wanted(6) {
        results.push(report(6, "complexity scaling", min(10), complexity_scaling));
    }
    if wanted(7) {
        results.push(report(7, "metric correctness", min(1), metrics));
    }
    if wanted(8) {
        results.push(report(8, "classification sanity", min(45), classification));
    }

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
