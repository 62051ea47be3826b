//! Command-line front end.

mod config;
mod io;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{GlobalFlags, RunConfig};
pub use io::{load_grids, load_model, read_latents, read_manifest, write_latents, write_manifest, ManifestRow};

use crate::error::{Error, Result};
use crate::metrics_eval::{complexity_report, eval_reconstruction, generate_samples};
use crate::model::{DecodeMode, RocNet};
use crate::octree::Octree;
use crate::tensor::Real;
use crate::training::{curve_csv, end_to_end_gradient_check, fit_with, op_gradient_checks, Precision};
use crate::voxel::{synthetic, ShapeKind, VoxelGrid, DEFAULT_SURFACE_POINTS};

#[derive(Parser, Debug)]
#[command(name = "rocnet", version, about = "Recursive octree autoencoder for binary voxel grids")]
pub struct Cli {
    #[command(flatten)]
    pub flags: GlobalFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic RVOX1 grids and a `path,label` manifest into --out.
    GenData {
        /// sphere, box, blob, torus, or mixed to cycle through all four.
        #[arg(long, default_value = "mixed")]
        kind: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Grid side; defaults to --n.
        #[arg(long)]
        side: Option<usize>,
    },
    /// Convert between grids and octrees, or print octree statistics.
    Octree {
        #[command(subcommand)]
        action: OctreeAction,
    },
    /// Train an autoencoder; writes checkpoints and loss.csv into --out.
    Train {
        /// Grid files or manifests.
        #[arg(required = true)]
        data: Vec<PathBuf>,
        /// Save a checkpoint every this many iterations.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Evaluate mean training IoU every this many iterations.
        #[arg(long)]
        eval_every: Option<usize>,
        /// f32 or f64.
        #[arg(long)]
        precision: Option<Precision>,
    },
    /// Encode grids to --out/latents.rlat.
    Encode {
        checkpoint: PathBuf,
        #[arg(required = true)]
        grids: Vec<PathBuf>,
    },
    /// Decode a latent file into grids under --out.
    Decode {
        checkpoint: PathBuf,
        latents: PathBuf,
        /// Grids whose topology known mode follows, one per code.
        #[arg(long, num_args = 1..)]
        reference: Vec<PathBuf>,
    },
    /// Score reconstructions; writes eval.csv and eval.txt into --out.
    Eval {
        checkpoint: PathBuf,
        #[arg(required = true)]
        data: Vec<PathBuf>,
        /// Surface points per shape for the Chamfer distance.
        #[arg(long, default_value_t = DEFAULT_SURFACE_POINTS)]
        points: usize,
    },
    /// Decode random convex combinations of training latents.
    Sample {
        checkpoint: PathBuf,
        latents: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Finite-difference checks of every operation and of the full loss.
    Gradcheck {
        /// Coordinates sampled per parameter tensor in the end-to-end check.
        #[arg(long, default_value_t = 6)]
        max_coords: usize,
    },
    /// Parameter counts and memory scale per configuration.
    Params {
        /// Comma-separated `N:k` pairs; defaults to k=32 with N from 64 to 2048.
        #[arg(long)]
        configs: Option<String>,
        /// Also time one training iteration for configurations with N up to this.
        #[arg(long, default_value_t = 0)]
        measure_up_to: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum OctreeAction {
    /// RVOX1 grid to ROCT1 octree, using --k.
    Build { input: PathBuf, output: Option<PathBuf> },
    /// ROCT1 octree back to an RVOX1 grid.
    Unbuild { input: PathBuf, output: Option<PathBuf> },
    /// Node counts and compression ratio of a grid or octree file.
    Info { input: PathBuf },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(&cli.flags)?;
    match cli.command {
        Command::GenData { kind, count, side } => gen_data(&cfg, &kind, count, side.unwrap_or(cfg.n)),
        Command::Octree { action } => octree(&cfg, action),
        Command::Train { data, checkpoint_every, eval_every, precision } => {
            if let Some(c) = checkpoint_every {
                cfg.checkpoint_every = c;
            }
            if let Some(e) = eval_every {
                cfg.eval_every = e;
            }
            if let Some(p) = precision {
                cfg.precision = p;
            }
            train(&cfg, &data)
        }
        Command::Encode { checkpoint, grids } => encode(&cfg, &checkpoint, &grids),
        Command::Decode { checkpoint, latents, reference } => decode(&cfg, &checkpoint, &latents, &reference),
        Command::Eval { checkpoint, data, points } => eval(&cfg, &checkpoint, &data, points),
        Command::Sample { checkpoint, latents, count } => sample(&cfg, &checkpoint, &latents, count),
        Command::Gradcheck { max_coords } => gradcheck(&cfg, max_coords),
        Command::Params { configs, measure_up_to } => params(&cfg, configs.as_deref(), measure_up_to),
    }
}

fn gen_data(cfg: &RunConfig, kind: &str, count: usize, side: usize) -> Result<()> {
    let kinds: Vec<ShapeKind> = match kind {
        "mixed" => ShapeKind::ALL.to_vec(),
        k => vec![k.parse()?],
    };
    cfg.echo_into(&cfg.out)?;
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let kind = kinds[i % kinds.len()];
        let grid = synthetic(kind, side, cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
        let name = format!("{}_{i:04}.rvox", kind.name());
        grid.save(cfg.out.join(&name))?;
        rows.push(ManifestRow { path: name.into(), label: kind.name().into() });
    }
    write_manifest(&cfg.out.join("manifest.csv"), &rows)?;
    println!("wrote {count} grids to {}", cfg.out.display());
    Ok(())
}

fn is_octree_file(path: &Path) -> Result<bool> {
    let bytes = std::fs::read(path)?;
    Ok(bytes.starts_with(crate::octree::TREE_MAGIC))
}

fn octree(cfg: &RunConfig, action: OctreeAction) -> Result<()> {
    let default_output = |input: &Path, ext: &str| {
        let name = input.file_stem().map(PathBuf::from).unwrap_or_else(|| "out".into());
        cfg.out.join(name).with_extension(ext)
    };
    match action {
        OctreeAction::Build { input, output } => {
            let tree = Octree::build(&VoxelGrid::load(&input)?, cfg.k)?;
            let output = output.unwrap_or_else(|| default_output(&input, "roct"));
            create_parent(&output)?;
            tree.save(&output)?;
            println!("{}", output.display());
        }
        OctreeAction::Unbuild { input, output } => {
            let grid = Octree::load(&input)?.to_voxels()?;
            let output = output.unwrap_or_else(|| default_output(&input, "rvox"));
            create_parent(&output)?;
            grid.save(&output)?;
            println!("{}", output.display());
        }
        OctreeAction::Info { input } => {
            let tree = if is_octree_file(&input)? {
                Octree::load(&input)?
            } else {
                Octree::build(&VoxelGrid::load(&input)?, cfg.k)?
            };
            println!("{}", tree.stats());
        }
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(std::fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn build_trees(grids: &[VoxelGrid], grid_side: usize, leaf_side: usize) -> Result<Vec<Octree>> {
    if let Some(g) = grids.iter().find(|g| g.side() != grid_side) {
        return Err(Error::ConfigMismatch(format!("grid side {} but the model expects {grid_side}", g.side())));
    }
    grids.iter().map(|g| Octree::build(g, leaf_side)).collect()
}

fn train(cfg: &RunConfig, data: &[PathBuf]) -> Result<()> {
    let (grids, _) = load_grids(data)?;
    let trees = build_trees(&grids, cfg.n, cfg.k)?;
    cfg.echo_into(&cfg.out)?;
    match cfg.precision {
        Precision::F32 => train_at::<f32>(cfg, &trees),
        Precision::F64 => train_at::<f64>(cfg, &trees),
    }
}

fn train_at<T: Real>(cfg: &RunConfig, trees: &[Octree]) -> Result<()> {
    let refs: Vec<&Octree> = trees.iter().collect();
    let net = RocNet::<T>::new(cfg.model(), cfg.seed)?;
    let report_every = (cfg.iterations / 20).max(1);
    let result = fit_with(net, &refs, &cfg.train(), |p, net| {
        if cfg.checkpoint_every > 0 && p.iteration % cfg.checkpoint_every == 0 {
            net.save(cfg.out.join(format!("checkpoint_{:06}.rockpt", p.iteration)))?;
        }
        if p.iteration % report_every == 0 || p.mean_train_iou.is_some() {
            let iou = p.mean_train_iou.map(|v| format!(" iou {v:.4}")).unwrap_or_default();
            println!(
                "iter {:>6} loss {:.4} label {:.4} recon {:.4}{iou}",
                p.iteration, p.report.total, p.report.label_loss, p.report.recon_loss
            );
        }
        Ok(())
    })?;
    std::fs::write(cfg.out.join("loss.csv"), curve_csv(&result.curve))?;
    result.net.save(cfg.out.join("model.rockpt"))?;
    println!("{:.3} s/iteration, checkpoint {}", result.seconds_per_iteration, cfg.out.join("model.rockpt").display());
    Ok(())
}

fn encode(cfg: &RunConfig, checkpoint: &Path, inputs: &[PathBuf]) -> Result<()> {
    let net = load_model(checkpoint)?;
    let (grids, _) = load_grids(inputs)?;
    let trees = build_trees(&grids, net.config.grid_side, net.config.leaf_side)?;
    let mut codes = Vec::with_capacity(trees.len());
    for part in trees.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Octree> = part.iter().collect();
        codes.extend(net.encode(&refs)?);
    }
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("latents.rlat");
    write_latents(&path, &codes)?;
    println!("{} codes of {} floats -> {}", codes.len(), net.config.latent_dim, path.display());
    Ok(())
}

fn decode(cfg: &RunConfig, checkpoint: &Path, latents: &Path, reference: &[PathBuf]) -> Result<()> {
    let net = load_model(checkpoint)?;
    let codes = read_latents(latents)?;
    let trees = match cfg.mode {
        DecodeMode::Known if reference.is_empty() => {
            return Err(Error::Usage("known mode needs --reference grids".into()));
        }
        DecodeMode::Known => {
            let (grids, _) = load_grids(reference)?;
            let trees = build_trees(&grids, net.config.grid_side, net.config.leaf_side)?;
            if trees.len() != codes.len() {
                return Err(Error::InvalidArgument(format!("{} references for {} codes", trees.len(), codes.len())));
            }
            Some(trees)
        }
        DecodeMode::Predicted => None,
    };
    cfg.echo_into(&cfg.out)?;
    let chunk = cfg.batch_size.max(1);
    for (c, part) in codes.chunks(chunk).enumerate() {
        let refs: Option<Vec<&Octree>> = trees.as_ref().map(|t| t[c * chunk..c * chunk + part.len()].iter().collect());
        for (j, tree) in net.decode(part, cfg.mode, refs.as_deref())?.iter().enumerate() {
            tree.to_voxels()?.save(cfg.out.join(format!("decoded_{:04}.rvox", c * chunk + j)))?;
        }
    }
    println!("decoded {} grids into {}", codes.len(), cfg.out.display());
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: &[PathBuf], points: usize) -> Result<()> {
    let net = load_model(checkpoint)?;
    let (grids, _) = load_grids(data)?;
    let report = eval_reconstruction(&net, &grids, cfg.mode, cfg.batch_size, points, cfg.seed)?;
    cfg.echo_into(&cfg.out)?;
    std::fs::write(cfg.out.join("eval.csv"), report.to_csv())?;
    std::fs::write(cfg.out.join("eval.txt"), format!("{report}\n"))?;
    println!("{report}");
    Ok(())
}

fn sample(cfg: &RunConfig, checkpoint: &Path, latents: &Path, count: usize) -> Result<()> {
    let net = load_model(checkpoint)?;
    let codes = read_latents(latents)?;
    let samples = generate_samples(&net, &codes, count, cfg.seed)?;
    cfg.echo_into(&cfg.out)?;
    let mut list = String::from("sample,nearest,distance\n");
    for (i, s) in samples.iter().enumerate() {
        s.grid.save(cfg.out.join(format!("sample_{i:04}.rvox")))?;
        list += &format!("{i},{},{:.6}\n", s.nearest, s.distance);
    }
    std::fs::write(cfg.out.join("nearest.csv"), &list)?;
    print!("{list}");
    Ok(())
}

fn gradcheck(cfg: &RunConfig, max_coords: usize) -> Result<()> {
    let mut failed = Vec::new();
    for (name, report) in op_gradient_checks(cfg.seed)? {
        let ok = report.passed();
        println!("{:<36} max rel error {:.3e} {}", name, report.max_rel_error(), if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    let e2e = end_to_end_gradient_check(cfg.seed, max_coords)?;
    let ok = e2e.passed();
    println!(
        "{:<36} max rel error {:.3e} {}",
        "end-to-end loss (N=8, k=4)",
        e2e.max_rel_error(),
        if ok { "ok" } else { "FAIL" }
    );
    if !ok {
        failed.push("end-to-end loss".into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn parse_configs(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|pair| {
            let (n, k) =
                pair.trim().split_once(':').ok_or_else(|| Error::Usage(format!("expected N:k, got {pair:?}")))?;
            let n = n.parse().map_err(|_| Error::Usage(format!("bad N in {pair:?}")))?;
            let k = k.parse().map_err(|_| Error::Usage(format!("bad k in {pair:?}")))?;
            Ok((n, k))
        })
        .collect()
}

fn params(cfg: &RunConfig, configs: Option<&str>, measure_up_to: usize) -> Result<()> {
    let configs = match configs {
        Some(s) => parse_configs(s)?,
        None => (6..=11).map(|p| (1usize << p, 32)).collect(),
    };
    println!("{}", complexity_report(&configs, measure_up_to, cfg.seed)?);
    Ok(())
}
