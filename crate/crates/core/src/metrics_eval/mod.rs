//! Reconstruction, classification, complexity and generation reports.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};

use crate::error::{Error, Result};
use crate::model::{count_parameters, DecodeMode, ModelConfig, RocNet, Scope};
use crate::octree::{levels, Octree, OctreeNode};
use crate::tensor::Real;
use crate::training::{measure_resources, ResourceReport};
use crate::voxel::{chamfer, iou, sample_surface, VoxelGrid};

/// Fraction of reference nodes whose counterpart in `decoded` (same depth and
/// origin) has the same type. Reference nodes with no counterpart count as misses.
pub fn topology_accuracy(decoded: &Octree, reference: &Octree) -> f64 {
    fn go(r: &OctreeNode, d: Option<&OctreeNode>, hits: &mut usize, total: &mut usize) {
        *total += 1;
        if d.is_some_and(|d| d.node_type() == r.node_type()) {
            *hits += 1;
        }
        if let Some(rc) = r.children() {
            let dc = d.and_then(|d| d.children());
            for i in 0..8 {
                go(&rc[i], dc.map(|c| &c[i]), hits, total);
            }
        }
    }
    let (mut hits, mut total) = (0, 0);
    go(reference.root(), Some(decoded.root()), &mut hits, &mut total);
    hits as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub index: usize,
    pub iou: f64,
    /// `None` when exactly one of the two grids is empty.
    pub chamfer: Option<f64>,
    pub topology_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: DecodeMode,
    pub samples: Vec<SampleScore>,
    pub mean_iou: f64,
    /// Mean over samples with a defined distance.
    pub mean_chamfer: f64,
    pub topology_accuracy: f64,
}

fn mode_name(mode: DecodeMode) -> &'static str {
    match mode {
        DecodeMode::Predicted => "predicted",
        DecodeMode::Known => "known",
    }
}

fn fmt_chamfer(c: Option<f64>) -> String {
    c.map(|v| format!("{:.4}", v * 1e3)).unwrap_or_else(|| "nan".into())
}

impl EvalReport {
    fn from_samples(mode: DecodeMode, samples: Vec<SampleScore>) -> Self {
        let n = samples.len().max(1) as f64;
        let defined: Vec<f64> = samples.iter().filter_map(|s| s.chamfer).collect();
        EvalReport {
            mode,
            mean_iou: samples.iter().map(|s| s.iou).sum::<f64>() / n,
            mean_chamfer: if defined.is_empty() {
                f64::NAN
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            },
            topology_accuracy: samples.iter().map(|s| s.topology_accuracy).sum::<f64>() / n,
            samples,
        }
    }

    /// One row per sample plus a `mean` row; Chamfer is scaled by 10^3.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,mode,iou,chamfer_x1e3,topology_accuracy\n");
        let mode = mode_name(self.mode);
        for r in &self.samples {
            s += &format!("{},{mode},{:.6},{},{:.6}\n", r.index, r.iou, fmt_chamfer(r.chamfer), r.topology_accuracy);
        }
        s += &format!(
            "mean,{mode},{:.6},{},{:.6}\n",
            self.mean_iou,
            fmt_chamfer(Some(self.mean_chamfer).filter(|v| v.is_finite())),
            self.topology_accuracy
        );
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode: {}  samples: {}", mode_name(self.mode), self.samples.len())?;
        writeln!(f, "{:>8} | {:>8} | {:>14} | {:>8}", "sample", "IoU %", "Chamfer x1e3", "topology")?;
        for r in &self.samples {
            writeln!(
                f,
                "{:>8} | {:>8.2} | {:>14} | {:>8.4}",
                r.index,
                r.iou * 100.0,
                fmt_chamfer(r.chamfer),
                r.topology_accuracy
            )?;
        }
        write!(
            f,
            "{:>8} | {:>8.2} | {:>14} | {:>8.4}",
            "mean",
            self.mean_iou * 100.0,
            fmt_chamfer(Some(self.mean_chamfer).filter(|v| v.is_finite())),
            self.topology_accuracy
        )
    }
}

/// Encodes and decodes every grid, scoring IoU, surface Chamfer and topology
/// agreement against the source. `chunk` bounds how many trees share a pass.
pub fn eval_reconstruction<T: Real>(
    net: &RocNet<T>,
    grids: &[VoxelGrid],
    mode: DecodeMode,
    chunk: usize,
    surface_points: usize,
    seed: u64,
) -> Result<EvalReport> {
    if grids.is_empty() {
        return Err(Error::EmptyInput("nothing to evaluate".into()));
    }
    if let Some(g) = grids.iter().find(|g| g.side() != net.config.grid_side) {
        return Err(Error::ConfigMismatch(format!(
            "grid side {} but checkpoint expects {}",
            g.side(),
            net.config.grid_side
        )));
    }
    let trees = grids.iter().map(|g| Octree::build(g, net.config.leaf_side)).collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(grids.len());
    for (c, part) in trees.chunks(chunk.max(1)).enumerate() {
        let refs: Vec<&Octree> = part.iter().collect();
        let codes = net.encode(&refs)?;
        let decoded = net.decode(&codes, mode, Some(&refs))?;
        for (j, (d, t)) in decoded.iter().zip(part).enumerate() {
            let index = c * chunk.max(1) + j;
            let out = d.to_voxels()?;
            let src = &grids[index];
            let score_seed = seed.wrapping_add(index as u64);
            let chamfer = match (out.is_empty(), src.is_empty()) {
                (true, true) => Some(0.0),
                (false, false) => Some(chamfer(
                    &sample_surface(&out, surface_points, score_seed)?,
                    &sample_surface(src, surface_points, score_seed ^ 0x9E37)?,
                )?),
                _ => None,
            };
            let topology_accuracy = match mode {
                DecodeMode::Known => 1.0,
                DecodeMode::Predicted => topology_accuracy(d, t),
            };
            samples.push(SampleScore { index, iou: iou(&out, src)?, chamfer, topology_accuracy });
        }
    }
    Ok(EvalReport::from_samples(mode, samples))
}

/// Argmax accuracy of the classification head on labelled trees.
pub fn eval_classification<T: Real>(net: &RocNet<T>, trees: &[&Octree], labels: &[usize], chunk: usize) -> Result<f64> {
    if trees.len() != labels.len() || trees.is_empty() {
        return Err(Error::InvalidArgument(format!("{} labels for {} trees", labels.len(), trees.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= net.config.n_classes) {
        return Err(Error::InvalidArgument(format!("label {l} out of {} classes", net.config.n_classes)));
    }
    let mut right = 0;
    for (part, lab) in trees.chunks(chunk.max(1)).zip(labels.chunks(chunk.max(1))) {
        for (logits, &l) in net.classify(part)?.iter().zip(lab) {
            let all: Vec<usize> = (0..logits.len()).collect();
            if crate::model::argmax_among(logits, &all) == l {
                right += 1;
            }
        }
    }
    Ok(right as f64 / trees.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityRow {
    pub grid_side: usize,
    pub leaf_side: usize,
    pub encoder_params: usize,
    pub decoder_params: usize,
    pub total_params: usize,
    /// `(N / k)^3`, the predicted feature-memory scale.
    pub memory_scale: usize,
    pub measured: Option<ResourceReport>,
}

/// Exact affine fit of encoder parameter count against `log2(N / k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

impl AffineFit {
    /// Line through the first two points; residuals of the rest are exact when
    /// the counts are collinear.
    pub fn through(xs: &[i64], ys: &[i64]) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 || xs[1] == xs[0] {
            return Err(Error::InvalidArgument("affine fit needs two distinct x values".into()));
        }
        let (dx, dy) = (xs[1] - xs[0], ys[1] - ys[0]);
        let residuals = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| ((y - ys[0]) as i128 * dx as i128 - dy as i128 * (x - xs[0]) as i128) as f64 / dx as f64)
            .collect();
        let slope = dy as f64 / dx as f64;
        Ok(AffineFit { slope, intercept: ys[0] as f64 - slope * xs[0] as f64, residuals })
    }

    pub fn is_exact(&self) -> bool {
        self.residuals.iter().all(|&r| r == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub rows: Vec<ComplexityRow>,
    pub fit: AffineFit,
}

/// Parameter counts per configuration and their fit against depth. Configurations
/// with `N <= measure_up_to` also get one measured training iteration on a dense
/// random grid.
pub fn complexity_report(configs: &[(usize, usize)], measure_up_to: usize, seed: u64) -> Result<ComplexityReport> {
    let mut rows = Vec::with_capacity(configs.len());
    for &(n, k) in configs {
        if !(n.is_power_of_two() && k.is_power_of_two() && (4..=n).contains(&k)) {
            return Err(Error::InvalidArgument(format!("N={n}, k={k}: both must be powers of two with 4 <= k <= N")));
        }
        let cfg = ModelConfig::new(n, k);
        let measured = if n <= measure_up_to {
            let net = RocNet::<f32>::new(cfg.clone(), seed)?;
            let grid = random_dense_grid(n, seed)?;
            let tree = Octree::build(&grid, k)?;
            Some(measure_resources(&net, &[&tree], 5.0)?)
        } else {
            None
        };
        rows.push(ComplexityRow {
            grid_side: n,
            leaf_side: k,
            encoder_params: count_parameters(&cfg, Scope::Encoder),
            decoder_params: count_parameters(&cfg, Scope::Decoder),
            total_params: count_parameters(&cfg, Scope::All),
            memory_scale: (n / k).pow(3),
            measured,
        });
    }
    let xs: Vec<i64> = configs.iter().map(|&(n, k)| levels(n, k) as i64).collect();
    let ys: Vec<i64> = rows.iter().map(|r| r.encoder_params as i64).collect();
    let fit = AffineFit::through(&xs, &ys)?;
    Ok(ComplexityReport { rows, fit })
}

/// Independent fair coin per voxel: every leaf block is mixed with overwhelming probability.
pub fn random_dense_grid(side: usize, seed: u64) -> Result<VoxelGrid> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VoxelGrid::from_fn(side, |_, _, _| rng.gen_bool(0.5))
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} | {:>12} | {:>12} | {:>12} | {:>10} | {:>14} | {:>10}",
            "model", "encoder", "decoder", "total", "(N/k)^3", "feature bytes", "s/iter"
        )?;
        for r in &self.rows {
            let (bytes, secs) = match &r.measured {
                Some(m) => (m.feature_bytes.to_string(), format!("{:.3}", m.seconds_per_iteration)),
                None => ("-".into(), "-".into()),
            };
            writeln!(
                f,
                "{:<16} | {:>12} | {:>12} | {:>12} | {:>10} | {:>14} | {:>10}",
                format!("RocNet-{}-{}", r.grid_side, r.leaf_side),
                r.encoder_params,
                r.decoder_params,
                r.total_params,
                r.memory_scale,
                bytes,
                secs
            )?;
        }
        write!(
            f,
            "encoder = {:.1} + {:.1} * log2(N/k); max |residual| = {}",
            self.fit.intercept,
            self.fit.slope,
            self.fit.residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()))
        )
    }
}

/// Convex combination `sum_i w_i * latents[i]`, kept inside the per-coordinate range.
pub fn convex_combination(latents: &[Vec<f32>], weights: &[f64]) -> Result<Vec<f32>> {
    if latents.len() != weights.len() || latents.is_empty() {
        return Err(Error::InvalidArgument(format!("{} weights for {} latents", weights.len(), latents.len())));
    }
    let d = latents[0].len();
    if latents.iter().any(|l| l.len() != d) {
        return Err(Error::Dimension("latents differ in length".into()));
    }
    Ok((0..d)
        .map(|j| {
            let v: f64 = latents.iter().zip(weights).map(|(l, &w)| w * l[j] as f64).sum();
            let (lo, hi) = latents.iter().fold((f32::MAX, f32::MIN), |(lo, hi), l| (lo.min(l[j]), hi.max(l[j])));
            (v as f32).clamp(lo, hi)
        })
        .collect())
}

/// Index and Euclidean distance of the latent closest to `code`; ties keep the lowest index.
pub fn nearest_latent(latents: &[Vec<f32>], code: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, l) in latents.iter().enumerate() {
        let d = l.iter().zip(code).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// `count` symmetric-Dirichlet(1) weight vectors over `n` latents.
pub fn dirichlet_weights(n: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::InvalidArgument("sampling needs at least two latents".into()));
    }
    let dist = Dirichlet::new_with_size(1.0, n).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| dist.sample(&mut rng)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub weights: Vec<f64>,
    pub code: Vec<f32>,
    pub grid: VoxelGrid,
    pub nearest: usize,
    pub distance: f64,
}

/// Decodes convex combinations of latents with the given weights in predicted mode.
pub fn decode_combinations(
    net: &RocNet<f32>,
    latents: &[Vec<f32>],
    weights: Vec<Vec<f64>>,
) -> Result<Vec<GeneratedSample>> {
    let codes = weights.iter().map(|w| convex_combination(latents, w)).collect::<Result<Vec<_>>>()?;
    if codes.is_empty() {
        return Ok(Vec::new());
    }
    let trees = net.decode(&codes, DecodeMode::Predicted, None)?;
    weights
        .into_iter()
        .zip(codes)
        .zip(trees)
        .map(|((weights, code), tree)| {
            let (nearest, distance) = nearest_latent(latents, &code);
            Ok(GeneratedSample { weights, grid: tree.to_voxels()?, code, nearest, distance })
        })
        .collect()
}

/// Random points in the convex hull of the training latents, decoded with
/// topology predicted on the fly, each paired with its nearest training latent.
pub fn generate_samples(
    net: &RocNet<f32>,
    latents: &[Vec<f32>],
    count: usize,
    seed: u64,
) -> Result<Vec<GeneratedSample>> {
    let weights = dirichlet_weights(latents.len(), count, seed)?;
    decode_combinations(net, latents, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{synthetic, ShapeKind};

    #[test]
    fn topology_accuracy_of_identical_and_collapsed_trees() {
        let g = synthetic(ShapeKind::Sphere, 16, 0).unwrap();
        let t = Octree::build(&g, 4).unwrap();
        assert_eq!(topology_accuracy(&t, &t), 1.0);
        let empty = Octree::build(&VoxelGrid::empty(16).unwrap(), 4).unwrap();
        assert_eq!(topology_accuracy(&empty, &t), 0.0);
    }

    #[test]
    fn affine_fit_residuals() {
        let fit = AffineFit::through(&[1, 2, 3, 4], &[10, 17, 24, 31]).unwrap();
        assert!(fit.is_exact());
        assert_eq!(fit.slope, 7.0);
        assert_eq!(fit.intercept, 3.0);
        let bent = AffineFit::through(&[1, 2, 3], &[10, 17, 25]).unwrap();
        assert!(!bent.is_exact());
    }

    #[test]
    fn complexity_rows_render() {
        let configs: Vec<(usize, usize)> = [64, 128, 256].iter().map(|&n| (n, 32)).collect();
        let r = complexity_report(&configs, 0, 1).unwrap();
        assert!(r.fit.is_exact());
        let text = r.to_string();
        assert!(text.lines().any(|l| l.starts_with("RocNet-64-32 ") && l.contains(" | ")));
        assert_eq!(
            r.rows[1].encoder_params - r.rows[0].encoder_params,
            r.rows[2].encoder_params - r.rows[1].encoder_params
        );
    }

    #[test]
    fn convex_sampling_contract() {
        let latents = vec![vec![0.0f32, 1.0, -2.0], vec![3.5, -1.0, 0.25], vec![1.0, 0.5, 0.5]];
        assert_eq!(convex_combination(&latents, &[0.0, 1.0, 0.0]).unwrap(), latents[1]);
        let w = dirichlet_weights(3, 50, 9).unwrap();
        assert_eq!(w, dirichlet_weights(3, 50, 9).unwrap());
        for wi in &w {
            assert!((wi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let c = convex_combination(&latents, wi).unwrap();
            for j in 0..3 {
                let lo = latents.iter().map(|l| l[j]).fold(f32::MAX, f32::min);
                let hi = latents.iter().map(|l| l[j]).fold(f32::MIN, f32::max);
                assert!(c[j] >= lo && c[j] <= hi);
            }
        }
        assert!(dirichlet_weights(1, 3, 0).is_err());
        assert_eq!(nearest_latent(&latents, &[3.4, -1.0, 0.2]).0, 1);
    }
}
