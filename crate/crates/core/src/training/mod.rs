//! Losses, optimizer and training loops.

mod adam;
mod checks;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{clip_grad_norm, Adam};
pub use checks::{end_to_end_gradient_check, op_gradient_checks, tiny_trees};

use crate::error::{Error, Result};
use crate::model::{check_trees, dynamic_batch_plan, BnMode, BnRecord, DecodeMode, Forward, RocNet};
use crate::octree::{FlatTree, NodeType, Octree};
use crate::tensor::{Real, Tensor, Var};
use crate::voxel::{iou, VoxelGrid};

/// Floating-point width used for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::InvalidArgument(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Weight of occupied voxels in the reconstruction loss.
    pub alpha: f64,
    pub seed: u64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub bn_momentum: f64,
    /// Evaluate mean training IoU every this many iterations; 0 means only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            iterations: 300,
            learning_rate: 1e-3,
            alpha: 5.0,
            seed: 0,
            precision: Precision::F32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            bn_momentum: 0.1,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument("learning rate must be positive and BN momentum in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn adam<T: Real>(&self) -> Adam<T> {
        Adam::new(self.learning_rate, self.beta1, self.beta2, self.adam_eps)
    }
}

/// Per-tree mean losses of one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub label_loss: f64,
    pub recon_loss: f64,
    /// `confusion[truth][predicted]` over node-type codes.
    pub confusion: [[usize; 4]; 4],
}

impl LossReport {
    /// Fraction of nodes the classifier labelled correctly under teacher forcing.
    pub fn classifier_accuracy(&self) -> f64 {
        let total: usize = self.confusion.iter().flatten().sum();
        let right: usize = (0..4).map(|i| self.confusion[i][i]).sum();
        if total == 0 {
            1.0
        } else {
            right as f64 / total as f64
        }
    }
}

/// One row of a training loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub report: LossReport,
    pub mean_train_iou: Option<f64>,
}

pub const CURVE_HEADER: &str = "iteration,total,label_loss,recon_loss,mean_train_iou";

impl CurvePoint {
    pub fn csv_row(&self) -> String {
        let iou = self.mean_train_iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.9},{:.9},{:.9},{iou}",
            self.iteration, self.report.total, self.report.label_loss, self.report.recon_loss
        )
    }
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in curve {
        s.push_str(&p.csv_row());
        s.push('\n');
    }
    s
}

/// Summed four-way cross-entropy of node logits `[B, 4]` against their true types.
pub fn label_loss<T: Real>(fwd: &mut Forward<'_, T>, logits: Var, truth: &[NodeType]) -> Result<Var> {
    let targets: Vec<usize> = truth.iter().map(|t| t.code() as usize).collect();
    fwd.tape.softmax_cross_entropy(logits, &targets)
}

/// Weighted binary cross-entropy summed over every voxel of every mixed-leaf block.
pub fn recon_loss<T: Real>(fwd: &mut Forward<'_, T>, outputs: Var, targets: &[&VoxelGrid], alpha: f64) -> Result<Var> {
    let bits: Vec<T> = targets
        .iter()
        .flat_map(|g| (0..g.voxel_count()).map(move |i| if g.get_index(i) { T::one() } else { T::zero() }))
        .collect();
    fwd.tape.weighted_bce(outputs, &bits, alpha)
}

/// Encodes a batch, decodes it along the true topology and returns the mean
/// per-tree loss `(label + recon) / B` together with its report.
pub fn total_loss<T: Real>(fwd: &mut Forward<'_, T>, trees: &[&Octree], alpha: f64) -> Result<(Var, LossReport)> {
    let codes = fwd.encode_batch(trees)?;
    let flat: Vec<FlatTree<'_>> = trees.iter().map(|t| t.flatten()).collect();
    let parts = fwd.decode_teacher_forced(codes, &flat, alpha)?;
    let scale = 1.0 / trees.len() as f64;
    let sum = fwd.tape.add(parts.label, parts.recon)?;
    let total = fwd.tape.scale(sum, scale)?;
    let label_loss = fwd.tape.value(parts.label).item().to_f64().unwrap() * scale;
    let recon_loss = fwd.tape.value(parts.recon).item().to_f64().unwrap() * scale;
    let report = LossReport { total: label_loss + recon_loss, label_loss, recon_loss, confusion: parts.confusion };
    Ok((total, report))
}

/// Reference loss computed one tree at a time with plain recursion, normalizing
/// with batch statistics recorded by a grouped pass.
pub fn sequential_loss<T: Real>(
    net: &RocNet<T>,
    trees: &[&Octree],
    record: &BnRecord<T>,
    alpha: f64,
) -> Result<LossReport> {
    let mut out = LossReport::default();
    for tree in trees {
        let mut fwd = Forward::new(net, BnMode::Replay(record), false);
        let code = fwd.encode_tree(tree)?;
        let flat = [tree.flatten()];
        let parts = fwd.decode_teacher_forced(code, &flat, alpha)?;
        out.label_loss += fwd.tape.value(parts.label).item().to_f64().unwrap();
        out.recon_loss += fwd.tape.value(parts.recon).item().to_f64().unwrap();
    }
    out.label_loss /= trees.len() as f64;
    out.recon_loss /= trees.len() as f64;
    out.total = out.label_loss + out.recon_loss;
    Ok(out)
}

/// Deterministic 80/20 split of `n` indices.
pub fn split_train_test(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n * 4).div_ceil(5);
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Yields batches of indices, reshuffling after each pass over the data.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        if size < n {
            order.shuffle(&mut rng);
        }
        BatchSampler { order, pos: 0, size: size.min(n), rng }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

fn update_running_stats<T: Real>(net: &mut RocNet<T>, record: &BnRecord<T>, momentum: f64) -> Result<()> {
    let m = T::lit(momentum);
    for (prefix, (mean, var)) in record {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let buf = net.params.buffer_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
    Ok(())
}

/// Sets every BN running statistic touched by the pass to the statistics of
/// `trees`, pooled over chunks of `batch_size`.
pub fn calibrate_bn<T: Real>(
    net: &mut RocNet<T>,
    trees: &[&Octree],
    batch_size: usize,
    with_decoder: bool,
) -> Result<()> {
    let mut pooled: BTreeMap<String, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    for chunk in trees.chunks(batch_size.max(1)) {
        let mut fwd = Forward::new(&*net, BnMode::Train, false);
        if with_decoder {
            total_loss(&mut fwd, chunk, 1.0)?;
        } else {
            fwd.encode_batch(chunk)?;
        }
        let w = chunk.len() as f64;
        for (name, (mean, var)) in fwd.bn_record {
            let e = pooled.entry(name).or_insert_with(|| (vec![0.0; mean.len()], vec![0.0; mean.len()], 0.0));
            for c in 0..mean.len() {
                let m = mean[c].to_f64().unwrap();
                e.0[c] += w * m;
                e.1[c] += w * (var[c].to_f64().unwrap() + m * m);
            }
            e.2 += w;
        }
    }
    for (name, (sum_m, sum_sq, w)) in pooled {
        let mean: Vec<f64> = sum_m.iter().map(|s| s / w).collect();
        let var: Vec<f64> = sum_sq.iter().zip(&mean).map(|(s, m)| (s / w - m * m).max(0.0)).collect();
        *net.params.buffer_mut(&format!("{name}.running_mean"))? = Tensor::from_f64(&[mean.len()], &mean)?;
        *net.params.buffer_mut(&format!("{name}.running_var"))? = Tensor::from_f64(&[var.len()], &var)?;
    }
    Ok(())
}

/// Mean IoU of predicted-mode reconstructions against their source grids.
pub fn mean_reconstruction_iou<T: Real>(
    net: &RocNet<T>,
    trees: &[&Octree],
    mode: DecodeMode,
    chunk: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for part in trees.chunks(chunk.max(1)) {
        let codes = net.encode(part)?;
        let decoded = net.decode(&codes, mode, Some(part))?;
        for (d, t) in decoded.iter().zip(part) {
            sum += iou(&d.to_voxels()?, &t.to_voxels()?)?;
        }
    }
    Ok(sum / trees.len() as f64)
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::Numeric(detail) => Error::Diverged { iteration, detail },
        other => other,
    }
}

/// Result of an autoencoder training run.
pub struct FitResult<T> {
    pub net: RocNet<T>,
    pub curve: Vec<CurvePoint>,
    pub seconds_per_iteration: f64,
}

/// Trains an autoencoder on `trees`. `hook` sees every finished iteration.
pub fn fit_with<T: Real>(
    mut net: RocNet<T>,
    trees: &[&Octree],
    cfg: &TrainConfig,
    mut hook: impl FnMut(&CurvePoint, &RocNet<T>) -> Result<()>,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    check_trees(trees, net.config.grid_side, net.config.leaf_side)?;
    let mut adam = cfg.adam::<T>();
    let mut sampler = BatchSampler::new(trees.len(), cfg.batch_size, cfg.seed);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for iteration in 1..=cfg.iterations {
        let batch: Vec<&Octree> = sampler.next_batch().into_iter().map(|i| trees[i]).collect();
        let (report, grads, record) = {
            let mut fwd = Forward::new(&net, BnMode::Train, true);
            let (loss, report) = total_loss(&mut fwd, &batch, cfg.alpha).map_err(|e| diverged(iteration, e))?;
            if !report.total.is_finite() {
                return Err(Error::Diverged { iteration, detail: format!("loss {}", report.total) });
            }
            fwd.tape.backward(loss)?;
            let grads = fwd.take_gradients();
            (report, grads, std::mem::take(&mut fwd.bn_record))
        };
        let mut grads = grads;
        if cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.clip_norm);
        }
        adam.step(&mut net.params, &grads)?;
        update_running_stats(&mut net, &record, cfg.bn_momentum)?;
        let last = iteration == cfg.iterations;
        let mean_train_iou = if last {
            calibrate_bn(&mut net, trees, cfg.batch_size, true)?;
            Some(mean_reconstruction_iou(&net, trees, DecodeMode::Predicted, cfg.batch_size)?)
        } else if cfg.eval_every > 0 && iteration % cfg.eval_every == 0 {
            Some(mean_reconstruction_iou(&net, trees, DecodeMode::Predicted, cfg.batch_size)?)
        } else {
            None
        };
        let point = CurvePoint { iteration, report, mean_train_iou };
        hook(&point, &net)?;
        curve.push(point);
    }
    let seconds_per_iteration = start.elapsed().as_secs_f64() / cfg.iterations.max(1) as f64;
    Ok(FitResult { net, curve, seconds_per_iteration })
}

/// Trains an autoencoder on voxel grids, building their octrees first.
pub fn fit<T: Real>(data: &[VoxelGrid], net: RocNet<T>, cfg: &TrainConfig) -> Result<FitResult<T>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let trees = data.iter().map(|g| Octree::build(g, net.config.leaf_side)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Octree> = trees.iter().collect();
    fit_with(net, &refs, cfg, |_, _| Ok(()))
}

/// Trains the encoder and classification head jointly on labelled trees.
/// Returns the mean loss per iteration.
pub fn fit_classifier<T: Real>(
    net: &mut RocNet<T>,
    trees: &[&Octree],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_trees(trees, net.config.grid_side, net.config.leaf_side)?;
    if labels.len() != trees.len() {
        return Err(Error::InvalidArgument(format!("{} labels for {} trees", labels.len(), trees.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= net.config.n_classes) {
        return Err(Error::InvalidArgument(format!("label {l} out of {} classes", net.config.n_classes)));
    }
    let mut adam = cfg.adam::<T>();
    let mut sampler = BatchSampler::new(trees.len(), cfg.batch_size, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iteration in 1..=cfg.iterations {
        let idx = sampler.next_batch();
        let batch: Vec<&Octree> = idx.iter().map(|&i| trees[i]).collect();
        let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, mut grads, record) = {
            let mut fwd = Forward::new(&*net, BnMode::Train, true).with_dropout(cfg.seed ^ iteration as u64);
            let run = |fwd: &mut Forward<'_, T>| -> Result<Var> {
                let codes = fwd.encode_batch(&batch)?;
                let logits = fwd.classification_head(codes)?;
                let ce = fwd.tape.softmax_cross_entropy(logits, &targets)?;
                fwd.tape.scale(ce, 1.0 / batch.len() as f64)
            };
            let loss = run(&mut fwd).map_err(|e| diverged(iteration, e))?;
            fwd.tape.backward(loss)?;
            let value = fwd.tape.value(loss).item().to_f64().unwrap();
            (value, fwd.take_gradients(), std::mem::take(&mut fwd.bn_record))
        };
        if cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.clip_norm);
        }
        adam.step(&mut net.params, &grads)?;
        update_running_stats(net, &record, cfg.bn_momentum)?;
        losses.push(loss);
    }
    calibrate_bn(net, trees, cfg.batch_size, false)?;
    Ok(losses)
}

/// Memory and time of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResourceReport {
    /// Bytes of intermediate feature values recorded by the forward pass.
    pub feature_bytes: usize,
    /// Highest total of recorded values plus live gradient buffers.
    pub peak_bytes: usize,
    pub seconds_per_iteration: f64,
}

/// Runs one forward and backward pass on `trees` without updating parameters.
pub fn measure_resources<T: Real>(net: &RocNet<T>, trees: &[&Octree], alpha: f64) -> Result<ResourceReport> {
    let start = Instant::now();
    let mut fwd = Forward::new(net, BnMode::Train, true);
    let (loss, _) = total_loss(&mut fwd, trees, alpha)?;
    let feature_bytes = fwd.tape.feature_bytes();
    fwd.tape.backward(loss)?;
    Ok(ResourceReport {
        feature_bytes,
        peak_bytes: fwd.tape.peak_bytes(),
        seconds_per_iteration: start.elapsed().as_secs_f64(),
    })
}

/// Grouped-call plan sizes for a batch, exposed for inspection.
pub fn plan_group_sizes(trees: &[&Octree]) -> Result<(usize, Vec<usize>)> {
    let first = trees.first().ok_or_else(|| Error::EmptyInput("no trees".into()))?;
    check_trees(trees, first.grid_side(), first.leaf_side())?;
    let flat: Vec<FlatTree<'_>> = trees.iter().map(|t| t.flatten()).collect();
    let plan = dynamic_batch_plan(&flat, first.max_depth());
    Ok((plan.mixed.len(), plan.group_sizes()))
}
