// Finite-difference checks of every tape operation and of the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::total_loss;
use crate::error::Result;
use crate::model::{BnMode, Forward, ModelConfig, RocNet};
use crate::octree::Octree;
use crate::tensor::gradcheck::{grad_check_with, GradCheckOptions, GradCheckReport};
use crate::tensor::{BnStats, Tape, Tensor, Var};
use crate::voxel::{synthetic, ShapeKind, VoxelGrid};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `sum(x * r)` for a fixed random `r`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, tape.shape(x), 1.0);
    let r = tape.constant(r)?;
    let y = tape.mul(x, r)?;
    tape.sum(y)
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random(&mut rng, shape, 1.0);
    let p = seed ^ 0xA5;
    let positive_probs = Tensor::new(vec![2, 3], vec![0.2, 0.7, 0.45, 0.9, 0.05, 0.6]).unwrap();
    vec![
        (
            "conv3d stride 1 pad 1",
            vec![r(&[2, 2, 4, 4, 4]), r(&[3, 2, 3, 3, 3]), r(&[3])],
            Box::new(move |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], 1, 1)?;
                project(t, y, p)
            }),
        ),
        (
            "conv3d stride 2 pad 1",
            vec![r(&[1, 2, 8, 8, 8]), r(&[3, 2, 4, 4, 4]), r(&[3])],
            Box::new(move |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], 2, 1)?;
                project(t, y, p)
            }),
        ),
        (
            "conv_transpose3d stride 2 pad 1",
            vec![r(&[2, 3, 2, 2, 2]), r(&[3, 2, 4, 4, 4]), r(&[2])],
            Box::new(move |t, v| {
                let y = t.conv_transpose3d(v[0], v[1], v[2], 2, 1)?;
                project(t, y, p)
            }),
        ),
        (
            "conv_transpose3d stride 1",
            vec![r(&[2, 3, 1, 1, 1]), r(&[3, 2, 4, 4, 4]), r(&[2])],
            Box::new(move |t, v| {
                let y = t.conv_transpose3d(v[0], v[1], v[2], 1, 0)?;
                project(t, y, p)
            }),
        ),
        (
            "batch_norm batch statistics",
            vec![r(&[3, 2, 2, 2, 2]), r(&[2]), r(&[2])],
            Box::new(move |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], BnStats::Batch, 1e-5)?;
                project(t, y, p)
            }),
        ),
        (
            "batch_norm fixed statistics",
            vec![r(&[3, 2, 2, 2, 2]), r(&[2]), r(&[2])],
            Box::new(move |t, v| {
                let stats = BnStats::Fixed { mean: &[0.1, -0.3], var: &[0.7, 1.9] };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], stats, 1e-5)?;
                project(t, y, p)
            }),
        ),
        (
            "elu",
            vec![r(&[4, 5])],
            Box::new(move |t, v| {
                let y = t.elu(v[0])?;
                project(t, y, p)
            }),
        ),
        (
            "sigmoid",
            vec![r(&[4, 5])],
            Box::new(move |t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y, p)
            }),
        ),
        (
            "linear",
            vec![r(&[3, 4]), r(&[2, 4]), r(&[2])],
            Box::new(move |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                project(t, y, p)
            }),
        ),
        ("softmax_cross_entropy", vec![r(&[3, 4])], Box::new(|t, v| t.softmax_cross_entropy(v[0], &[2, 0, 3]))),
        (
            "weighted_bce",
            vec![positive_probs],
            Box::new(|t, v| t.weighted_bce(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 5.0)),
        ),
        (
            "add_n, mul and scale",
            vec![r(&[2, 3]), r(&[2, 3]), r(&[2, 3])],
            Box::new(|t, v| {
                let s = t.add_n(&[v[0], v[1], v[2]])?;
                let m = t.mul(s, v[1])?;
                let m = t.scale(m, -0.7)?;
                t.sum(m)
            }),
        ),
        (
            "reshape and gather",
            vec![r(&[2, 3, 2]), r(&[1, 3, 2])],
            Box::new(move |t, v| {
                let g = t.gather(&[(v[0], 1), (v[1], 0), (v[0], 1), (v[0], 0)])?;
                let y = t.reshape(g, &[4, 6])?;
                project(t, y, p)
            }),
        ),
        (
            "dropout",
            vec![r(&[6])],
            Box::new(move |t, v| {
                let y = t.dropout(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0])?;
                project(t, y, p)
            }),
        ),
    ]
}

/// One report per differentiable tape operation, all inputs checked exhaustively.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let opts = GradCheckOptions { step: STEP, tolerance: TOLERANCE, max_coords: None, seed };
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| {
            let labels: Vec<String> = (0..inputs.len()).map(|i| format!("{name} / input {i}")).collect();
            Ok((name.to_string(), grad_check_with(f, &inputs, &labels, &opts)?))
        })
        .collect()
}

/// Small trees used by the end-to-end check: one with several mixed leaves and
/// an interior root, and one mostly-empty tree.
pub fn tiny_trees(seed: u64) -> Result<Vec<Octree>> {
    let a = synthetic(ShapeKind::Sphere, 8, seed)?;
    let mut b = VoxelGrid::empty(8)?;
    b.fill_block([0, 0, 0], 4, true);
    b.set(5, 6, 7, true);
    [a, b].iter().map(|g| Octree::build(g, 4)).collect()
}

/// Gradient of the mean training loss of an N=8, k=4 model with respect to
/// every parameter tensor, sampling at most `max_coords` coordinates per tensor.
pub fn end_to_end_gradient_check(seed: u64, max_coords: usize) -> Result<GradCheckReport> {
    let net = RocNet::<f64>::new(ModelConfig::new(8, 4), seed)?;
    let trees = tiny_trees(seed)?;
    let refs: Vec<&Octree> = trees.iter().collect();
    let names: Vec<String> = {
        let mut fwd = Forward::new(&net, BnMode::Train, true);
        total_loss(&mut fwd, &refs, 5.0)?;
        fwd.bound().keys().cloned().collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| {
            let mut t = net.params.get(n).unwrap().clone();
            // Move BN scales and constant features off their symmetric starting values.
            if n.ends_with(".gamma") || n.ends_with(".beta") || n.starts_with("leaf_const") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
            t
        })
        .collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut fwd = Forward::with_tape(&net, std::mem::take(tape), BnMode::Train, false);
        for (n, &v) in names.iter().zip(vars) {
            fwd.bind(n, v)?;
        }
        let result = total_loss(&mut fwd, &refs, 5.0);
        *tape = fwd.into_tape();
        Ok(result?.0)
    };
    let opts = GradCheckOptions { step: STEP, tolerance: TOLERANCE, max_coords: Some(max_coords), seed };
    grad_check_with(f, &inputs, &names, &opts)
}
