use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rocnet::metrics_eval::{convex_combination, decode_combinations, generate_samples};
use rocnet::model::{BnMode, DecodeMode, Forward, ModelConfig, RocNet};
use rocnet::octree::{NodeType, Octree};
use rocnet::tensor::Tensor;
use rocnet::training::{label_loss, measure_resources, sequential_loss, total_loss};
use rocnet::voxel::{chamfer, iou, synthetic, PointSet, ShapeKind, VoxelGrid};

/// Grids of several textures: noise at a random density, solid blocks, or a synthetic shape.
fn textured_grid(side: usize, seed: u64) -> VoxelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match rng.gen_range(0..4) {
        0 => {
            let p: f64 = rng.gen();
            VoxelGrid::from_fn(side, |_, _, _| rng.gen_bool(p)).unwrap()
        }
        1 => {
            let mut g = VoxelGrid::empty(side).unwrap();
            for _ in 0..rng.gen_range(0..5) {
                let size = 1 << rng.gen_range(0..=side.trailing_zeros());
                let o = [0; 3].map(|_| rng.gen_range(0..=side - size));
                g.fill_block(o, size, rng.gen_bool(0.8));
            }
            g
        }
        2 => synthetic(ShapeKind::ALL[rng.gen_range(0..4)], side, rng.gen()).unwrap(),
        _ => {
            if rng.gen() {
                VoxelGrid::full(side).unwrap()
            } else {
                VoxelGrid::empty(side).unwrap()
            }
        }
    }
}

fn brute_iou(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
    let n = a.side();
    let (mut inter, mut union) = (0usize, 0usize);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let (p, q) = (a.get(x, y, z), b.get(x, y, z));
                inter += (p && q) as usize;
                union += (p || q) as usize;
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
        let total: f64 = from
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
        total / from.len() as f64
    };
    one_way(p, g) + one_way(g, p)
}

fn points(seed: u64, n: usize, coarse: bool) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [0; 3].map(|_| if coarse { rng.gen_range(0..4) as f64 * 0.25 } else { rng.gen_range(-1.0..1.0) }))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn octree_round_trips(side_exp in 3u32..=5, k_exp in 2u32..=5, seed in any::<u64>()) {
        let side = 1usize << side_exp;
        let k = 1usize << k_exp.min(side_exp);
        let g = textured_grid(side, seed);
        let t = Octree::build(&g, k).unwrap();
        prop_assert_eq!(t.to_voxels().unwrap(), g);
        prop_assert_eq!(Octree::from_bytes(&t.to_bytes()).unwrap(), t.clone());
        prop_assert_eq!(t.topology().len(), t.node_count());
        prop_assert_eq!(t.mixed_payloads().len(), t.count(NodeType::MixedLeaf));
        prop_assert_eq!(t.count(NodeType::Interior) * 8 + 1, t.node_count());
    }

    #[test]
    fn iou_matches_brute_force(side_exp in 2u32..=4, s1 in any::<u64>(), s2 in any::<u64>()) {
        let side = 1usize << side_exp;
        let (a, b) = (textured_grid(side, s1), textured_grid(side, s2));
        prop_assert_eq!(iou(&a, &b).unwrap(), brute_iou(&a, &b));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
    }

    #[test]
    fn chamfer_matches_brute_force(np in 1usize..=100, ng in 1usize..=100, seed in any::<u64>(), coarse in any::<bool>()) {
        let p = points(seed, np, coarse);
        let g = points(seed ^ 0xFFFF, ng, coarse);
        let (ps, gs) = (PointSet::new(p.clone()), PointSet::new(g.clone()));
        prop_assert_eq!(chamfer(&ps, &gs).unwrap(), brute_chamfer(&p, &g));
        prop_assert_eq!(chamfer(&ps, &ps).unwrap(), 0.0);
    }
}

#[test]
fn uniform_logits_give_count_times_ln4() {
    let mut g = VoxelGrid::empty(16).unwrap();
    g.set(1, 2, 3, true);
    let t = Octree::build(&g, 4).unwrap();
    assert_eq!(t.node_count(), 17);
    let net = RocNet::<f64>::new(ModelConfig::new(16, 4), 0).unwrap();
    let mut fwd = Forward::new(&net, BnMode::Eval, false);
    let logits = fwd.tape.constant(Tensor::zeros(&[17, 4])).unwrap();
    let loss = label_loss(&mut fwd, logits, &t.topology()).unwrap();
    let value = fwd.tape.value(loss).item();
    assert!((value - 17.0 * 4f64.ln()).abs() < 1e-12, "{value}");
}

#[test]
fn one_voxel_stats_match_hand_count() {
    let mut g = VoxelGrid::empty(16).unwrap();
    g.set(9, 0, 15, true);
    let s = Octree::build(&g, 4).unwrap().stats();
    assert_eq!((s.node_count, s.count(NodeType::MixedLeaf), s.count(NodeType::EmptyLeaf)), (17, 1, 14));
    assert_eq!(s.compression_ratio, 4096.0 / (2.0 * 17.0 + 64.0));
    assert_eq!(s.depth_histogram, vec![1, 8, 8]);
}

fn shape_trees(side: usize, k: usize, count: usize, seed: u64) -> Vec<Octree> {
    (0..count)
        .map(|i| Octree::build(&synthetic(ShapeKind::ALL[i % 4], side, seed + i as u64).unwrap(), k).unwrap())
        .collect()
}

#[test]
fn grouped_pass_matches_one_tree_at_a_time() {
    let net = RocNet::<f32>::new(ModelConfig::new(32, 8), 5).unwrap();
    let mut trees = shape_trees(32, 8, 5, 40);
    trees.push(Octree::build(&VoxelGrid::empty(32).unwrap(), 8).unwrap());
    let refs: Vec<&Octree> = trees.iter().collect();

    let mut fwd = Forward::new(&net, BnMode::Train, false);
    let codes = fwd.encode_batch(&refs).unwrap();
    let batched = fwd.tape.value(codes).clone();
    let record = std::mem::take(&mut fwd.bn_record);
    let d = net.config.latent_dim;
    for (i, t) in refs.iter().enumerate() {
        let mut one = Forward::new(&net, BnMode::Replay(&record), false);
        let code = one.encode_tree(t).unwrap();
        let single = one.tape.value(code).data();
        let row = &batched.data()[i * d..(i + 1) * d];
        let worst = row.iter().zip(single).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst < 1e-4, "tree {i}: feature difference {worst}");
    }

    let mut fwd = Forward::new(&net, BnMode::Train, false);
    let (_, grouped) = total_loss(&mut fwd, &refs, 5.0).unwrap();
    let sequential = sequential_loss(&net, &refs, &fwd.bn_record, 5.0).unwrap();
    let rel = (grouped.total - sequential.total).abs() / sequential.total.abs();
    assert!(rel < 1e-3, "grouped {} vs sequential {}", grouped.total, sequential.total);
    assert!((grouped.label_loss - sequential.label_loss).abs() / sequential.label_loss < 1e-3);
}

#[test]
fn feature_memory_follows_occupied_volume() {
    let mut empty = Vec::new();
    let mut dense = Vec::new();
    for side in [16, 32] {
        let net = RocNet::<f32>::new(ModelConfig::new(side, 4), 0).unwrap();
        let e = Octree::build(&VoxelGrid::empty(side).unwrap(), 4).unwrap();
        empty.push(measure_resources(&net, &[&e], 5.0).unwrap().feature_bytes);
        let mut rng = ChaCha8Rng::seed_from_u64(side as u64);
        let g = VoxelGrid::from_fn(side, |_, _, _| rng.gen_bool(0.5)).unwrap();
        let t = Octree::build(&g, 4).unwrap();
        dense.push(measure_resources(&net, &[&t], 5.0).unwrap().feature_bytes);
    }
    assert_eq!(empty[0], empty[1]);
    let ratio = dense[1] as f64 / dense[0] as f64;
    assert!((4.0..=16.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn round_trip_shapes_and_latent_width() {
    let net = RocNet::<f32>::new(ModelConfig::new(16, 4), 2).unwrap();
    let trees = shape_trees(16, 4, 3, 0);
    let refs: Vec<&Octree> = trees.iter().collect();
    let codes = net.encode(&refs).unwrap();
    assert!(codes.iter().all(|c| c.len() == 80));
    for mode in [DecodeMode::Predicted, DecodeMode::Known] {
        for out in net.decode(&codes, mode, Some(&refs)).unwrap() {
            assert_eq!(out.to_voxels().unwrap().side(), 16);
        }
    }
}

#[test]
fn generation_contract_on_a_fresh_model() {
    let net = RocNet::<f32>::new(ModelConfig::new(16, 4), 4).unwrap();
    let trees = shape_trees(16, 4, 4, 9);
    let refs: Vec<&Octree> = trees.iter().collect();
    let latents = net.encode(&refs).unwrap();

    let one_hot: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
    let direct = net.decode(&latents, DecodeMode::Predicted, None).unwrap();
    for (i, s) in decode_combinations(&net, &latents, one_hot).unwrap().iter().enumerate() {
        assert_eq!(s.code, latents[i]);
        assert_eq!(s.grid, direct[i].to_voxels().unwrap());
        assert_eq!((s.nearest, s.distance), (i, 0.0));
    }

    let a = generate_samples(&net, &latents, 6, 11).unwrap();
    let b = generate_samples(&net, &latents, 6, 11).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.code, y.code);
        assert_eq!(x.grid, y.grid);
        for (c, v) in x.code.iter().enumerate() {
            let lo = latents.iter().map(|l| l[c]).fold(f32::INFINITY, f32::min);
            let hi = latents.iter().map(|l| l[c]).fold(f32::NEG_INFINITY, f32::max);
            assert!(lo <= *v && *v <= hi);
        }
    }
    assert!(convex_combination(&latents, &[0.5, 0.5]).is_err());
}
