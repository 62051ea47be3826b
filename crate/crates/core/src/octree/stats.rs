use std::collections::BTreeMap;
use std::fmt;

use super::{NodeType, Octree};

#[derive(Clone, Debug, PartialEq)]
pub struct OctreeStats {
    pub grid_side: usize,
    pub leaf_side: usize,
    pub node_count: usize,
    pub counts: BTreeMap<NodeType, usize>,
    /// Node count per depth, root first.
    pub depth_histogram: Vec<usize>,
    /// Mixed leaves over all leaves.
    pub mixed_fraction: f64,
    /// Dense bits over `2 * nodes + k^3 * mixed` bits.
    pub compression_ratio: f64,
}

impl OctreeStats {
    pub fn count(&self, t: NodeType) -> usize {
        self.counts.get(&t).copied().unwrap_or(0)
    }
}

impl Octree {
    pub fn stats(&self) -> OctreeStats {
        let mut counts: BTreeMap<NodeType, usize> = NodeType::ALL.iter().map(|&t| (t, 0)).collect();
        let mut depth_histogram = vec![0; self.max_depth() + 1];
        self.visit_pre(|n| {
            *counts.get_mut(&n.node_type()).unwrap() += 1;
            depth_histogram[n.depth] += 1;
        });
        let node_count: usize = counts.values().sum();
        let mixed = counts[&NodeType::MixedLeaf];
        let leaves = node_count - counts[&NodeType::Interior];
        let k3 = self.leaf_side.pow(3);
        let dense = self.grid_side.pow(3) as f64;
        OctreeStats {
            grid_side: self.grid_side,
            leaf_side: self.leaf_side,
            node_count,
            counts,
            depth_histogram,
            mixed_fraction: mixed as f64 / leaves as f64,
            compression_ratio: dense / (2 * node_count + k3 * mixed) as f64,
        }
    }
}

impl fmt::Display for OctreeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "grid: {}^3, leaf: {}^3", self.grid_side, self.leaf_side)?;
        writeln!(f, "nodes: {}, mixed: {}", self.node_count, self.count(NodeType::MixedLeaf))?;
        writeln!(
            f,
            "empty: {}, full: {}, interior: {}",
            self.count(NodeType::EmptyLeaf),
            self.count(NodeType::FullLeaf),
            self.count(NodeType::Interior)
        )?;
        writeln!(f, "depth histogram: {:?}", self.depth_histogram)?;
        writeln!(f, "mixed-leaf fraction: {:.6}", self.mixed_fraction)?;
        write!(f, "compression ratio: {:.6}", self.compression_ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{generate_synthetic, Shape, VoxelGrid};

    #[test]
    fn empty_tree_stats() {
        let s = Octree::build(&VoxelGrid::empty(32).unwrap(), 8).unwrap().stats();
        assert_eq!(s.node_count, 1);
        assert_eq!(s.count(NodeType::EmptyLeaf), 1);
        assert_eq!(s.compression_ratio, 32f64.powi(3) / 2.0);
    }

    #[test]
    fn one_voxel_stats() {
        let mut g = VoxelGrid::empty(16).unwrap();
        g.set(0, 0, 0, true);
        let s = Octree::build(&g, 4).unwrap().stats();
        assert_eq!(s.count(NodeType::EmptyLeaf), 14);
        assert_eq!(s.count(NodeType::FullLeaf), 0);
        assert_eq!(s.count(NodeType::MixedLeaf), 1);
        assert_eq!(s.count(NodeType::Interior), 2);
        assert_eq!(s.depth_histogram, vec![1, 8, 8]);
        // 4096 / (2*17 + 64)
        assert_eq!(s.compression_ratio, 4096.0 / 98.0);
    }

    #[test]
    fn sphere_mixed_leaves_are_a_minority() {
        let g = generate_synthetic(&Shape::Sphere { center: [0.5; 3], radius: 0.4 }, 64).unwrap();
        let s = Octree::build(&g, 8).unwrap().stats();
        assert!(s.mixed_fraction < 0.5, "{}", s.mixed_fraction);
        assert!(s.count(NodeType::MixedLeaf) <= 8usize.pow(3));
    }
}
