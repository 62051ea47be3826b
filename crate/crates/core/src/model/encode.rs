use std::collections::BTreeMap;

use super::forward::Forward;
use crate::error::{Error, Result};
use crate::octree::{FlatTree, NodeType, Octree, OctreeNode};
use crate::tensor::{Real, Var};

/// Item `idx` of a batched feature variable.
pub type Source = (Var, usize);

/// Grouped work for encoding a batch of trees: one leaf-encoder call for every
/// mixed leaf, then one node-encoder call per depth, deepest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    /// `(tree, node)` of every mixed leaf, in call order.
    pub mixed: Vec<(usize, usize)>,
    /// `(depth, [(tree, node)])` for interior nodes, deepest depth first.
    pub merges: Vec<(usize, Vec<(usize, usize)>)>,
    pub max_depth: usize,
}

impl BatchPlan {
    pub fn group_sizes(&self) -> Vec<usize> {
        self.merges.iter().map(|(_, g)| g.len()).collect()
    }
}

/// Checks every tree matches `(grid_side, leaf_side)`.
pub fn check_trees(trees: &[&Octree], grid_side: usize, leaf_side: usize) -> Result<()> {
    if trees.is_empty() {
        return Err(Error::EmptyInput("no trees".into()));
    }
    for t in trees {
        if t.grid_side() != grid_side || t.leaf_side() != leaf_side {
            return Err(Error::ConfigMismatch(format!(
                "tree is {}/{} but expected {grid_side}/{leaf_side}",
                t.grid_side(),
                t.leaf_side()
            )));
        }
    }
    Ok(())
}

pub fn dynamic_batch_plan(flat: &[FlatTree<'_>], max_depth: usize) -> BatchPlan {
    let mut mixed = Vec::new();
    let mut by_depth: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (t, tree) in flat.iter().enumerate() {
        for (i, n) in tree.nodes.iter().enumerate() {
            match n.kind {
                NodeType::MixedLeaf => mixed.push((t, i)),
                NodeType::Interior => by_depth.entry(n.depth).or_default().push((t, i)),
                _ => {}
            }
        }
    }
    BatchPlan { mixed, merges: by_depth.into_iter().rev().collect(), max_depth }
}

impl<T: Real> Forward<'_, T> {
    fn check_config(&self, trees: &[&Octree]) -> Result<()> {
        check_trees(trees, self.net.config.grid_side, self.net.config.leaf_side)
    }

    /// Feature of every node of every tree, computed with grouped calls.
    pub(crate) fn encode_features(&mut self, flat: &[FlatTree<'_>], plan: &BatchPlan) -> Result<Vec<Vec<Source>>> {
        let mut feats: Vec<Vec<Option<Source>>> = flat.iter().map(|t| vec![None; t.nodes.len()]).collect();
        if !plan.mixed.is_empty() {
            let blocks: Vec<_> =
                plan.mixed.iter().map(|&(t, i)| flat[t].payloads[flat[t].nodes[i].payload.unwrap()]).collect();
            let enc = self.leaf_encode(&blocks)?;
            for (j, &(t, i)) in plan.mixed.iter().enumerate() {
                feats[t][i] = Some((enc, j));
            }
        }
        for (t, tree) in flat.iter().enumerate() {
            for (i, n) in tree.nodes.iter().enumerate() {
                if matches!(n.kind, NodeType::EmptyLeaf | NodeType::FullLeaf) {
                    feats[t][i] = Some((self.constant_leaf_feature(n.kind)?, 0));
                }
            }
        }
        for (depth, group) in &plan.merges {
            let level = plan.max_depth - depth;
            let mut children = Vec::with_capacity(8);
            for slot in 0..8 {
                let items: Vec<Source> =
                    group.iter().map(|&(t, i)| feats[t][flat[t].nodes[i].children.unwrap()[slot]].unwrap()).collect();
                children.push(self.tape.gather(&items)?);
            }
            let merged = self.node_encode(&children, level)?;
            for (j, &(t, i)) in group.iter().enumerate() {
                feats[t][i] = Some((merged, j));
            }
        }
        Ok(feats.into_iter().map(|f| f.into_iter().map(Option::unwrap).collect()).collect())
    }

    /// Latent codes `[B, d]` for a batch of trees using grouped same-depth calls.
    pub fn encode_batch(&mut self, trees: &[&Octree]) -> Result<Var> {
        self.check_config(trees)?;
        let flat: Vec<FlatTree<'_>> = trees.iter().map(|t| t.flatten()).collect();
        let plan = dynamic_batch_plan(&flat, self.net.config.levels());
        let feats = self.encode_features(&flat, &plan)?;
        let roots: Vec<Source> = flat.iter().zip(&feats).map(|(t, f)| f[t.root()]).collect();
        let root = self.tape.gather(&roots)?;
        self.tree_encode(root)
    }

    /// Latent code `[1, d]` of one tree by plain post-order recursion, one node at a time.
    pub fn encode_tree(&mut self, tree: &Octree) -> Result<Var> {
        self.check_config(&[tree])?;
        let root = self.encode_node(tree.root(), tree.max_depth())?;
        self.tree_encode(root)
    }

    fn encode_node(&mut self, node: &OctreeNode, max_depth: usize) -> Result<Var> {
        match node.node_type() {
            NodeType::MixedLeaf => self.leaf_encode(&[node.payload().unwrap()]),
            NodeType::Interior => {
                let mut children = Vec::with_capacity(8);
                for c in node.children().unwrap() {
                    children.push(self.encode_node(c, max_depth)?);
                }
                self.node_encode(&children, max_depth - node.depth)
            }
            kind => self.constant_leaf_feature(kind),
        }
    }
}
