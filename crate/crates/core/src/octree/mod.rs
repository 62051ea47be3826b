//! Lossless octree codec over [`VoxelGrid`]s.
//!
//! A tree splits the grid recursively until a block is homogeneous or has side
//! `leaf_side`. Children are numbered by octant: bit 0 selects the upper x
//! half, bit 1 the upper y half, bit 2 the upper z half. The wire form is the
//! post-order list of 2-bit node codes followed by the mixed-leaf payloads in
//! the same order.

mod codec;
mod stats;

use crate::error::{Error, Result};
use crate::voxel::{is_valid_side, VoxelGrid};

pub use codec::{pack_codes, unpack_codes, TREE_MAGIC, TREE_VERSION};
pub use stats::OctreeStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum NodeType {
    EmptyLeaf = 0,
    FullLeaf = 1,
    MixedLeaf = 2,
    Interior = 3,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [NodeType::EmptyLeaf, NodeType::FullLeaf, NodeType::MixedLeaf, NodeType::Interior];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<NodeType> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn is_leaf(self) -> bool {
        self != NodeType::Interior
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeContent {
    Empty,
    Full,
    /// `leaf_side`^3 occupancy block, same bit order as a grid.
    Mixed(VoxelGrid),
    Interior(Box<[OctreeNode; 8]>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OctreeNode {
    pub depth: usize,
    /// Minimum voxel corner of the node's block.
    pub origin: [usize; 3],
    pub content: NodeContent,
}

impl OctreeNode {
    pub fn node_type(&self) -> NodeType {
        match self.content {
            NodeContent::Empty => NodeType::EmptyLeaf,
            NodeContent::Full => NodeType::FullLeaf,
            NodeContent::Mixed(_) => NodeType::MixedLeaf,
            NodeContent::Interior(_) => NodeType::Interior,
        }
    }

    pub fn children(&self) -> Option<&[OctreeNode; 8]> {
        match &self.content {
            NodeContent::Interior(c) => Some(c),
            _ => None,
        }
    }

    pub fn payload(&self) -> Option<&VoxelGrid> {
        match &self.content {
            NodeContent::Mixed(p) => Some(p),
            _ => None,
        }
    }
}

/// Origin of child `index` of a block at `origin` with side `size`.
pub fn child_origin(origin: [usize; 3], size: usize, index: usize) -> [usize; 3] {
    let h = size / 2;
    [origin[0] + (index & 1) * h, origin[1] + ((index >> 1) & 1) * h, origin[2] + ((index >> 2) & 1) * h]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Octree {
    root: OctreeNode,
    grid_side: usize,
    leaf_side: usize,
}

/// Number of octree levels between a `grid_side` root and `leaf_side` leaves.
pub fn levels(grid_side: usize, leaf_side: usize) -> usize {
    (grid_side / leaf_side).trailing_zeros() as usize
}

pub fn check_sides(grid_side: usize, leaf_side: usize) -> Result<()> {
    if !is_valid_side(grid_side) || !is_valid_side(leaf_side) || leaf_side > grid_side {
        return Err(Error::InvalidArgument(format!(
            "leaf side {leaf_side} must be a power of two in [4, {grid_side}] for grid side {grid_side}"
        )));
    }
    Ok(())
}

impl Octree {
    /// Assembles a tree from a root, checking the depth rules.
    pub fn from_root(root: OctreeNode, grid_side: usize, leaf_side: usize) -> Result<Self> {
        check_sides(grid_side, leaf_side)?;
        let t = Octree { root, grid_side, leaf_side };
        t.validate()?;
        Ok(t)
    }

    pub fn build(grid: &VoxelGrid, leaf_side: usize) -> Result<Self> {
        check_sides(grid.side(), leaf_side)?;
        let root = build_node(grid, leaf_side, [0; 3], grid.side(), 0)?;
        Ok(Octree { root, grid_side: grid.side(), leaf_side })
    }

    pub fn root(&self) -> &OctreeNode {
        &self.root
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn leaf_side(&self) -> usize {
        self.leaf_side
    }

    pub fn max_depth(&self) -> usize {
        levels(self.grid_side, self.leaf_side)
    }

    pub fn block_side(&self, depth: usize) -> usize {
        self.grid_side >> depth
    }

    fn validate(&self) -> Result<()> {
        let max = self.max_depth();
        let mut err = None;
        self.visit_pre(|n| {
            if err.is_some() {
                return;
            }
            let side = self.block_side(n.depth);
            err = match &n.content {
                NodeContent::Interior(_) if n.depth >= max => {
                    Some(format!("interior node at depth {} (max {max})", n.depth))
                }
                NodeContent::Interior(c) => (0..8)
                    .find(|&i| c[i].depth != n.depth + 1 || c[i].origin != child_origin(n.origin, side, i))
                    .map(|i| format!("child {i} of node at {:?} has wrong depth or origin", n.origin)),
                NodeContent::Mixed(_) if n.depth != max => Some(format!("mixed leaf at depth {} (max {max})", n.depth)),
                NodeContent::Mixed(p) if p.side() != self.leaf_side => {
                    Some(format!("mixed payload side {} != leaf side {}", p.side(), self.leaf_side))
                }
                _ => None,
            };
        });
        match err {
            Some(e) => Err(Error::MalformedTree(e)),
            None => Ok(()),
        }
    }

    pub fn visit_pre(&self, mut f: impl FnMut(&OctreeNode)) {
        fn go(n: &OctreeNode, f: &mut impl FnMut(&OctreeNode)) {
            f(n);
            if let Some(c) = n.children() {
                c.iter().for_each(|ch| go(ch, f));
            }
        }
        go(&self.root, &mut f)
    }

    /// Children before parents, children in octant order.
    pub fn visit_post(&self, mut f: impl FnMut(&OctreeNode)) {
        fn go(n: &OctreeNode, f: &mut impl FnMut(&OctreeNode)) {
            if let Some(c) = n.children() {
                c.iter().for_each(|ch| go(ch, f));
            }
            f(n);
        }
        go(&self.root, &mut f)
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.visit_pre(|_| n += 1);
        n
    }

    pub fn count(&self, t: NodeType) -> usize {
        let mut n = 0;
        self.visit_pre(|x| n += (x.node_type() == t) as usize);
        n
    }

    /// Post-order topology codes.
    pub fn topology(&self) -> Vec<NodeType> {
        let mut v = Vec::new();
        self.visit_post(|n| v.push(n.node_type()));
        v
    }

    /// Mixed-leaf payloads in post-order.
    pub fn mixed_payloads(&self) -> Vec<&VoxelGrid> {
        let mut v = Vec::new();
        fn go<'a>(n: &'a OctreeNode, v: &mut Vec<&'a VoxelGrid>) {
            match &n.content {
                NodeContent::Interior(c) => c.iter().for_each(|ch| go(ch, v)),
                NodeContent::Mixed(p) => v.push(p),
                _ => {}
            }
        }
        go(&self.root, &mut v);
        v
    }

    pub fn to_voxels(&self) -> Result<VoxelGrid> {
        self.validate()?;
        let mut g = VoxelGrid::empty(self.grid_side)?;
        self.visit_pre(|n| match &n.content {
            NodeContent::Full => g.fill_block(n.origin, self.block_side(n.depth), true),
            NodeContent::Mixed(p) => g.paste_block(n.origin, p),
            _ => {}
        });
        Ok(g)
    }

    /// Rebuilds a tree from post-order codes and payloads.
    pub fn from_topology(
        grid_side: usize,
        leaf_side: usize,
        codes: &[NodeType],
        payloads: Vec<VoxelGrid>,
    ) -> Result<Self> {
        check_sides(grid_side, leaf_side)?;
        let mut payloads = payloads.into_iter();
        // Subtrees are assembled with placeholder positions and fixed up afterwards.
        let mut stack: Vec<NodeContent> = Vec::new();
        for (i, &code) in codes.iter().enumerate() {
            let content = match code {
                NodeType::EmptyLeaf => NodeContent::Empty,
                NodeType::FullLeaf => NodeContent::Full,
                NodeType::MixedLeaf => NodeContent::Mixed(
                    payloads
                        .next()
                        .ok_or_else(|| Error::MalformedTree(format!("code {i}: more mixed leaves than payloads")))?,
                ),
                NodeType::Interior => {
                    if stack.len() < 8 {
                        return Err(Error::MalformedTree(format!(
                            "code {i}: interior node needs 8 children, only {} pending",
                            stack.len()
                        )));
                    }
                    let kids: Vec<OctreeNode> = stack
                        .split_off(stack.len() - 8)
                        .into_iter()
                        .map(|content| OctreeNode { depth: 0, origin: [0; 3], content })
                        .collect();
                    NodeContent::Interior(Box::new(kids.try_into().unwrap()))
                }
            };
            stack.push(content);
        }
        if payloads.next().is_some() {
            return Err(Error::MalformedTree("unused mixed payloads".into()));
        }
        if stack.len() != 1 {
            return Err(Error::MalformedTree(format!("code stream leaves {} roots, expected 1", stack.len())));
        }
        let mut root = OctreeNode { depth: 0, origin: [0; 3], content: stack.pop().unwrap() };
        fn place(n: &mut OctreeNode, depth: usize, origin: [usize; 3], side: usize) {
            n.depth = depth;
            n.origin = origin;
            if let NodeContent::Interior(c) = &mut n.content {
                for (i, ch) in c.iter_mut().enumerate() {
                    place(ch, depth + 1, child_origin(origin, side, i), side / 2);
                }
            }
        }
        place(&mut root, 0, [0; 3], grid_side);
        Octree::from_root(root, grid_side, leaf_side)
    }

    /// Post-order flattening used by the network.
    pub fn flatten(&self) -> FlatTree<'_> {
        let mut nodes = Vec::new();
        let mut payloads = Vec::new();
        fn go<'a>(n: &'a OctreeNode, nodes: &mut Vec<FlatNode>, payloads: &mut Vec<&'a VoxelGrid>) -> usize {
            let children = n.children().map(|c| {
                let mut idx = [0; 8];
                for (i, ch) in c.iter().enumerate() {
                    idx[i] = go(ch, nodes, payloads);
                }
                idx
            });
            let payload = n.payload().map(|p| {
                payloads.push(p);
                payloads.len() - 1
            });
            nodes.push(FlatNode { kind: n.node_type(), depth: n.depth, origin: n.origin, children, payload });
            nodes.len() - 1
        }
        go(&self.root, &mut nodes, &mut payloads);
        FlatTree { nodes, payloads }
    }
}

#[derive(Clone, Debug)]
pub struct FlatNode {
    pub kind: NodeType,
    pub depth: usize,
    pub origin: [usize; 3],
    pub children: Option<[usize; 8]>,
    pub payload: Option<usize>,
}

/// Post-order node list; the root is the last entry.
#[derive(Clone, Debug)]
pub struct FlatTree<'a> {
    pub nodes: Vec<FlatNode>,
    pub payloads: Vec<&'a VoxelGrid>,
}

impl FlatTree<'_> {
    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }
}

fn build_node(grid: &VoxelGrid, k: usize, origin: [usize; 3], size: usize, depth: usize) -> Result<OctreeNode> {
    let content = if size == k {
        let n = grid.count_block(origin, size);
        if n == 0 {
            NodeContent::Empty
        } else if n == size * size * size {
            NodeContent::Full
        } else {
            NodeContent::Mixed(grid.block(origin, size)?)
        }
    } else {
        let kids: Vec<OctreeNode> = (0..8)
            .map(|i| build_node(grid, k, child_origin(origin, size, i), size / 2, depth + 1))
            .collect::<Result<_>>()?;
        if kids.iter().all(|c| c.content == NodeContent::Empty) {
            NodeContent::Empty
        } else if kids.iter().all(|c| c.content == NodeContent::Full) {
            NodeContent::Full
        } else {
            NodeContent::Interior(Box::new(kids.try_into().unwrap()))
        }
    };
    Ok(OctreeNode { depth, origin, content })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_voxel() -> VoxelGrid {
        let mut g = VoxelGrid::empty(16).unwrap();
        g.set(0, 0, 0, true);
        g
    }

    #[test]
    fn homogeneous_grids_collapse_to_root() {
        let t = Octree::build(&VoxelGrid::empty(32).unwrap(), 8).unwrap();
        assert_eq!(t.root().node_type(), NodeType::EmptyLeaf);
        assert_eq!(t.node_count(), 1);
        let t = Octree::build(&VoxelGrid::full(32).unwrap(), 8).unwrap();
        assert_eq!(t.root().node_type(), NodeType::FullLeaf);
    }

    #[test]
    fn one_voxel_tree_shape() {
        let t = Octree::build(&one_voxel(), 4).unwrap();
        assert_eq!(t.node_count(), 17);
        let root = t.root().children().unwrap();
        assert_eq!(root[0].node_type(), NodeType::Interior);
        assert!(root[1..].iter().all(|c| c.node_type() == NodeType::EmptyLeaf));
        let inner = root[0].children().unwrap();
        assert_eq!(inner[0].node_type(), NodeType::MixedLeaf);
        assert!(inner[1..].iter().all(|c| c.node_type() == NodeType::EmptyLeaf));
        assert_eq!(t.to_voxels().unwrap(), one_voxel());
    }

    #[test]
    fn single_full_root_to_voxels() {
        let root = OctreeNode { depth: 0, origin: [0; 3], content: NodeContent::Full };
        let t = Octree::from_root(root, 16, 4).unwrap();
        assert!(t.to_voxels().unwrap().is_full());
    }

    #[test]
    fn rejects_invalid_leaf_sides() {
        let g = VoxelGrid::empty(16).unwrap();
        assert!(Octree::build(&g, 32).is_err());
        assert!(Octree::build(&g, 6).is_err());
        assert!(Octree::build(&g, 2).is_err());
    }

    #[test]
    fn leaf_side_equal_to_grid() {
        let t = Octree::build(&one_voxel(), 16).unwrap();
        assert_eq!(t.root().node_type(), NodeType::MixedLeaf);
        assert_eq!(t.max_depth(), 0);
        assert_eq!(t.to_voxels().unwrap(), one_voxel());
    }

    #[test]
    fn malformed_trees_are_rejected() {
        let leaf = |d, o| OctreeNode { depth: d, origin: o, content: NodeContent::Empty };
        let kids: [OctreeNode; 8] = std::array::from_fn(|i| leaf(1, child_origin([0; 3], 4, i)));
        let root = OctreeNode { depth: 0, origin: [0; 3], content: NodeContent::Interior(Box::new(kids)) };
        // interior at max depth (N == k)
        assert!(matches!(Octree::from_root(root, 4, 4), Err(Error::MalformedTree(_))));

        let mixed = OctreeNode { depth: 0, origin: [0; 3], content: NodeContent::Mixed(VoxelGrid::empty(4).unwrap()) };
        assert!(Octree::from_root(mixed, 8, 4).is_err());
    }

    #[test]
    fn flatten_is_post_order() {
        let t = Octree::build(&one_voxel(), 4).unwrap();
        let f = t.flatten();
        assert_eq!(f.nodes.len(), 17);
        assert_eq!(f.nodes[f.root()].kind, NodeType::Interior);
        assert_eq!(f.nodes[0].kind, NodeType::MixedLeaf);
        assert_eq!(f.payloads.len(), 1);
        let kinds: Vec<NodeType> = f.nodes.iter().map(|n| n.kind).collect();
        assert_eq!(kinds, t.topology());
    }
}
