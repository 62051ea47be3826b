// ROCT1 layout (little-endian):
//   "ROCT" | version u8 = 1 | grid_side u32 | leaf_side u32 | node_count u32 | mixed_count u32
//   | ceil(node_count / 4) bytes of 2-bit codes, LSB-first, post-order
//   | mixed_count payloads of ceil(leaf_side^3 / 8) bytes each

use std::fs;
use std::path::Path;

use super::{NodeType, Octree};
use crate::error::{Error, Result};
use crate::voxel::VoxelGrid;

pub const TREE_MAGIC: &[u8; 4] = b"ROCT";
pub const TREE_VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 16;

pub fn pack_codes(codes: &[NodeType]) -> Vec<u8> {
    let mut out = vec![0u8; codes.len().div_ceil(4)];
    for (i, c) in codes.iter().enumerate() {
        out[i / 4] |= c.code() << (2 * (i % 4));
    }
    out
}

pub fn unpack_codes(bytes: &[u8], count: usize) -> Result<Vec<NodeType>> {
    if bytes.len() < count.div_ceil(4) {
        return Err(Error::Format("truncated topology stream".into()));
    }
    Ok((0..count).map(|i| NodeType::from_code((bytes[i / 4] >> (2 * (i % 4))) & 3).unwrap()).collect())
}

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
}

impl Octree {
    pub fn to_bytes(&self) -> Vec<u8> {
        let codes = self.topology();
        let payloads = self.mixed_payloads();
        let mut out = Vec::new();
        out.extend_from_slice(TREE_MAGIC);
        out.push(TREE_VERSION);
        for v in [self.grid_side, self.leaf_side, codes.len(), payloads.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&pack_codes(&codes));
        for p in payloads {
            out.extend_from_slice(p.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Format("truncated ROCT header".into()));
        }
        if &bytes[..4] != TREE_MAGIC {
            return Err(Error::Format("bad magic, expected ROCT".into()));
        }
        if bytes[4] != TREE_VERSION {
            return Err(Error::Format(format!("unsupported ROCT version {}", bytes[4])));
        }
        let (grid_side, leaf_side) = (u32_at(bytes, 5), u32_at(bytes, 9));
        let (node_count, mixed_count) = (u32_at(bytes, 13), u32_at(bytes, 17));
        super::check_sides(grid_side, leaf_side).map_err(|e| Error::Format(e.to_string()))?;
        let code_bytes = node_count.div_ceil(4);
        let block = (leaf_side * leaf_side * leaf_side).div_ceil(8);
        let expected = HEADER + code_bytes + mixed_count * block;
        if bytes.len() != expected {
            return Err(Error::Format(format!("ROCT file is {} bytes, header implies {expected}", bytes.len())));
        }
        let codes = unpack_codes(&bytes[HEADER..], node_count)?;
        let declared = codes.iter().filter(|&&c| c == NodeType::MixedLeaf).count();
        if declared != mixed_count {
            return Err(Error::MalformedTree(format!(
                "{declared} mixed codes but header declares {mixed_count} payloads"
            )));
        }
        let payloads = bytes[HEADER + code_bytes..]
            .chunks_exact(block)
            .map(|c| VoxelGrid::from_bytes(leaf_side, c))
            .collect::<Result<Vec<_>>>()?;
        Octree::from_topology(grid_side, leaf_side, &codes, payloads)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use NodeType::*;

    #[test]
    fn single_empty_root_stream() {
        let t = Octree::build(&VoxelGrid::empty(16).unwrap(), 4).unwrap();
        assert_eq!(t.topology(), vec![EmptyLeaf]);
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), HEADER + 1);
        assert_eq!(bytes[HEADER], 0);
        assert_eq!(Octree::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn one_subdivided_child_post_order() {
        // Root with child 0 subdivided: its 8 children come first, then child 0
        // itself, then root children 1..8, then the root.
        let mut g = VoxelGrid::empty(16).unwrap();
        g.set(0, 0, 0, true);
        let t = Octree::build(&g, 4).unwrap();
        let mut want = vec![MixedLeaf];
        want.extend([EmptyLeaf; 7]);
        want.push(Interior);
        want.extend([EmptyLeaf; 7]);
        want.push(Interior);
        assert_eq!(t.topology(), want);
        assert_eq!(t.topology().len(), 17);
        assert_eq!(Octree::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn code_packing() {
        let codes = [Interior, EmptyLeaf, MixedLeaf, FullLeaf, Interior];
        let packed = pack_codes(&codes);
        assert_eq!(packed, vec![0b01_10_00_11, 0b11]);
        assert_eq!(unpack_codes(&packed, 5).unwrap(), codes);
    }

    #[test]
    fn inconsistent_streams_fail() {
        // 8 leaves without a parent: overflow
        let codes = [EmptyLeaf; 8];
        assert!(matches!(Octree::from_topology(8, 4, &codes, vec![]), Err(Error::MalformedTree(_))));
        // interior with too few children: underflow
        let codes = [EmptyLeaf, FullLeaf, Interior];
        assert!(Octree::from_topology(8, 4, &codes, vec![]).is_err());
        // mixed leaf without payload
        assert!(Octree::from_topology(4, 4, &[MixedLeaf], vec![]).is_err());

        let mut g = VoxelGrid::empty(16).unwrap();
        g.set(3, 3, 3, true);
        let bytes = Octree::build(&g, 4).unwrap().to_bytes();
        assert!(Octree::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Octree::from_bytes(&bad).is_err());
    }
}
