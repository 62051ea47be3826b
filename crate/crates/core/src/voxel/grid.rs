use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"RVOX";
pub const GRID_VERSION: u8 = 1;

pub fn is_valid_side(side: usize) -> bool {
    side.is_power_of_two() && (4..=512).contains(&side)
}

/// Dense binary occupancy cube.
///
/// Voxel `(x, y, z)` lives at linear index `(x * side + y) * side + z`
/// (x slowest), stored LSB-first within each byte.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    side: usize,
    bits: Vec<u8>,
}

impl std::fmt::Debug for VoxelGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VoxelGrid({}^3, {} occupied)", self.side, self.count())
    }
}

impl VoxelGrid {
    pub fn empty(side: usize) -> Result<Self> {
        Self::filled(side, false)
    }

    pub fn full(side: usize) -> Result<Self> {
        Self::filled(side, true)
    }

    fn filled(side: usize, value: bool) -> Result<Self> {
        if !is_valid_side(side) {
            return Err(Error::InvalidArgument(format!("grid side {side} is not a power of two in [4, 512]")));
        }
        let nbytes = (side * side * side).div_ceil(8);
        Ok(VoxelGrid { side, bits: vec![if value { 0xFF } else { 0 }; nbytes] })
    }

    /// Builds a grid from an occupancy predicate evaluated at every voxel.
    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut g = Self::empty(side)?;
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    if f(x, y, z) {
                        g.set(x, y, z, true);
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn voxel_count(&self) -> usize {
        self.side * self.side * self.side
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.side + y) * self.side + z
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        (self.bits[i >> 3] >> (i & 7)) & 1 == 1
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.get_index(self.index(x, y, z))
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, value: bool) {
        if value {
            self.bits[i >> 3] |= 1 << (i & 7);
        } else {
            self.bits[i >> 3] &= !(1 << (i & 7));
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.set_index(i, value);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.voxel_count()
    }

    /// Packed occupancy bytes in file order.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn from_bytes(side: usize, bytes: &[u8]) -> Result<Self> {
        let mut g = Self::empty(side)?;
        if bytes.len() != g.bits.len() {
            return Err(Error::Format(format!(
                "side {side} needs {} payload bytes, got {}",
                g.bits.len(),
                bytes.len()
            )));
        }
        g.bits.copy_from_slice(bytes);
        Ok(g)
    }

    /// Copies the `size`-cube at `origin` into a new grid.
    pub fn block(&self, origin: [usize; 3], size: usize) -> Result<VoxelGrid> {
        let mut b = VoxelGrid::empty(size)?;
        for x in 0..size {
            for y in 0..size {
                for z in 0..size {
                    if self.get(origin[0] + x, origin[1] + y, origin[2] + z) {
                        b.set(x, y, z, true);
                    }
                }
            }
        }
        Ok(b)
    }

    /// Occupied voxel count inside the `size`-cube at `origin`.
    pub fn count_block(&self, origin: [usize; 3], size: usize) -> usize {
        let mut n = 0;
        for x in origin[0]..origin[0] + size {
            for y in origin[1]..origin[1] + size {
                let row = self.index(x, y, origin[2]);
                n += (row..row + size).filter(|&i| self.get_index(i)).count();
            }
        }
        n
    }

    pub fn fill_block(&mut self, origin: [usize; 3], size: usize, value: bool) {
        for x in origin[0]..origin[0] + size {
            for y in origin[1]..origin[1] + size {
                let row = self.index(x, y, origin[2]);
                for i in row..row + size {
                    self.set_index(i, value);
                }
            }
        }
    }

    pub fn paste_block(&mut self, origin: [usize; 3], block: &VoxelGrid) {
        let s = block.side();
        for x in 0..s {
            for y in 0..s {
                for z in 0..s {
                    self.set(origin[0] + x, origin[1] + y, origin[2] + z, block.get(x, y, z));
                }
            }
        }
    }

    /// RVOX1: magic, version byte, side (u32 LE), packed occupancy bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.bits.len());
        out.extend_from_slice(GRID_MAGIC);
        out.push(GRID_VERSION);
        out.extend_from_slice(&(self.side as u32).to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn read_from(reader: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; 9];
        reader.read_exact(&mut header).map_err(|_| Error::Format("truncated RVOX header".into()))?;
        if &header[..4] != GRID_MAGIC {
            return Err(Error::Format("bad magic, expected RVOX".into()));
        }
        if header[4] != GRID_VERSION {
            return Err(Error::Format(format!("unsupported RVOX version {}", header[4])));
        }
        let side = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
        if !is_valid_side(side) {
            return Err(Error::Format(format!("grid side {side} is not a valid power of two")));
        }
        let mut g = Self::empty(side)?;
        reader.read_exact(&mut g.bits).map_err(|_| Error::Format("truncated RVOX payload".into()))?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_grid_file() {
        let g = VoxelGrid::empty(16).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(bytes.len(), 9 + 512);
        assert!(bytes[9..].iter().all(|&b| b == 0));
        assert_eq!(&bytes[..5], b"RVOX\x01");
        let back = VoxelGrid::read_from(&mut bytes.as_slice()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn full_grid_payload() {
        let g = VoxelGrid::full(4).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(&bytes[9..], &[0xFF; 8]);
        assert_eq!(g.count(), 64);
    }

    #[test]
    fn bit_order_is_lsb_first_x_major() {
        let mut g = VoxelGrid::empty(4).unwrap();
        g.set(0, 0, 1, true);
        g.set(1, 0, 0, true);
        let b = g.to_bytes();
        assert_eq!(b[9], 0b10);
        assert_eq!(b[9 + 2], 1);
    }

    #[test]
    fn rejects_bad_files() {
        let g = VoxelGrid::full(8).unwrap();
        let mut bytes = g.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(VoxelGrid::read_from(&mut bytes.as_slice()), Err(Error::Format(_))));

        let mut bytes = g.to_bytes();
        bytes[5..9].copy_from_slice(&12u32.to_le_bytes());
        assert!(VoxelGrid::read_from(&mut bytes.as_slice()).is_err());

        let bytes = g.to_bytes();
        assert!(VoxelGrid::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        assert!(VoxelGrid::empty(6).is_err());
        assert!(VoxelGrid::empty(2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn file_round_trip(seed in any::<u64>(), density in 0.0f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = VoxelGrid::from_fn(32, |_, _, _| rng.gen_bool(density)).unwrap();
            let back = VoxelGrid::read_from(&mut g.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
