use super::{KdTree, PointSet, VoxelGrid};
use crate::error::{Error, Result};

/// Intersection over union of two occupancy grids; 1 when both are empty.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.side() != b.side() {
        return Err(Error::Dimension(format!("iou of {}^3 and {}^3 grids", a.side(), b.side())));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in a.as_bytes().iter().zip(b.as_bytes()) {
        inter += (x & y).count_ones() as u64;
        union += (x | y).count_ones() as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn directed(from: &PointSet, to: &KdTree) -> f64 {
    let total: f64 = from.points.iter().map(|p| to.nearest_sq(p)).sum();
    total / from.len() as f64
}

/// Mean squared nearest-neighbour distance from `p` to `g` plus the same from
/// `g` to `p`.
pub fn chamfer(p: &PointSet, g: &PointSet) -> Result<f64> {
    if p.is_empty() || g.is_empty() {
        return Err(Error::EmptyInput("chamfer distance needs two non-empty point sets".into()));
    }
    let tp = KdTree::new(&p.points);
    let tg = KdTree::new(&g.points);
    Ok(directed(p, &tg) + directed(g, &tp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let mut a = VoxelGrid::empty(8).unwrap();
        a.fill_block([2, 2, 2], 2, true);
        let mut b = VoxelGrid::empty(8).unwrap();
        b.fill_block([3, 2, 2], 2, true);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let mut c = VoxelGrid::empty(8).unwrap();
        c.set(7, 7, 7, true);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        let e = VoxelGrid::empty(8).unwrap();
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(iou(&a, &VoxelGrid::empty(16).unwrap()).is_err());
    }

    #[test]
    fn chamfer_cases() {
        let p = PointSet::new(vec![[0.0, 0.0, 0.0]]);
        let g = PointSet::new(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&p, &g).unwrap(), 2.0);
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        assert!(chamfer(&p, &PointSet::new(vec![])).is_err());
    }
}
