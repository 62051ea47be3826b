use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::VoxelGrid;
use crate::error::{Error, Result};

/// Points sampled for Chamfer evaluation when no count is given.
pub const DEFAULT_SURFACE_POINTS: usize = 2048;

/// Points in normalized grid coordinates, `[0,1]^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Vec<[f64; 3]>,
}

impl PointSet {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// An exposed face of an occupied voxel: `axis` is the face normal axis and
/// `positive` tells which side of the voxel it is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    pub voxel: [usize; 3],
    pub axis: usize,
    pub positive: bool,
}

/// Faces of occupied voxels whose 6-neighbour is empty or outside the grid.
pub fn exposed_faces(grid: &VoxelGrid) -> Vec<Face> {
    let n = grid.side();
    let mut faces = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if !grid.get(x, y, z) {
                    continue;
                }
                let v = [x, y, z];
                for axis in 0..3 {
                    for positive in [false, true] {
                        let open = if positive {
                            v[axis] + 1 == n || {
                                let mut w = v;
                                w[axis] += 1;
                                !grid.get(w[0], w[1], w[2])
                            }
                        } else {
                            v[axis] == 0 || {
                                let mut w = v;
                                w[axis] -= 1;
                                !grid.get(w[0], w[1], w[2])
                            }
                        };
                        if open {
                            faces.push(Face { voxel: v, axis, positive });
                        }
                    }
                }
            }
        }
    }
    faces
}

fn point_on(face: &Face, side: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let s = side as f64;
    let mut p = [0.0; 3];
    for (i, c) in p.iter_mut().enumerate() {
        let base = face.voxel[i] as f64;
        *c = if i == face.axis {
            (base + if face.positive { 1.0 } else { 0.0 }) / s
        } else {
            (base + rng.gen::<f64>()) / s
        };
    }
    p
}

/// `samples_per_face` uniform points on every exposed face.
pub fn surface_points(grid: &VoxelGrid, samples_per_face: usize, seed: u64) -> Result<PointSet> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("surface of an empty grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let faces = exposed_faces(grid);
    let mut points = Vec::with_capacity(faces.len() * samples_per_face);
    for f in &faces {
        for _ in 0..samples_per_face {
            points.push(point_on(f, grid.side(), &mut rng));
        }
    }
    Ok(PointSet::new(points))
}

/// `count` points spread uniformly over the exposed surface area.
pub fn sample_surface(grid: &VoxelGrid, count: usize, seed: u64) -> Result<PointSet> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("surface of an empty grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let faces = exposed_faces(grid);
    let points = (0..count)
        .map(|_| {
            let f = &faces[rng.gen_range(0..faces.len())];
            point_on(f, grid.side(), &mut rng)
        })
        .collect();
    Ok(PointSet::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_points_stay_on_its_cube() {
        let mut g = VoxelGrid::empty(8).unwrap();
        g.set(3, 5, 1, true);
        let ps = surface_points(&g, 10, 1).unwrap();
        assert_eq!(ps.len(), 60);
        for p in &ps.points {
            let lo = [3.0 / 8.0, 5.0 / 8.0, 1.0 / 8.0];
            assert!((0..3).all(|i| p[i] >= lo[i] - 1e-12 && p[i] <= lo[i] + 0.125 + 1e-12));
        }
    }

    #[test]
    fn full_grid_only_outer_shell() {
        let g = VoxelGrid::full(8).unwrap();
        let ps = surface_points(&g, 3, 2).unwrap();
        assert_eq!(exposed_faces(&g).len(), 6 * 64);
        for p in &ps.points {
            assert!(p.iter().any(|&c| c == 0.0 || c == 1.0));
        }
    }

    #[test]
    fn block_face_count() {
        let mut g = VoxelGrid::empty(16).unwrap();
        g.fill_block([5, 6, 7], 2, true);
        let ps = surface_points(&g, 4, 3).unwrap();
        assert_eq!(exposed_faces(&g).len(), 24);
        assert_eq!(ps.len(), 24 * 4);
        assert!(ps.points.iter().all(|p| p.iter().all(|&c| (0.0..=1.0).contains(&c))));
    }

    #[test]
    fn empty_grid_is_an_error() {
        let g = VoxelGrid::empty(8).unwrap();
        assert!(matches!(surface_points(&g, 1, 0), Err(Error::EmptyInput(_))));
        assert!(sample_surface(&g, 10, 0).is_err());
    }

    #[test]
    fn sampled_count_and_determinism() {
        let mut g = VoxelGrid::empty(8).unwrap();
        g.fill_block([1, 1, 1], 3, true);
        let a = sample_surface(&g, 100, 9).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, sample_surface(&g, 100, 9).unwrap());
    }
}
