//! Binary occupancy grids, their file format, synthetic shapes and the
//! reconstruction metrics (IoU and Chamfer distance).

mod grid;
mod kdtree;
mod metrics;
mod shapes;
mod surface;

pub use grid::{is_valid_side, VoxelGrid, GRID_MAGIC, GRID_VERSION};
pub use kdtree::KdTree;
pub use metrics::{chamfer, iou};
pub use shapes::{generate_synthetic, random_shape, synthetic, Shape, ShapeKind};
pub use surface::{exposed_faces, sample_surface, surface_points, Face, PointSet, DEFAULT_SURFACE_POINTS};
