// Synthetic solids in normalized [0,1]^3 coordinates, rasterized at voxel centres.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::VoxelGrid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Box,
    Blob,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Blob, ShapeKind::Torus];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Blob => "blob",
            ShapeKind::Torus => "torus",
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Union of spheres.
    Blob {
        spheres: Vec<([f64; 3], f64)>,
    },
    /// Ring around `axis` (0 = x, 1 = y, 2 = z).
    Torus {
        center: [f64; 3],
        major: f64,
        minor: f64,
        axis: usize,
    },
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Sphere { .. } => ShapeKind::Sphere,
            Shape::Box { .. } => ShapeKind::Box,
            Shape::Blob { .. } => ShapeKind::Blob,
            Shape::Torus { .. } => ShapeKind::Torus,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius } => dist2(p, *center) <= radius * radius,
            Shape::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
            Shape::Blob { spheres } => spheres.iter().any(|(c, r)| dist2(p, *c) <= r * r),
            Shape::Torus { center, major, minor, axis } => {
                let d: Vec<f64> = (0..3).map(|i| p[i] - center[i]).collect();
                let along = d[*axis];
                let radial = (0..3).filter(|i| i != axis).map(|i| d[i] * d[i]).sum::<f64>().sqrt();
                (radial - major).powi(2) + along * along <= minor * minor
            }
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let ball = |c: [f64; 3], r: f64| (c.map(|v| v - r), c.map(|v| v + r));
        match self {
            Shape::Sphere { center, radius } => ball(*center, *radius),
            Shape::Box { min, max } => (*min, *max),
            Shape::Blob { spheres } => {
                let (mut lo, mut hi) = ([f64::MAX; 3], [f64::MIN; 3]);
                for (c, r) in spheres {
                    for i in 0..3 {
                        lo[i] = lo[i].min(c[i] - r);
                        hi[i] = hi[i].max(c[i] + r);
                    }
                }
                (lo, hi)
            }
            Shape::Torus { center, major, minor, .. } => ball(*center, major + minor),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            Shape::Sphere { radius, .. } if *radius <= 0.0 => return bad("sphere radius must be positive"),
            Shape::Box { min, max } if (0..3).any(|i| max[i] <= min[i]) => return bad("box has zero extent"),
            Shape::Blob { spheres } if spheres.is_empty() || spheres.iter().any(|(_, r)| *r <= 0.0) => {
                return bad("blob needs spheres with positive radii")
            }
            Shape::Torus { major, minor, axis, .. } if *minor <= 0.0 || *major <= *minor || *axis > 2 => {
                return bad("torus needs major > minor > 0 and axis in 0..3")
            }
            _ => {}
        }
        let (lo, hi) = self.bounds();
        if lo.iter().any(|&v| v < -1e-9) || hi.iter().any(|&v| v > 1.0 + 1e-9) {
            return bad("shape does not fit inside the unit cube");
        }
        Ok(())
    }
}

/// Rasterizes `shape` at the centres of a `side`^3 grid.
pub fn generate_synthetic(shape: &Shape, side: usize) -> Result<VoxelGrid> {
    shape.validate()?;
    let s = side as f64;
    VoxelGrid::from_fn(side, |x, y, z| {
        shape.contains([(x as f64 + 0.5) / s, (y as f64 + 0.5) / s, (z as f64 + 0.5) / s])
    })
}

/// Seeded random parameters for a shape of the given kind.
pub fn random_shape(kind: ShapeKind, seed: u64) -> Shape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000 ^ (kind as u64) << 48);
    let centre = |rng: &mut ChaCha8Rng, half: f64| -> [f64; 3] {
        std::array::from_fn(|_| rng.gen_range(half + 0.02..=1.0 - half - 0.02))
    };
    match kind {
        ShapeKind::Sphere => {
            let radius = rng.gen_range(0.2..0.42);
            Shape::Sphere { center: centre(&mut rng, radius), radius }
        }
        ShapeKind::Box => {
            let half: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.4));
            let c: [f64; 3] = std::array::from_fn(|i| rng.gen_range(half[i] + 0.02..=1.0 - half[i] - 0.02));
            Shape::Box { min: std::array::from_fn(|i| c[i] - half[i]), max: std::array::from_fn(|i| c[i] + half[i]) }
        }
        ShapeKind::Blob => {
            let n = rng.gen_range(3..=5);
            let spheres = (0..n)
                .map(|_| {
                    let r = rng.gen_range(0.12..0.25);
                    let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
                    (c, r)
                })
                .collect();
            Shape::Blob { spheres }
        }
        ShapeKind::Torus => {
            let major = rng.gen_range(0.22..0.3);
            let minor = rng.gen_range(0.08..0.14);
            let axis = rng.gen_range(0..3);
            let center = std::array::from_fn(|_| 0.5 + rng.gen_range(-0.04..0.04));
            Shape::Torus { center, major, minor, axis }
        }
    }
}

/// Random shape of `kind` rasterized at `side`; deterministic in `seed`.
pub fn synthetic(kind: ShapeKind, side: usize, seed: u64) -> Result<VoxelGrid> {
    generate_synthetic(&random_shape(kind, seed), side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_volume_fraction() {
        let g = generate_synthetic(&Shape::Sphere { center: [0.5; 3], radius: 0.4 }, 32).unwrap();
        let frac = g.count() as f64 / g.voxel_count() as f64;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 0.4f64.powi(3);
        assert!((analytic - 0.268).abs() < 1e-3);
        assert!((frac - analytic).abs() / analytic < 0.1, "{frac}");
    }

    #[test]
    fn whole_box_is_full() {
        let g = generate_synthetic(&Shape::Box { min: [0.0; 3], max: [1.0; 3] }, 16).unwrap();
        assert!(g.is_full());
    }

    #[test]
    fn degenerate_shapes_rejected() {
        assert!(generate_synthetic(&Shape::Sphere { center: [0.5; 3], radius: 0.0 }, 16).is_err());
        assert!(generate_synthetic(&Shape::Box { min: [0.2; 3], max: [0.2, 0.5, 0.5] }, 16).is_err());
        assert!(generate_synthetic(&Shape::Sphere { center: [0.9; 3], radius: 0.3 }, 16).is_err());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        for kind in ShapeKind::ALL {
            let a = synthetic(kind, 32, 7).unwrap();
            let b = synthetic(kind, 32, 7).unwrap();
            assert_eq!(a, b);
            assert!(!a.is_empty(), "{kind:?}");
            assert!(random_shape(kind, 7).validate().is_ok());
        }
        assert_ne!(synthetic(ShapeKind::Sphere, 32, 1).unwrap(), synthetic(ShapeKind::Sphere, 32, 2).unwrap());
    }
}
