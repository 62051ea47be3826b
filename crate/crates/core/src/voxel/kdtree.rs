/// Static 3D kd-tree for exact nearest-neighbour queries.
///
/// Points are reordered in place so that each range `[lo, hi)` stores its
/// splitting point at `(lo + hi) / 2`, split on axis `depth % 3`.
pub struct KdTree {
    points: Vec<[f64; 3]>,
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut points = points.to_vec();
        Self::build(&mut points, 0);
        KdTree { points }
    }

    fn build(pts: &mut [[f64; 3]], depth: usize) {
        if pts.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let (left, right) = pts.split_at_mut(mid);
        Self::build(left, depth + 1);
        Self::build(&mut right[1..], depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the closest stored point.
    pub fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), 0, q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, depth: usize, q: &[f64; 3], best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = &self.points[mid];
        let d = d2(p, q);
        if d < *best {
            *best = d;
        }
        let axis = depth % 3;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, depth + 1, q, best);
        if delta * delta <= *best {
            self.search(far.0, far.1, depth + 1, q, best);
        }
    }
}
