use crate::volume::Vec3;

#[inline]
pub(crate) fn dist_sq(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Index into `order` of the splitting point.
    mid: usize,
    axis: u8,
}

/// Static 3D tree for exact nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Points permuted into implicit tree order: each range `[lo, hi)` has its
    /// split point at `(lo + hi) / 2`.
    order: Vec<usize>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(points, &mut order, 0);
        KdTree {
            points: points.to_vec(),
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to and index of the nearest point; lowest index wins ties.
    pub fn nearest(&self, q: Vec3) -> Option<(f64, usize)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(q, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    fn search(&self, q: Vec3, lo: usize, hi: usize, depth: usize, best: &mut (f64, usize)) {
        if lo >= hi {
            return;
        }
        let node = Node {
            mid: (lo + hi) / 2,
            axis: (depth % 3) as u8,
        };
        let i = self.order[node.mid];
        let p = self.points[i];
        let d = dist_sq(q, p);
        if d < best.0 || (d == best.0 && i < best.1) {
            *best = (d, i);
        }
        let diff = q[node.axis as usize] as f64 - p[node.axis as usize] as f64;
        let (near, far) = if diff < 0.0 {
            ((lo, node.mid), (node.mid + 1, hi))
        } else {
            ((node.mid + 1, hi), (lo, node.mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        if diff * diff <= best.0 {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let (left, right) = order.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_linear_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<Vec3> = (0..500).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        pts.push(pts[10]);
        let tree = KdTree::new(&pts);
        for _ in 0..300 {
            let q: Vec3 = [rng.random(), rng.random(), rng.random()];
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, &p)| (dist_sq(q, p), i))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap();
            assert_eq!(tree.nearest(q).unwrap(), brute);
        }
        assert_eq!(tree.nearest(pts[10]).unwrap(), (0.0, 10));
        assert!(KdTree::new(&[]).nearest([0.0; 3]).is_none());
    }
}
