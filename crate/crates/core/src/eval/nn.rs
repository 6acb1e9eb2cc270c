use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;

type V3 = Vector3<f64>;

/// Index and distance of the closest point, lowest index on ties.
pub fn brute_force_nearest(points: &[V3], q: &V3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Exact nearest-neighbor queries over a fixed cloud.
pub struct NearestIndex<'a> {
    points: &'a [V3],
    tree: Option<ImmutableKdTree<f64, 3>>,
}

impl<'a> NearestIndex<'a> {
    pub fn new(points: &'a [V3]) -> Self {
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&coords).ok();
        NearestIndex { points, tree }
    }

    /// Same answer as [`brute_force_nearest`].
    pub fn nearest(&self, q: &V3) -> (usize, f64) {
        let Some(tree) = self.tree.as_ref().filter(|_| !self.points.is_empty()) else {
            return brute_force_nearest(self.points, q);
        };
        let query = [q.x, q.y, q.z];
        let d2 = tree.query(&query).nearest_one::<SquaredEuclidean<f64>>().execute().distance;
        // The tree sums squares in its own order; re-rank every candidate
        // within a few ulps using the same arithmetic as the brute force.
        let radius = d2 * (1.0 + 16.0 * f64::EPSILON) + f64::MIN_POSITIVE;
        let mut best = (usize::MAX, f64::INFINITY);
        for hit in tree.query(&query).within::<SquaredEuclidean<f64>>(radius).execute() {
            let i = hit.item as usize;
            let d = (self.points[i] - q).norm();
            if d < best.1 || (d == best.1 && i < best.0) {
                best = (i, d);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(v: &[(f64, f64, f64)]) -> Vec<V3> {
        v.iter().map(|&(x, y, z)| V3::new(x, y, z)).collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64), 1..200),
            qs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..20),
        ) {
            let pts = cloud(&pts);
            let index = NearestIndex::new(&pts);
            for q in cloud(&qs) {
                prop_assert_eq!(index.nearest(&q), brute_force_nearest(&pts, &q));
            }
        }
    }

    #[test]
    fn duplicates_and_single_points() {
        let pts = cloud(&[(1.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)]);
        let index = NearestIndex::new(&pts);
        assert_eq!(index.nearest(&V3::new(1.0, 1.0, 1.0)), (0, 0.0));
        let one = cloud(&[(0.0, 0.0, 0.0)]);
        assert_eq!(NearestIndex::new(&one).nearest(&V3::new(0.0, 3.0, 4.0)), (0, 5.0));
        let mut many = vec![V3::new(0.5, 0.5, 0.5); 500];
        many.push(V3::new(2.0, 0.0, 0.0));
        let index = NearestIndex::new(&many);
        assert_eq!(index.nearest(&V3::new(0.5, 0.5, 0.6)).0, 0);
        assert_eq!(index.nearest(&V3::new(3.0, 0.0, 0.0)), (500, 1.0));
    }

    #[test]
    fn far_queries_against_a_tiny_cloud() {
        let pts = cloud(&[(0.0, 0.0, 0.0), (1e-9, 0.0, 0.0), (0.0, 1e-9, 0.0), (0.0, 0.0, 1e-9)]);
        let index = NearestIndex::new(&pts);
        for q in cloud(&[(3.0, -4.0, 0.0), (-1e3, 2.0, 5e2), (1e-9, 1e-9, 1e-9)]) {
            assert_eq!(index.nearest(&q), brute_force_nearest(&pts, &q));
        }
    }
}
