//! Geometric kernels on raw coordinates: farthest point sampling, fixed-radius
//! grouping, k-nearest neighbors and inverse-distance interpolation.
//!
//! Every function here is pure. The naive O(N·G) searches are the reference;
//! [`GridIndex`] is an optional acceleration that must produce identical output.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Coordinates plus the index each point had in its source collection.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    coords: Vec<Point3>,
    ids: Vec<usize>,
}

impl PointSet {
    pub fn new(coords: Vec<Point3>) -> Result<Self> {
        let ids = (0..coords.len()).collect();
        Self::with_ids(coords, ids)
    }

    pub fn with_ids(coords: Vec<Point3>, ids: Vec<usize>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Empty("point set"));
        }
        if coords.len() != ids.len() {
            return Err(Error::dim("point set ids", &[coords.len()], &[ids.len()]));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("coordinate of point {i}")));
        }
        Ok(Self { coords, ids })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn point(&self, i: usize) -> &Point3 {
        &self.coords[i]
    }

    /// Subset by local index; ids follow the selected points.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::with_ids(
            indices.iter().map(|&i| self.coords[i]).collect(),
            indices.iter().map(|&i| self.ids[i]).collect(),
        )
    }
}

/// Index of the lexicographically smallest `(x, y, z)`; first index on ties.
pub fn canonical_seed(points: &PointSet) -> usize {
    let mut best = 0;
    for (i, p) in points.coords.iter().enumerate().skip(1) {
        let b = &points.coords[best];
        if p.partial_cmp(b) == Some(std::cmp::Ordering::Less) {
            best = i;
        }
    }
    best
}

/// Greedy max-min farthest point sampling starting at `seed`.
///
/// Each subsequent pick maximizes the L2 distance to the already picked set,
/// breaking ties toward the lowest index.
pub fn fps(points: &PointSet, k: usize, seed: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("fps: cannot pick {k} of {n} points")));
    }
    if seed >= n {
        return Err(Error::InvalidArgument(format!("fps: seed {seed} out of range")));
    }
    let mut picked = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(k);
    let mut current = seed;
    for _ in 0..k {
        out.push(current);
        picked[current] = true;
        let c = points.coords[current];
        let mut next = None;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if picked[i] {
                continue;
            }
            let d = dist2(&points.coords[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                next = Some(i);
            }
        }
        match next {
            Some(i) => current = i,
            None => break,
        }
    }
    Ok(out)
}

/// Result of a ball query: `groups × group_size` member indices.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupIndex {
    pub centroid_ids: Vec<usize>,
    /// Row-major `G × S`.
    pub member_ids: Vec<usize>,
    pub group_size: usize,
    pub radius: f64,
    /// Number of distinct in-radius members found per group before padding.
    pub found: Vec<usize>,
}

impl GroupIndex {
    pub fn groups(&self) -> usize {
        self.centroid_ids.len()
    }

    pub fn members(&self, g: usize) -> &[usize] {
        &self.member_ids[g * self.group_size..(g + 1) * self.group_size]
    }

    pub fn is_padded(&self, g: usize) -> bool {
        self.found[g] < self.group_size
    }
}

fn check_query(points: &PointSet, centroids: &[usize], radius: f64, s: usize) -> Result<()> {
    if !(radius > 0.0) || s == 0 {
        return Err(Error::InvalidArgument(format!(
            "ball_query needs radius > 0 and group size >= 1, got {radius} and {s}"
        )));
    }
    if let Some(&c) = centroids.iter().find(|&&c| c >= points.len()) {
        return Err(Error::InvalidArgument(format!("centroid {c} out of range")));
    }
    Ok(())
}

fn fill_group(members: &mut Vec<usize>, found: &[usize], s: usize) -> usize {
    let count = found.len().min(s);
    members.extend_from_slice(&found[..count]);
    for _ in count..s {
        members.push(found[0]);
    }
    count
}

/// For each centroid, up to `s` points within `radius` in ascending index order.
/// Under-full groups repeat their first member.
pub fn ball_query(points: &PointSet, centroids: &[usize], radius: f64, s: usize) -> Result<GroupIndex> {
    check_query(points, centroids, radius, s)?;
    let r2 = radius * radius;
    let mut member_ids = Vec::with_capacity(centroids.len() * s);
    let mut found = Vec::with_capacity(centroids.len());
    let mut hits = Vec::with_capacity(s);
    for &c in centroids {
        let cp = points.coords[c];
        hits.clear();
        for (i, p) in points.coords.iter().enumerate() {
            if dist2(p, &cp) <= r2 {
                hits.push(i);
                if hits.len() == s {
                    break;
                }
            }
        }
        found.push(fill_group(&mut member_ids, &hits, s));
    }
    Ok(GroupIndex {
        centroid_ids: centroids.to_vec(),
        member_ids,
        group_size: s,
        radius,
        found,
    })
}

/// Uniform hash grid over a point set.
pub struct GridIndex<'a> {
    points: &'a PointSet,
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a PointSet, cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(Error::InvalidArgument(format!("grid cell size {cell}")));
        }
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.coords.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Ok(Self { points, cell, cells })
    }

    fn key(p: &Point3, cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// All indices within `radius` of `center`, ascending.
    pub fn within(&self, center: &Point3, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let lo = Self::key(&[center[0] - radius, center[1] - radius, center[2] - radius], self.cell);
        let hi = Self::key(&[center[0] + radius, center[1] + radius, center[2] + radius], self.cell);
        let mut out = Vec::new();
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if let Some(list) = self.cells.get(&[x, y, z]) {
                        out.extend(
                            list.iter()
                                .copied()
                                .filter(|&i| dist2(&self.points.coords[i], center) <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Same contract as [`ball_query`].
    pub fn ball_query(&self, centroids: &[usize], radius: f64, s: usize) -> Result<GroupIndex> {
        check_query(self.points, centroids, radius, s)?;
        let mut member_ids = Vec::with_capacity(centroids.len() * s);
        let mut found = Vec::with_capacity(centroids.len());
        for &c in centroids {
            let hits = self.within(&self.points.coords[c], radius);
            found.push(fill_group(&mut member_ids, &hits, s));
        }
        Ok(GroupIndex {
            centroid_ids: centroids.to_vec(),
            member_ids,
            group_size: s,
            radius,
            found,
        })
    }
}

/// The `k` nearest sources to `query` as `(index, squared distance)`, nearest
/// first, ties toward the lower index. `k` is clamped to the source count.
pub fn knn(sources: &PointSet, query: &Point3, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = sources
        .coords
        .iter()
        .enumerate()
        .map(|(i, p)| (i, dist2(p, query)))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k.min(sources.len()));
    all
}

/// Normalized inverse-squared-distance weights over the `k` nearest sources of
/// each query. A query that coincides with a source takes that source alone.
pub fn idw_weights(sources: &PointSet, queries: &PointSet, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("idw needs k >= 1".into()));
    }
    Ok(queries
        .coords
        .iter()
        .map(|q| {
            let near = knn(sources, q, k);
            if near[0].1 == 0.0 {
                return vec![(near[0].0, 1.0)];
            }
            let raw: Vec<(usize, f64)> = near.iter().map(|&(i, d2)| (i, 1.0 / d2)).collect();
            let total: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.into_iter().map(|(i, w)| (i, w / total)).collect()
        })
        .collect())
}

/// Interpolates `features` (row-major `sources × width`) onto `queries`.
pub fn idw_interpolate(
    sources: &PointSet,
    features: &[f64],
    width: usize,
    queries: &PointSet,
    k: usize,
) -> Result<Vec<f64>> {
    if features.len() != sources.len() * width {
        return Err(Error::dim("idw features", &[sources.len(), width], &[features.len()]));
    }
    let weights = idw_weights(sources, queries, k)?;
    let mut out = vec![0.0; queries.len() * width];
    for (q, list) in weights.iter().enumerate() {
        let row = &mut out[q * width..(q + 1) * width];
        for &(i, w) in list {
            for (o, v) in row.iter_mut().zip(&features[i * width..(i + 1) * width]) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> PointSet {
        PointSet::new(
            (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fps_collinear() {
        let pts = PointSet::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]]).unwrap();
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 2]);
        assert_eq!(fps(&pts, 3, 0).unwrap(), vec![0, 2, 1]);
        assert!(fps(&pts, 4, 0).is_err());
    }

    #[test]
    fn fps_all_points_with_duplicates() {
        let pts = PointSet::new(vec![[1.0; 3], [1.0; 3], [0.0; 3], [1.0; 3]]).unwrap();
        let seed = canonical_seed(&pts);
        assert_eq!(seed, 2);
        let mut got = fps(&pts, 4, seed).unwrap();
        assert_eq!(got, vec![2, 0, 1, 3]);
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_is_order_independent_with_canonical_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(40, &mut rng);
        let picked: Vec<Point3> = fps(&pts, 8, canonical_seed(&pts))
            .unwrap()
            .iter()
            .map(|&i| *pts.point(i))
            .collect();
        let mut perm: Vec<usize> = (0..40).collect();
        perm.reverse();
        perm.swap(3, 17);
        let shuffled = pts.select(&perm).unwrap();
        let picked2: Vec<Point3> = fps(&shuffled, 8, canonical_seed(&shuffled))
            .unwrap()
            .iter()
            .map(|&i| *shuffled.point(i))
            .collect();
        assert_eq!(picked, picked2);
    }

    #[test]
    fn ball_query_degenerate_radii() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(20, &mut rng);
        let g = ball_query(&pts, &[3, 7], 1e-9, 4).unwrap();
        assert_eq!(g.members(0), &[3, 3, 3, 3]);
        assert_eq!(g.members(1), &[7, 7, 7, 7]);
        assert!(g.is_padded(0));
        let g = ball_query(&pts, &[3, 7], 10.0, 4).unwrap();
        assert_eq!(g.members(0), &[0, 1, 2, 3]);
        assert_eq!(g.members(1), &[0, 1, 2, 3]);
        assert!(!g.is_padded(1));
        assert!(ball_query(&pts, &[0], 0.0, 4).is_err());
        assert!(ball_query(&pts, &[0], 1.0, 0).is_err());
    }

    #[test]
    fn idw_exact_and_symmetric_cases() {
        let src = PointSet::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [5.0, 5.0, 5.0]]).unwrap();
        let feats = [1.0, 10.0, 3.0, 30.0, 7.0, 70.0];
        let q = PointSet::new(vec![[2.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let out = idw_interpolate(&src, &feats, 2, &q, 2).unwrap();
        assert_eq!(&out[..2], &[3.0, 30.0]);
        assert!((out[2] - 2.0).abs() < 1e-12 && (out[3] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn grid_index_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(300, &mut rng);
        let centroids = fps(&pts, 16, canonical_seed(&pts)).unwrap();
        for r in [0.05, 0.1, 0.3, 2.0] {
            let grid = GridIndex::new(&pts, r).unwrap();
            assert_eq!(
                grid.ball_query(&centroids, r, 12).unwrap(),
                ball_query(&pts, &centroids, r, 12).unwrap()
            );
        }
    }

    proptest! {
        #[test]
        fn ball_members_within_radius(seed in 0u64..1000, r in 0.01f64..1.0, s in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(50, &mut rng);
            let cents = fps(&pts, 5, canonical_seed(&pts)).unwrap();
            let g = ball_query(&pts, &cents, r, s).unwrap();
            for (gi, &c) in cents.iter().enumerate() {
                prop_assert_eq!(g.members(gi).len(), s);
                for &m in g.members(gi) {
                    prop_assert!(dist2(pts.point(m), pts.point(c)).sqrt() <= r + 1e-9);
                }
            }
        }

        #[test]
        fn idw_weights_are_a_partition_of_unity(seed in 0u64..1000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = random_points(12, &mut rng);
            let q = random_points(9, &mut rng);
            for list in idw_weights(&src, &q, k).unwrap() {
                prop_assert!(list.iter().all(|(_, w)| *w >= 0.0));
                let total: f64 = list.iter().map(|(_, w)| w).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
            let constant = vec![4.25; 12 * 2];
            for v in idw_interpolate(&src, &constant, 2, &q, k).unwrap() {
                prop_assert!((v - 4.25).abs() < 1e-12);
            }
        }
    }
}
