//! Part decomposition and part-aware spring topology.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::PartPrior;
use crate::sim::{Edge, EdgeKind, SpringGraph, Vec3};
use crate::spatial::KdTree;

pub const MAX_ITERATIONS: usize = 100;
pub const INERTIA_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut uf = UnionFind::new(n);
        for (a, b) in edges {
            uf.union(a, b);
        }
        uf
    }

    pub fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    pub fn components(&mut self) -> usize {
        (0..self.parent.len()).filter(|&i| self.find(i) == i).count()
    }
}

/// Clustering of points into semantic parts.
///
/// Part ids are ordered by the lowest point index they contain. Centroids
/// live in the standardized feature space the clustering runs in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartDecomposition {
    pub assignments: Vec<usize>,
    pub num_parts: usize,
    pub part_sizes: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl PartDecomposition {
    /// Every point in one part.
    pub fn single(n: usize) -> Self {
        PartDecomposition {
            assignments: vec![0; n],
            num_parts: 1,
            part_sizes: vec![n],
            centroids: vec![Vec::new()],
        }
    }

    pub fn members(&self, part: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == part)
            .collect()
    }
}

/// Per-dimension zero-mean unit-variance scaling; constant columns are only centred.
pub fn standardize(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = features.len();
    if n == 0 {
        return Vec::new();
    }
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for f in features {
        for k in 0..d {
            var[k] += (f[k] - mean[k]).powi(2);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-12 { s } else { 1.0 }
        })
        .collect();
    features
        .iter()
        .map(|f| (0..d).map(|k| (f[k] - mean[k]) / scale[k]).collect())
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist2(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd clustering with distance-weighted seeding.
pub fn cluster_parts(features: &[Vec<f64>], k: usize, seed: u64) -> Result<PartDecomposition> {
    let n = features.len();
    if k == 0 {
        return Err(Error::invalid("number of parts must be >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("cannot split {n} points into {k} parts")));
    }
    let d = features[0].len();
    for (i, f) in features.iter().enumerate() {
        if f.len() != d {
            return Err(Error::dims(format!("features[{i}]"), d, f.len()));
        }
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                path: format!("features[{i}]"),
            });
        }
    }
    let data = standardize(features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.push(data[first].clone());
    let mut closest: Vec<f64> = data.iter().map(|p| dist2(p, &data[first])).collect();
    while centroids.len() < k {
        let pick = match WeightedIndex::new(&closest) {
            Ok(w) => w.sample(&mut rng),
            // All remaining mass is zero: fall back to the first unused point.
            Err(_) => (0..n).find(|&i| !chosen[i]).unwrap(),
        };
        chosen[pick] = true;
        centroids.push(data[pick].clone());
        for (c, p) in closest.iter_mut().zip(&data) {
            *c = c.min(dist2(p, &data[pick]));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for (i, p) in data.iter().enumerate() {
            let (c, dd) = nearest_centroid(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dists[i] = dd;
            inertia += dd;
        }
        // Re-seed empty clusters from the farthest point.
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] == 0 {
                let far = (0..n)
                    .filter(|&i| sizes[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n guarantees a donor");
                sizes[assignments[far]] -= 1;
                assignments[far] = c;
                sizes[c] = 1;
                dists[far] = 0.0;
                changed = true;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            centroid.iter_mut().for_each(|v| *v = 0.0);
            for (i, p) in data.iter().enumerate() {
                if assignments[i] == c {
                    for (v, x) in centroid.iter_mut().zip(p) {
                        *v += x;
                    }
                }
            }
            centroid.iter_mut().for_each(|v| *v /= sizes[c] as f64);
        }
        let rel = (prev_inertia - inertia).abs() / inertia.max(f64::MIN_POSITIVE);
        prev_inertia = inertia;
        if !changed || rel < INERTIA_TOLERANCE {
            break;
        }
    }

    // Relabel by first appearance.
    let mut relabel = vec![usize::MAX; k];
    let mut next = 0;
    for &a in &assignments {
        if relabel[a] == usize::MAX {
            relabel[a] = next;
            next += 1;
        }
    }
    let assignments: Vec<usize> = assignments.iter().map(|&a| relabel[a]).collect();
    let mut ordered = vec![Vec::new(); k];
    for (old, c) in centroids.into_iter().enumerate() {
        ordered[relabel[old]] = c;
    }
    let mut part_sizes = vec![0; k];
    for &a in &assignments {
        part_sizes[a] += 1;
    }
    Ok(PartDecomposition {
        assignments,
        num_parts: k,
        part_sizes,
        centroids: ordered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub base_knn: usize,
    pub base_radius_scale: f64,
    pub boundary_pairs: usize,
    /// Reference stiffness (N/m) at which a part gets `base_knn` neighbours.
    pub reference_stiffness: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            base_knn: 6,
            base_radius_scale: 2.5,
            boundary_pairs: 3,
            reference_stiffness: 1e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartTopology {
    pub knn: usize,
    pub radius: f64,
}

pub const MIN_KNN: usize = 4;
pub const MAX_KNN: usize = 12;

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median distance from each point to its nearest distinct neighbour.
pub fn median_nn_distance(points: &[Vec3]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let tree = KdTree::build(points);
    let dists: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            tree.nearest_k(p, 2)
                .into_iter()
                .find(|&(j, _)| j != i)
                .map(|(_, d)| d)
                .unwrap_or(0.0)
        })
        .collect();
    Some(median(dists))
}

/// Neighbourhood size from the part's stiffness prior, radius from its density.
///
/// Softer priors never get fewer neighbours than stiffer ones.
pub fn topology_hyperparams(
    prior: &PartPrior,
    part_points: &[Vec3],
    global_median_nn: f64,
    config: &TopologyConfig,
) -> Result<PartTopology> {
    if part_points.is_empty() {
        return Err(Error::invalid("part has no points"));
    }
    if part_points.len() == 1 {
        return Ok(PartTopology {
            knn: 1,
            radius: global_median_nn.max(crate::sim::MIN_REST_LENGTH),
        });
    }
    let s = (config.reference_stiffness / prior.log_stiffness_mean.exp()).clamp(0.5, 2.0);
    let knn = ((config.base_knn as f64 * s).round() as usize).clamp(MIN_KNN, MAX_KNN);
    let nn = median_nn_distance(part_points).unwrap_or(global_median_nn);
    Ok(PartTopology {
        knn,
        radius: (config.base_radius_scale * nn).max(crate::sim::MIN_REST_LENGTH),
    })
}

fn canonical(a: usize, b: usize) -> (usize, usize) {
    if a < b { (a, b) } else { (b, a) }
}

/// Intra-part kNN ∩ radius springs, boundary springs between adjacent parts,
/// and bridging springs until the graph is connected.
///
/// Neighbours tied with the k-th distance are all kept, so the edge set does
/// not depend on point order.
pub fn build_graph(
    positions: &[Vec3],
    decomposition: &PartDecomposition,
    topo: &[PartTopology],
    boundary_pairs: usize,
) -> Result<SpringGraph> {
    let n = positions.len();
    if n < 2 {
        return Err(Error::invalid("a spring graph needs at least two points"));
    }
    if decomposition.assignments.len() != n {
        return Err(Error::dims("part assignments", n, decomposition.assignments.len()));
    }
    let k_parts = decomposition.num_parts;
    if topo.len() != k_parts {
        return Err(Error::dims("part topology", k_parts, topo.len()));
    }
    let part_of = &decomposition.assignments;
    let members: Vec<Vec<usize>> = (0..k_parts).map(|p| decomposition.members(p)).collect();
    let part_points: Vec<Vec<Vec3>> = members
        .iter()
        .map(|m| m.iter().map(|&i| positions[i]).collect())
        .collect();
    let trees: Vec<KdTree> = part_points.iter().map(|p| KdTree::build(p)).collect();

    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for p in 0..k_parts {
        let PartTopology { knn, radius } = topo[p];
        for (local, &i) in members[p].iter().enumerate() {
            let ball: Vec<(usize, f64)> = trees[p]
                .within(&part_points[p][local], radius)
                .into_iter()
                .filter(|&(j, d)| j != local && d > 0.0)
                .collect();
            let limit = if ball.len() >= knn { ball[knn - 1].1 } else { f64::INFINITY };
            for (j, d) in ball {
                if d > limit {
                    break;
                }
                pairs.insert(canonical(i, members[p][j]));
            }
        }
    }

    let mut boundary: BTreeSet<(usize, usize)> = BTreeSet::new();
    if boundary_pairs > 0 {
        for a in 0..k_parts {
            for b in a + 1..k_parts {
                let (small, large) = if members[a].len() <= members[b].len() { (a, b) } else { (b, a) };
                let mut cands: Vec<(f64, usize, usize)> = Vec::new();
                for &i in &members[small] {
                    let want = boundary_pairs.min(members[large].len());
                    // Over-fetch so zero-length pairs can be skipped.
                    for (jl, d) in trees[large].nearest_k(&positions[i], want + 1) {
                        if d > 0.0 {
                            let (u, v) = canonical(i, members[large][jl]);
                            cands.push((d, u, v));
                        }
                    }
                }
                cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
                cands.dedup();
                let Some(&(closest, _, _)) = cands.first() else { continue };
                if closest > 1.5 * topo[a].radius.max(topo[b].radius) {
                    continue;
                }
                for &(_, u, v) in cands.iter().take(boundary_pairs) {
                    boundary.insert((u, v));
                }
            }
        }
    }
    pairs.extend(boundary);

    let mut uf = UnionFind::from_edges(n, pairs.iter().copied());
    let full_tree = KdTree::build(positions);
    while uf.components() > 1 {
        // Borůvka round: cheapest outgoing edge per component.
        let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
        let mut best: std::collections::BTreeMap<usize, (f64, usize, usize)> = Default::default();
        for i in 0..n {
            let mut k = 8;
            let found = loop {
                let hits = full_tree.nearest_k(&positions[i], k.min(n));
                let hit = hits
                    .iter()
                    .find(|&&(j, d)| roots[j] != roots[i] && d > 0.0)
                    .copied();
                if hit.is_some() || k >= n {
                    break hit;
                }
                k *= 2;
            };
            if let Some((j, d)) = found {
                let (u, v) = canonical(i, j);
                let cand = (d, u, v);
                let slot = best.entry(roots[i]).or_insert(cand);
                if (cand.0, cand.1, cand.2) < (slot.0, slot.1, slot.2) {
                    *slot = cand;
                }
            }
        }
        if best.is_empty() {
            return Err(Error::invalid("cannot connect coincident point clusters"));
        }
        let mut merged = false;
        for (_, (_, u, v)) in best {
            if uf.union(u, v) {
                pairs.insert((u, v));
                merged = true;
            }
        }
        if !merged {
            break;
        }
    }

    let edges = pairs
        .into_iter()
        .map(|(i, j)| Edge {
            i,
            j,
            kind: if part_of[i] == part_of[j] {
                EdgeKind::Intra(part_of[i])
            } else {
                EdgeKind::Boundary
            },
            rest_length: (positions[j] - positions[i]).norm(),
        })
        .collect();
    Ok(SpringGraph {
        point_count: n,
        part_of: part_of.clone(),
        num_parts: k_parts,
        edges,
        controller_edges: Vec::new(),
        controller_count: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn prior(mean: f64) -> PartPrior {
        PartPrior::gaussian(mean, 1.0)
    }

    #[test]
    fn identical_features_single_part() {
        let f = vec![vec![1.0, 2.0]; 7];
        let d = cluster_parts(&f, 1, 3).unwrap();
        assert_eq!(d.part_sizes, vec![7]);
        assert!(d.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn separates_two_groups_in_1d() {
        let f = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        for seed in 0..20 {
            let d = cluster_parts(&f, 2, seed).unwrap();
            assert_eq!(d.assignments, vec![0, 0, 1, 1]);
        }
    }

    #[test]
    fn brute_force_partition_agrees() {
        // Within-cluster variance minimiser over all 2-partitions of the 1-D set.
        let xs = [0.0, 0.1, 10.0, 10.1];
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << 4) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let pts: Vec<f64> = (0..4).filter(|&i| ((mask >> i) & 1 == 1) == side).map(|i| xs[i]).collect();
                let m = pts.iter().sum::<f64>() / pts.len() as f64;
                cost += pts.iter().map(|x| (x - m).powi(2)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        let groups: Vec<bool> = (0..4).map(|i| (best.1 >> i) & 1 == 1).collect();
        assert_eq!(groups[0], groups[1]);
        assert_eq!(groups[2], groups[3]);
        assert_ne!(groups[0], groups[2]);
        let f: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let d = cluster_parts(&f, 2, 11).unwrap();
        assert_eq!(d.assignments[0] == d.assignments[1], groups[0] == groups[1]);
        assert_ne!(d.assignments[0], d.assignments[2]);
    }

    #[test]
    fn k_equal_n_gives_singletons() {
        let f: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 1.3, (i * i) as f64]).collect();
        let d = cluster_parts(&f, 6, 5).unwrap();
        assert_eq!(d.part_sizes, vec![1; 6]);
        assert_eq!(d.assignments, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn too_many_parts_is_an_error() {
        let f = vec![vec![0.0]; 3];
        assert!(cluster_parts(&f, 4, 0).is_err());
    }

    #[test]
    fn reference_prior_keeps_base_knn() {
        let cfg = TopologyConfig::default();
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let t = topology_hyperparams(&prior(cfg.reference_stiffness.ln()), &pts, 0.1, &cfg).unwrap();
        assert_eq!(t.knn, cfg.base_knn);
    }

    #[test]
    fn soft_prior_doubles_knn() {
        let cfg = TopologyConfig::default();
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        for mean in [(cfg.reference_stiffness / 2.0).ln(), 1.0f64.ln()] {
            let t = topology_hyperparams(&prior(mean), &pts, 0.1, &cfg).unwrap();
            assert_eq!(t.knn, (2 * cfg.base_knn).min(MAX_KNN));
        }
    }

    #[test]
    fn chain_radius_is_scaled_spacing() {
        let cfg = TopologyConfig::default();
        let h = 0.037;
        let pts: Vec<Vec3> = (0..25).map(|i| Vec3::new(i as f64 * h, 0.0, 0.0)).collect();
        let t = topology_hyperparams(&prior(5.0), &pts, 1.0, &cfg).unwrap();
        assert!((t.radius - cfg.base_radius_scale * h).abs() < 1e-12);
    }

    #[test]
    fn single_point_part_uses_global_density() {
        let cfg = TopologyConfig::default();
        let t = topology_hyperparams(&prior(5.0), &[Vec3::zeros()], 0.25, &cfg).unwrap();
        assert_eq!(t, PartTopology { knn: 1, radius: 0.25 });
    }

    #[test]
    fn knn_is_monotone_in_prior_stiffness() {
        let cfg = TopologyConfig::default();
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let mut last = usize::MAX;
        for m in 0..60 {
            let t = topology_hyperparams(&prior(m as f64 * 0.25), &pts, 1.0, &cfg).unwrap();
            assert!(t.knn <= last);
            last = t.knn;
        }
    }

    #[test]
    fn colinear_two_part_example() {
        let pts: Vec<Vec3> = [0.0, 1.0, 10.0, 11.0].iter().map(|&x| Vec3::new(x, 0.0, 0.0)).collect();
        let decomp = PartDecomposition {
            assignments: vec![0, 0, 1, 1],
            num_parts: 2,
            part_sizes: vec![2, 2],
            centroids: vec![vec![], vec![]],
        };
        // Parts are 9 apart so they are not adjacent; connectivity bridging adds (1,2).
        let topo = [PartTopology { knn: 1, radius: 2.0 }; 2];
        let g = build_graph(&pts, &decomp, &topo, 1).unwrap();
        let e: Vec<_> = g.edges.iter().map(|e| (e.i, e.j, e.kind)).collect();
        assert_eq!(
            e,
            vec![
                (0, 1, EdgeKind::Intra(0)),
                (1, 2, EdgeKind::Boundary),
                (2, 3, EdgeKind::Intra(1)),
            ]
        );
        g.validate().unwrap();
    }

    #[test]
    fn adjacent_parts_get_shortest_boundary_pairs() {
        let pts: Vec<Vec3> = [0.0, 1.0, 2.0, 3.0].iter().map(|&x| Vec3::new(x, 0.0, 0.0)).collect();
        let decomp = PartDecomposition {
            assignments: vec![0, 0, 1, 1],
            num_parts: 2,
            part_sizes: vec![2, 2],
            centroids: vec![vec![], vec![]],
        };
        let topo = [PartTopology { knn: 1, radius: 1.5 }; 2];
        let g = build_graph(&pts, &decomp, &topo, 2).unwrap();
        let b: Vec<_> = g
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Boundary)
            .map(|e| (e.i, e.j))
            .collect();
        // Shortest cross pairs: (1,2) at 1, then (0,2) and (1,3) tie at 2 -> lower index first.
        assert_eq!(b, vec![(0, 2), (1, 2)]);
    }

    fn brute_knn_graph(pts: &[Vec3], k: usize) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for i in 0..pts.len() {
            let mut others: Vec<usize> = (0..pts.len()).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| (pts[a] - pts[i]).norm().total_cmp(&(pts[b] - pts[i]).norm()));
            for &j in others.iter().take(k) {
                out.insert(canonical(i, j));
            }
        }
        out
    }

    fn random_points(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn single_part_infinite_radius_is_plain_knn() {
        let pts = random_points(4, 40);
        let decomp = PartDecomposition::single(pts.len());
        let g = build_graph(&pts, &decomp, &[PartTopology { knn: 5, radius: f64::INFINITY }], 3).unwrap();
        let got: BTreeSet<_> = g.edges.iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(got, brute_knn_graph(&pts, 5));
    }

    #[test]
    fn too_few_points() {
        let decomp = PartDecomposition::single(1);
        assert!(build_graph(&[Vec3::zeros()], &decomp, &[PartTopology { knn: 1, radius: 1.0 }], 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn graphs_are_valid_and_connected(seed in 0u64..1000, n in 4usize..60, k in 1usize..4, knn in 1usize..6, scale in 0.2..3.0f64) {
            let pts = random_points(seed, n);
            let feats: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.x, p.y]).collect();
            let k = k.min(n);
            let decomp = cluster_parts(&feats, k, seed).unwrap();
            let nn = median_nn_distance(&pts).unwrap();
            let topo: Vec<_> = (0..k).map(|_| PartTopology { knn, radius: scale * nn }).collect();
            let g = build_graph(&pts, &decomp, &topo, 2).unwrap();
            g.validate().unwrap();
            prop_assert!(g.is_connected());
        }

        #[test]
        fn edge_set_is_permutation_invariant(seed in 0u64..1000, n in 4usize..40) {
            // Lattice points stress tie handling.
            let pts: Vec<Vec3> = (0..n).map(|i| Vec3::new((i % 3) as f64, ((i / 3) % 4) as f64, (i / 12) as f64)).collect();
            let decomp = PartDecomposition::single(n);
            let topo = [PartTopology { knn: 3, radius: 1.5 }];
            let g = build_graph(&pts, &decomp, &topo, 1).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<Vec3> = perm.iter().map(|&p| pts[p]).collect();
            let gp = build_graph(&permuted, &PartDecomposition::single(n), &topo, 1).unwrap();
            let back: BTreeSet<_> = gp.edges.iter().map(|e| canonical(perm[e.i], perm[e.j])).collect();
            let orig: BTreeSet<_> = g.edges.iter().map(|e| (e.i, e.j)).collect();
            prop_assert_eq!(back, orig);
        }

        #[test]
        fn clustering_is_translation_invariant(seed in 0u64..500, shift in -50.0..50.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats: Vec<Vec<f64>> = (0..30)
                .map(|i| vec![(i % 3) as f64 * 4.0 + rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.1])
                .collect();
            let shifted: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|v| v + shift).collect()).collect();
            let a = cluster_parts(&feats, 3, seed).unwrap();
            let b = cluster_parts(&shifted, 3, seed).unwrap();
            prop_assert_eq!(a.assignments, b.assignments);
        }

        #[test]
        fn clustering_is_a_fixed_point(seed in 0u64..500, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats: Vec<Vec<f64>> = (0..40)
                .map(|i| vec![(i % 4) as f64 * 3.0 + rng.random::<f64>(), rng.random::<f64>()])
                .collect();
            let d = cluster_parts(&feats, k, seed).unwrap();
            prop_assert_eq!(d.part_sizes.iter().sum::<usize>(), 40);
            prop_assert!(d.part_sizes.iter().all(|&s| s > 0));
            let data = standardize(&feats);
            for (i, p) in data.iter().enumerate() {
                let own = dist2(p, &d.centroids[d.assignments[i]]);
                for c in &d.centroids {
                    prop_assert!(own <= dist2(p, c) + 1e-9);
                }
            }
        }
    }
}
