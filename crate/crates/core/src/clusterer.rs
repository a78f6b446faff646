//! Seeded K-Means over code vectors, intra-similarity filtering and
//! representative selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{squared_distance, CodeVector};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const DEFAULT_REPRESENTATIVES: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("no vectors to cluster")]
    EmptyInput,
    #[error("k = {k} exceeds the {n} available vectors")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("cluster has {} members, fewer than the {wanted} requested", available.len())]
    ClusterTooSmall {
        wanted: usize,
        available: Vec<MemberRef>,
    },
}

/// Which basic unit a vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemberRef {
    pub package: String,
    pub file: String,
    /// Index of the unit within its file.
    pub unit: usize,
}

#[derive(Debug, Clone)]
pub struct ClusterPoint {
    pub vector: CodeVector,
    pub member: MemberRef,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Mean of 1 / (1 + euclidean distance to the centroid).
    #[default]
    InverseDistance,
    /// Mean cosine similarity to the centroid, clamped to [0, 1].
    CosineMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeCluster {
    pub id: usize,
    pub member_refs: Vec<MemberRef>,
    /// Euclidean distance of each member to the centroid, aligned with `member_refs`.
    pub distances: Vec<f64>,
    pub centroid: Vec<f64>,
    pub intra_similarity: f64,
}

impl CodeCluster {
    /// Builds a cluster whose centroid is the mean of `vectors`.
    pub fn from_members(
        id: usize,
        vectors: &[&[f64]],
        refs: Vec<MemberRef>,
        mode: SimilarityMode,
    ) -> Self {
        assert!(!vectors.is_empty() && vectors.len() == refs.len());
        let centroid = mean(vectors);
        Self::with_centroid(id, vectors, refs, centroid, mode)
    }

    fn with_centroid(
        id: usize,
        vectors: &[&[f64]],
        refs: Vec<MemberRef>,
        centroid: Vec<f64>,
        mode: SimilarityMode,
    ) -> Self {
        let distances: Vec<f64> = vectors
            .iter()
            .map(|v| squared_distance(v, &centroid).sqrt())
            .collect();
        let intra_similarity = intra_similarity(vectors, &centroid, &distances, mode);
        Self {
            id,
            member_refs: refs,
            distances,
            centroid,
            intra_similarity,
        }
    }

    pub fn len(&self) -> usize {
        self.member_refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_refs.is_empty()
    }
}

fn intra_similarity(
    vectors: &[&[f64]],
    centroid: &[f64],
    distances: &[f64],
    mode: SimilarityMode,
) -> f64 {
    let n = vectors.len() as f64;
    match mode {
        SimilarityMode::InverseDistance => {
            distances.iter().map(|d| 1.0 / (1.0 + d)).sum::<f64>() / n
        }
        SimilarityMode::CosineMean => {
            let cn = centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
            vectors
                .iter()
                .map(|v| {
                    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if vn == 0.0 || cn == 0.0 {
                        if vn == cn {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        let dot: f64 = v.iter().zip(centroid).map(|(a, b)| a * b).sum();
                        (dot / (vn * cn)).clamp(0.0, 1.0)
                    }
                })
                .sum::<f64>()
                / n
        }
    }
}

fn mean(vectors: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// `max(1, floor(sqrt(n / 2)))`.
pub fn default_k(n: usize) -> usize {
    (((n / 2) as f64).sqrt().floor() as usize).max(1)
}

/// Raw Lloyd output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lloyd {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Sum of squared member-centroid distances after each iteration.
    pub objective: Vec<f64>,
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(v, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, later ones sampled in
/// proportion to squared distance from the nearest chosen centre.
fn seed_centroids(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from k-means++ seeds. Stops when no assignment changes
/// or after `max_iter` iterations. Empty clusters keep their centroid.
pub fn lloyd(
    points: &[&[f64]],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Lloyd, ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if k == 0 {
        return Err(ClusterError::KZero);
    }
    if k > points.len() {
        return Err(ClusterError::KTooLarge { k, n: points.len() });
    }
    let dim = points[0].len();
    if let Some((index, p)) = points.iter().enumerate().find(|(_, p)| p.len() != dim) {
        return Err(ClusterError::DimensionMismatch {
            index,
            expected: dim,
            found: p.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    let mut objective: Vec<f64> = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let next: Vec<usize> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let changed = next != labels;
        labels = next;
        centroids = (0..k)
            .into_par_iter()
            .map(|c| {
                let members: Vec<&[f64]> = points
                    .iter()
                    .zip(&labels)
                    .filter(|(_, l)| **l == c)
                    .map(|(p, _)| *p)
                    .collect();
                if members.is_empty() {
                    centroids[c].clone()
                } else {
                    mean(&members)
                }
            })
            .collect();
        let sse: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, l)| squared_distance(p, &centroids[*l]))
            .sum();
        if let Some(prev) = objective.last() {
            debug_assert!(
                sse <= prev + 1e-9 * prev.abs().max(1.0),
                "objective rose: {prev} -> {sse}"
            );
        }
        objective.push(sse);
        if !changed {
            break;
        }
    }
    Ok(Lloyd {
        labels,
        centroids,
        iterations,
        objective,
    })
}

/// Clusters the points and returns the non-empty clusters, numbered from 0
/// in centroid order.
pub fn kmeans(
    points: &[ClusterPoint],
    k: usize,
    seed: u64,
    max_iter: usize,
    mode: SimilarityMode,
) -> Result<Vec<CodeCluster>, ClusterError> {
    let raw: Vec<&[f64]> = points.iter().map(|p| p.vector.values.as_slice()).collect();
    let fit = lloyd(&raw, k, seed, max_iter)?;
    let mut out = Vec::new();
    for (c, centroid) in fit.centroids.into_iter().enumerate() {
        let idx: Vec<usize> = (0..points.len()).filter(|&i| fit.labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let vectors: Vec<&[f64]> = idx.iter().map(|&i| raw[i]).collect();
        let refs = idx.iter().map(|&i| points[i].member.clone()).collect();
        out.push(CodeCluster::with_centroid(
            out.len(),
            &vectors,
            refs,
            centroid,
            mode,
        ));
    }
    Ok(out)
}

/// Keeps clusters with `intra_similarity >= threshold`.
pub fn filter_clusters(clusters: Vec<CodeCluster>, threshold: f64) -> Vec<CodeCluster> {
    clusters
        .into_iter()
        .filter(|c| c.intra_similarity >= threshold)
        .collect()
}

/// The `n` members nearest the centroid, taking at most one per package
/// until every package has been used. Ties break on (distance, package,
/// file, unit).
pub fn select_representatives(
    cluster: &CodeCluster,
    n: usize,
) -> Result<Vec<MemberRef>, ClusterError> {
    let mut order: Vec<usize> = (0..cluster.len()).collect();
    order.sort_by(|&a, &b| {
        cluster.distances[a]
            .total_cmp(&cluster.distances[b])
            .then_with(|| cluster.member_refs[a].cmp(&cluster.member_refs[b]))
    });
    if cluster.len() < n {
        return Err(ClusterError::ClusterTooSmall {
            wanted: n,
            available: order
                .iter()
                .map(|&i| cluster.member_refs[i].clone())
                .collect(),
        });
    }
    let mut picked: Vec<usize> = Vec::new();
    let mut packages = std::collections::BTreeSet::new();
    for &i in &order {
        if picked.len() == n {
            break;
        }
        if packages.insert(cluster.member_refs[i].package.as_str()) {
            picked.push(i);
        }
    }
    for &i in &order {
        if picked.len() == n {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_by_key(|i| order.iter().position(|o| o == i));
    Ok(picked
        .into_iter()
        .map(|i| cluster.member_refs[i].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: usize,
    pub intra_similarity: f64,
    pub retained: bool,
    pub member_refs: Vec<MemberRef>,
    pub representatives: Vec<MemberRef>,
}

/// JSON record of one clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterManifest {
    pub k: usize,
    /// How `k` was chosen: `default` or `config`.
    pub k_source: String,
    pub seed: u64,
    pub max_iter: usize,
    pub threshold: f64,
    pub similarity: SimilarityMode,
    pub points: usize,
    pub clusters: Vec<ClusterSummary>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn point(values: Vec<f64>, package: &str, unit: usize) -> ClusterPoint {
        ClusterPoint {
            vector: CodeVector::new(values, None),
            member: MemberRef {
                package: package.into(),
                file: "f.py".into(),
                unit,
            },
        }
    }

    fn sse(points: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
        (0..k)
            .map(|c| {
                let m: Vec<&[f64]> = points
                    .iter()
                    .zip(labels)
                    .filter(|(_, l)| **l == c)
                    .map(|(p, _)| p.as_slice())
                    .collect();
                if m.is_empty() {
                    return 0.0;
                }
                let mu = mean(&m);
                m.iter().map(|p| squared_distance(p, &mu)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn two_blobs_match_exhaustive_optimum() {
        let pts = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.0, 5.1]];
        // Oracle: every 2-partition of 4 points.
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << 4) - 1 {
            let labels: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
            let s = sse(&pts, &labels, 2);
            if s < best.0 {
                best = (s, mask);
            }
        }
        let oracle: Vec<bool> = (0..4).map(|i| (best.1 >> i) & 1 == 1).collect();
        let input: Vec<ClusterPoint> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| point(p.to_vec(), "p", i))
            .collect();
        let clusters = kmeans(&input, 2, 42, 500, SimilarityMode::InverseDistance).unwrap();
        assert_eq!(clusters.len(), 2);
        let side_of = |unit: usize| {
            clusters
                .iter()
                .position(|c| c.member_refs.iter().any(|m| m.unit == unit))
                .unwrap()
        };
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(side_of(i) == side_of(j), oracle[i] == oracle[j]);
            }
        }
    }

    #[test]
    fn identical_points_single_cluster() {
        let input: Vec<_> = (0..5).map(|i| point(vec![1.5, -2.0], "p", i)).collect();
        let clusters = kmeans(&input, 1, 42, 500, SimilarityMode::InverseDistance).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].centroid, vec![1.5, -2.0]);
        assert_eq!(clusters[0].intra_similarity, 1.0);
    }

    #[test]
    fn errors() {
        let input = vec![point(vec![1.0], "p", 0)];
        assert_eq!(
            kmeans(&[], 1, 42, 10, SimilarityMode::InverseDistance).unwrap_err(),
            ClusterError::EmptyInput
        );
        assert_eq!(
            kmeans(&input, 2, 42, 10, SimilarityMode::InverseDistance).unwrap_err(),
            ClusterError::KTooLarge { k: 2, n: 1 }
        );
        let mixed = vec![point(vec![1.0], "p", 0), point(vec![1.0, 2.0], "p", 1)];
        assert!(matches!(
            kmeans(&mixed, 1, 42, 10, SimilarityMode::InverseDistance),
            Err(ClusterError::DimensionMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn threshold_straddling_fixture() {
        let refs = |n: usize| {
            (0..n)
                .map(|u| MemberRef {
                    package: "p".into(),
                    file: "f".into(),
                    unit: u,
                })
                .collect()
        };
        let m = SimilarityMode::InverseDistance;
        // members at centroid +-d: similarity 1/(1+d)
        let a = CodeCluster::from_members(0, &[&[-0.1], &[0.1]], refs(2), m);
        let b = CodeCluster::from_members(1, &[&[9.8], &[10.2]], refs(2), m);
        let c = CodeCluster::from_members(2, &[&[-0.17], &[0.18]], refs(2), m);
        assert!((a.intra_similarity - 1.0 / 1.1).abs() < 1e-12);
        assert!((b.intra_similarity - 1.0 / 1.2).abs() < 1e-12);
        assert!((c.intra_similarity - 1.0 / 1.175).abs() < 1e-12);
        let kept: Vec<usize> = filter_clusters(vec![a, b, c], 0.85)
            .iter()
            .map(|c| c.id)
            .collect();
        assert_eq!(kept, [0, 2]);
    }

    #[test]
    fn similarity_formula_edges() {
        let r = |u| MemberRef {
            package: "p".into(),
            file: "f".into(),
            unit: u,
        };
        let single = CodeCluster::from_members(
            0,
            &[&[3.0, 4.0]],
            vec![r(0)],
            SimilarityMode::InverseDistance,
        );
        assert_eq!(single.intra_similarity, 1.0);
        let unit = CodeCluster::from_members(
            0,
            &[&[-1.0], &[1.0]],
            vec![r(0), r(1)],
            SimilarityMode::InverseDistance,
        );
        assert_eq!(unit.intra_similarity, 0.5);
        assert!(filter_clusters(vec![unit.clone()], 0.85).is_empty());
        assert_eq!(
            filter_clusters(vec![unit.clone(), single.clone()], 0.0).len(),
            2
        );
        assert_eq!(filter_clusters(vec![unit, single], 1.0).len(), 1);
    }

    #[test]
    fn representatives_prefer_distinct_packages() {
        // distances: a0 0.1, a1 0.2, b0 0.3, c0 0.4, b1 0.5
        let members = [("a", 0.1), ("a", 0.2), ("b", 0.3), ("c", 0.4), ("b", 0.5)];
        let vectors: Vec<Vec<f64>> = members.iter().map(|(_, d)| vec![*d]).collect();
        let refs: Vec<MemberRef> = members
            .iter()
            .enumerate()
            .map(|(i, (p, _))| MemberRef {
                package: p.to_string(),
                file: "f".into(),
                unit: i,
            })
            .collect();
        let mut cl = CodeCluster::from_members(
            0,
            &vectors.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            refs,
            SimilarityMode::InverseDistance,
        );
        cl.centroid = vec![0.0];
        cl.distances = members.iter().map(|(_, d)| *d).collect();
        let picked = select_representatives(&cl, 2).unwrap();
        assert_eq!(picked.iter().map(|m| m.unit).collect::<Vec<_>>(), [0, 2]);
        let one = select_representatives(&cl, 1).unwrap();
        assert_eq!(one[0].unit, 0);
        let four = select_representatives(&cl, 4).unwrap();
        assert_eq!(
            four.iter().map(|m| m.unit).collect::<Vec<_>>(),
            [0, 1, 2, 3]
        );
        match select_representatives(&cl, 9) {
            Err(ClusterError::ClusterTooSmall { available, .. }) => assert_eq!(available.len(), 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn default_k_values() {
        assert_eq!(default_k(0), 1);
        assert_eq!(default_k(1), 1);
        assert_eq!(default_k(8), 2);
        assert_eq!(default_k(200), 10);
    }

    proptest! {
        #[test]
        fn deterministic_and_objective_monotone(
            raw in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 2..40),
            k in 1usize..5,
        ) {
            let k = k.min(raw.len());
            let pts: Vec<&[f64]> = raw.iter().map(|v| v.as_slice()).collect();
            let a = lloyd(&pts, k, 42, 500).unwrap();
            let b = lloyd(&pts, k, 42, 500).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
            }
            prop_assert!(a.labels.iter().all(|l| *l < k));
        }
    }
}
