//! Exact one-dimensional k-means for k ≤ 3.
//!
//! In one dimension every optimal k-means partition is contiguous in sorted
//! order, so the optimum is found by enumerating split points between
//! distinct values. This has no seed dependence and no local minima.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Clustering of a value list. Labels index `centroids`, which are ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans1d<T> {
    pub labels: Vec<usize>,
    pub centroids: Vec<T>,
    /// Within-cluster sum of squared deviations of the chosen partition.
    pub sse: T,
    /// Fewer distinct values than requested clusters; `centroids.len() < k`.
    pub degenerate: bool,
}

impl<T: Scalar> KMeans1d<T> {
    pub fn cluster_count(&self) -> usize {
        self.centroids.len()
    }

    /// Membership of the highest-centroid cluster.
    pub fn top_cluster(&self) -> Vec<bool> {
        let top = self.centroids.len().saturating_sub(1);
        self.labels.iter().map(|&l| l == top).collect()
    }
}

struct Group<T> {
    value: T,
    count: usize,
}

/// Prefix sums over distinct-value groups, centred on the global mean.
struct Prefix<T> {
    n: Vec<T>,
    s: Vec<T>,
    ss: Vec<T>,
}

impl<T: Scalar> Prefix<T> {
    fn new(groups: &[Group<T>], shift: T) -> Self {
        let mut n = vec![T::zero()];
        let mut s = vec![T::zero()];
        let mut ss = vec![T::zero()];
        for g in groups {
            let c = T::from_count(g.count);
            let x = g.value - shift;
            n.push(*n.last().unwrap() + c);
            s.push(*s.last().unwrap() + c * x);
            ss.push(*ss.last().unwrap() + c * x * x);
        }
        Self { n, s, ss }
    }

    /// SSE of groups `[a, b)`.
    fn sse(&self, a: usize, b: usize) -> T {
        let n = self.n[b] - self.n[a];
        if n <= T::zero() {
            return T::zero();
        }
        let s = self.s[b] - self.s[a];
        let v = self.ss[b] - self.ss[a] - s * s / n;
        v.max(T::zero())
    }
}

/// Relative slack under which two partition costs count as tied; ties go to
/// the lexicographically first split.
pub(crate) fn tie_tolerance<T: Scalar>(total_sse: T) -> T {
    T::lit(1e-10) * (total_sse + T::lit(1e-30))
}

/// Exact 1-D k-means for `k ∈ {1, 2, 3}`. Panics on other `k` or NaN input.
pub fn kmeans_1d<T: Scalar>(values: &[T], k: usize) -> KMeans1d<T> {
    assert!((1..=3).contains(&k), "kmeans_1d supports k in 1..=3, got {k}");
    assert!(values.iter().all(|v| !v.is_nan()), "kmeans_1d input contains NaN");
    if values.is_empty() {
        return KMeans1d {
            labels: Vec::new(),
            centroids: Vec::new(),
            sse: T::zero(),
            degenerate: true,
        };
    }

    let mut sorted: Vec<T> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut groups: Vec<Group<T>> = Vec::new();
    for v in sorted {
        match groups.last_mut() {
            Some(g) if g.value == v => g.count += 1,
            _ => groups.push(Group { value: v, count: 1 }),
        }
    }
    let u = groups.len();
    let clusters = k.min(u);
    let mean = values.iter().copied().sum::<T>() / T::from_count(values.len());
    let prefix = Prefix::new(&groups, mean);
    let total = prefix.sse(0, u);
    let tol = tie_tolerance(total);

    // boundaries[i] = first group index of cluster i+1
    let boundaries: Vec<usize> = match clusters {
        1 => vec![],
        2 if u == 2 => vec![1],
        2 => {
            let mut best = (T::infinity(), 1);
            for s in 1..u {
                let c = prefix.sse(0, s) + prefix.sse(s, u);
                if c < best.0 - tol {
                    best = (c, s);
                }
            }
            vec![best.1]
        }
        3 => {
            let mut best = (T::infinity(), 1, 2);
            for s1 in 1..u - 1 {
                let left = prefix.sse(0, s1);
                for s2 in s1 + 1..u {
                    let c = left + prefix.sse(s1, s2) + prefix.sse(s2, u);
                    if c < best.0 - tol {
                        best = (c, s1, s2);
                    }
                }
            }
            vec![best.1, best.2]
        }
        _ => unreachable!(),
    };

    let mut edges = vec![0];
    edges.extend(&boundaries);
    edges.push(u);
    let mut centroids = Vec::with_capacity(clusters);
    let mut sse = T::zero();
    for w in edges.windows(2) {
        let n = prefix.n[w[1]] - prefix.n[w[0]];
        let s = prefix.s[w[1]] - prefix.s[w[0]];
        centroids.push(s / n + mean);
        sse = sse + prefix.sse(w[0], w[1]);
    }

    // thresholds: the lowest value of each cluster above the first
    let lower_bounds: Vec<T> = boundaries.iter().map(|&b| groups[b].value).collect();
    let labels = values
        .iter()
        .map(|&v| lower_bounds.iter().take_while(|&&lb| v >= lb).count())
        .collect();

    KMeans1d {
        labels,
        centroids,
        sse,
        degenerate: u < k,
    }
}
