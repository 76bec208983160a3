//! Per-class k-means over pretrained features.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::nnkit::FeatureTap;
use crate::{invalid, PartitionedModel, Result};

pub const MAX_ITERS: usize = 100;
const MAX_REPAIRS: usize = 3;

/// Clusters Γ_ij for every class i, with labels `i·K + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterIndex {
    pub k: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub feature_checksum: String,
    /// `classes[i][j]` holds the dataset indices of cluster (i, j), ascending.
    pub classes: Vec<Vec<Vec<usize>>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ClusterIndex {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn cluster_label(&self, class: usize, j: usize) -> usize {
        class * self.k + j
    }

    /// Total number of clusters (sum of effective K over classes).
    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(class, j, members)` for every cluster, class-major.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &[usize])> + '_ {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(i, cl)| cl.iter().enumerate().map(move |(j, m)| (i, j, m.as_slice())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    centroids
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus_init(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(j)));
        }
    }
    centroids
}

/// Lloyd iterations from a k-means++ start. Empty clusters are re-seeded at
/// the point farthest from its centroid, up to three times; clusters still
/// empty after that are left empty.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(invalid(format!("k={k} must lie in [1, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut repairs = 0;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.rows().into_iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            dists[i] = d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        for (i, p) in points.rows().into_iter().enumerate() {
            counts[assignments[i]] += 1;
            let mut row = sums.row_mut(assignments[i]);
            row += &p;
        }
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() && repairs < MAX_REPAIRS {
            repairs += 1;
            for j in empty {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]));
                if let Some(far) = far {
                    counts[assignments[far]] -= 1;
                    counts[j] = 1;
                    assignments[far] = j;
                    dists[far] = 0.0;
                    centroids.row_mut(j).assign(&points.row(far));
                }
            }
            continue;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                centroids.row_mut(j).assign(&mean);
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .rows()
        .into_iter()
        .zip(&assignments)
        .map(|(p, &j)| sq_dist(p, centroids.row(j)))
        .sum();
    Ok(KMeans {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

fn all_identical(points: &Array2<f64>) -> bool {
    let first = points.row(0);
    points.rows().into_iter().all(|r| r == first)
}

/// Cluster each class's rows of `features` (aligned with `labels`) into `k`
/// groups.
pub fn cluster_features(
    features: &Array2<f64>,
    labels: &[usize],
    class_count: usize,
    k: usize,
    seed: u64,
) -> Result<ClusterIndex> {
    if features.nrows() != labels.len() {
        return Err(invalid("feature rows and labels differ in length"));
    }
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    let mut warnings = Vec::new();
    let mut classes = Vec::with_capacity(class_count);
    for class in 0..class_count {
        let view: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if view.len() < k {
            return Err(invalid(format!(
                "K={k} exceeds size {} of class {class}",
                view.len()
            )));
        }
        let pts = features.select(Axis(0), &view);
        if k == 1 || all_identical(&pts) {
            if k > 1 {
                warnings.push(format!("class {class}: identical features, using one cluster"));
            }
            classes.push(vec![view]);
            continue;
        }
        let km = kmeans(&pts, k, seed ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), MAX_ITERS)?;
        let mut groups = vec![Vec::new(); k];
        for (pos, &j) in km.assignments.iter().enumerate() {
            groups[j].push(view[pos]);
        }
        let before = groups.len();
        groups.retain(|g| !g.is_empty());
        if groups.len() < before {
            warnings.push(format!("class {class}: effective K reduced to {}", groups.len()));
        }
        classes.push(groups);
    }
    let mut h = Sha256::new();
    for v in features.iter() {
        h.update(v.to_le_bytes());
    }
    Ok(ClusterIndex {
        k,
        seed,
        feature_dim: features.ncols(),
        feature_checksum: hex::encode(h.finalize()),
        classes,
        warnings,
    })
}

/// Per-class k-means on the penultimate features of the pretrained model.
pub fn cluster_per_class(
    ds: &LabeledDataset,
    model: &mut PartitionedModel,
    k: usize,
    seed: u64,
) -> Result<ClusterIndex> {
    let features = model.features(&ds.images, FeatureTap::Penultimate)?;
    cluster_features(&features, &ds.labels, ds.class_count, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_obvious_groups_are_found() {
        let f = array![[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0], [0.0, 0.1]];
        let km = kmeans(&f, 2, 3, 50).unwrap();
        assert_eq!(km.assignments[0], km.assignments[1]);
        assert_eq!(km.assignments[0], km.assignments[4]);
        assert_eq!(km.assignments[2], km.assignments[3]);
        assert_ne!(km.assignments[0], km.assignments[2]);
    }

    #[test]
    fn k_one_is_the_class_view() {
        let f = array![[0.0], [1.0], [2.0], [3.0]];
        let idx = cluster_features(&f, &[0, 1, 0, 1], 2, 1, 0).unwrap();
        assert_eq!(idx.classes, vec![vec![vec![0, 2]], vec![vec![1, 3]]]);
        assert_eq!(idx.cluster_label(1, 0), 1);
    }

    #[test]
    fn identical_features_fall_back_to_one_cluster() {
        let f = array![[1.0], [1.0], [1.0]];
        let idx = cluster_features(&f, &[0, 0, 0], 1, 2, 0).unwrap();
        assert_eq!(idx.classes[0].len(), 1);
        assert_eq!(idx.warnings.len(), 1);
    }

    #[test]
    fn k_above_class_size_is_rejected() {
        let f = array![[1.0], [2.0]];
        assert!(cluster_features(&f, &[0, 1], 2, 2, 0).is_err());
    }
}
