#![allow(dead_code)]

use ndarray::IxDyn;
use serde_json::Value;
use unforge::clustering::ClusterIndex;
use unforge::condense::{CondenseMethod, CondensedSet};
use unforge::data::LabeledDataset;
use unforge::Tensor;

/// Dataset whose image `i` is filled with `i / 1024`.
pub fn indexed_dataset(labels: &[usize], classes: usize) -> LabeledDataset {
    let n = labels.len();
    let mut images = Tensor::zeros(IxDyn(&[n, 1, 2, 2]));
    for i in 0..n {
        images.index_axis_mut(ndarray::Axis(0), i).fill(i as f64 / 1024.0);
    }
    LabeledDataset::new("fixture", images, labels.to_vec(), classes).unwrap()
}

/// Cluster index from explicit member lists per class.
pub fn index_from(classes: Vec<Vec<Vec<usize>>>, k: usize) -> ClusterIndex {
    ClusterIndex {
        k,
        seed: 0,
        feature_dim: 1,
        feature_checksum: String::new(),
        classes,
        warnings: Vec::new(),
    }
}

/// One condensed image per cluster, filled with `0.5 + row / 1024`.
pub fn condensed_for(idx: &ClusterIndex) -> CondensedSet {
    let keys: Vec<(usize, usize)> = idx.iter().map(|(i, j, _)| (i, j)).collect();
    let mut images = Tensor::zeros(IxDyn(&[keys.len(), 1, 2, 2]));
    for r in 0..keys.len() {
        images.index_axis_mut(ndarray::Axis(0), r).fill(0.5 + r as f64 / 1024.0);
    }
    CondensedSet {
        method: CondenseMethod::Fdm,
        k: idx.k,
        images,
        labels: keys.iter().map(|k| k.0).collect(),
        clusters: keys,
        meta: Value::Null,
    }
}

/// Cut each class's index list into `k` consecutive chunks of
/// near-equal size.
pub fn chunked_index(labels: &[usize], classes: usize, k: usize) -> ClusterIndex {
    let mut out = Vec::new();
    for c in 0..classes {
        let view: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let n = view.len();
        let groups: Vec<Vec<usize>> = (0..k)
            .map(|j| view[j * n / k..(j + 1) * n / k].to_vec())
            .filter(|g| !g.is_empty())
            .collect();
        out.push(groups);
    }
    index_from(out, k)
}

/// All `r`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(r);
    fn rec(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    rec(0, n, r, &mut cur, &mut out);
    out
}
