//! Reduced retain set construction and its compression ratio η = N_r / N_R.

use std::collections::BTreeSet;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterIndex;
use crate::condense::CondensedSet;
use crate::data::LabeledDataset;
use crate::nnkit::NnError;
use crate::{invalid, Error, Result, Samples};

/// Residual real members of forget-touched clusters plus the condensed
/// images of untouched clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedRetainSet {
    /// Dataset indices, ascending.
    pub real_indices: Vec<usize>,
    pub real_labels: Vec<usize>,
    /// Rows of the condensed set.
    pub condensed_rows: Vec<usize>,
    pub condensed_labels: Vec<usize>,
    pub touched_clusters: usize,
}

impl ReducedRetainSet {
    pub fn n_r(&self) -> usize {
        self.real_indices.len() + self.condensed_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_r() == 0
    }

    /// Materialize as training samples: real images first, then condensed.
    pub fn samples(&self, ds: &LabeledDataset, condensed: &CondensedSet) -> Result<Samples> {
        let real = Samples {
            images: ds.images.select(Axis(0), &self.real_indices),
            labels: self.real_labels.clone(),
        };
        let syn = Samples {
            images: condensed.images.select(Axis(0), &self.condensed_rows),
            labels: self.condensed_labels.clone(),
        };
        Ok(real.concat(&syn)?)
    }
}

/// Single pass over clusters: untouched clusters emit their condensed
/// image, touched clusters emit their members minus the forget indices.
pub fn collect_reduced_retain(
    clusters: &ClusterIndex,
    condensed: &CondensedSet,
    forget: &[usize],
    ds: &LabeledDataset,
) -> Result<ReducedRetainSet> {
    if condensed.len() != clusters.len() {
        return Err(Error::Mismatch(format!(
            "{} clusters but {} condensed images",
            clusters.len(),
            condensed.len()
        )));
    }
    if let Some(&bad) = forget.iter().find(|&&f| f >= ds.len()) {
        return Err(invalid(format!("forget index {bad} outside dataset of {}", ds.len())));
    }
    let forget: BTreeSet<usize> = forget.iter().copied().collect();
    let mut out = ReducedRetainSet {
        real_indices: Vec::new(),
        real_labels: Vec::new(),
        condensed_rows: Vec::new(),
        condensed_labels: Vec::new(),
        touched_clusters: 0,
    };
    for (row, (i, j, members)) in clusters.iter().enumerate() {
        if condensed.clusters[row] != (i, j) {
            return Err(Error::Mismatch(format!(
                "condensed row {row} is cluster {:?}, expected {:?}",
                condensed.clusters[row],
                (i, j)
            )));
        }
        if members.iter().any(|m| forget.contains(m)) {
            out.touched_clusters += 1;
            out.real_indices.extend(members.iter().filter(|m| !forget.contains(m)));
        } else {
            out.condensed_rows.push(row);
            out.condensed_labels.push(condensed.labels[row]);
        }
    }
    out.real_indices.sort_unstable();
    out.real_labels = out.real_indices.iter().map(|&r| ds.labels[r]).collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaEstimate {
    /// N_r / N_R of an actual collection, when one was run.
    pub empirical: Option<f64>,
    /// Leading term of the balanced-cluster bound (remainder excluded).
    pub analytic_main: f64,
    pub mc_mean: f64,
    pub mc_std: f64,
    pub trials: usize,
    pub threshold: Option<f64>,
}

fn clusters_total(c: usize, k: usize) -> Result<usize> {
    let ck = c * k;
    if ck == 0 {
        return Err(invalid("c·K must be positive"));
    }
    Ok(ck)
}

/// `(1 − 1/cK)^(N_D − cK) · cK / N_R`, evaluated in the log domain. The
/// big-O remainder of the bound is not included.
pub fn eta_analytic(c: usize, k: usize, n_d: usize, n_r: usize) -> Result<f64> {
    let ck = clusters_total(c, k)? as f64;
    if n_r == 0 || n_r > n_d {
        return Err(invalid(format!("N_R={n_r} must lie in [1, N_D={n_d}]")));
    }
    let exponent = n_d as f64 - ck;
    let survive = if ck == 1.0 {
        if exponent == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (exponent * (-1.0 / ck).ln_1p()).exp()
    };
    Ok(survive * ck / n_r as f64)
}

/// `N_D − cK·ln(cK) + 1`: retain sizes above this keep some clusters
/// untouched in expectation.
pub fn min_retain_threshold(c: usize, k: usize, n_d: usize) -> Result<f64> {
    let ck = clusters_total(c, k)?;
    if ck < 2 {
        return Err(invalid("threshold needs c·K ≥ 2"));
    }
    let ck = ck as f64;
    Ok(n_d as f64 - ck * ck.ln() + 1.0)
}

/// `m·H(m)`, the expected number of uniform draws to see all `m` clusters.
pub fn coupon_collector_expected(m: usize) -> f64 {
    m as f64 * (1..=m).map(|i| 1.0 / i as f64).sum::<f64>()
}

/// Monte-Carlo mean and standard deviation of the draw count at which all
/// `m` clusters have been hit, drawing clusters uniformly with replacement.
pub fn coupon_collector_mc(m: usize, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if m == 0 || trials == 0 {
        return Err(invalid("coupon collector needs m ≥ 1 and trials ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = vec![0u32; m];
    let draws: Vec<f64> = (1..=trials as u32)
        .map(|t| {
            let (mut hit, mut n) = (0, 0u64);
            while hit < m {
                let c = rng.random_range(0..m);
                if seen[c] != t {
                    seen[c] = t;
                    hit += 1;
                }
                n += 1;
            }
            n as f64
        })
        .collect();
    Ok(mean_std(&draws))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Simulate uniform forget placement over `c·K` equal clusters of
/// `N_D / cK` samples and apply the collection rule. η is defined as 0 when
/// nothing is retained.
pub fn eta_monte_carlo(c: usize, k: usize, n_d: usize, n_f: usize, trials: usize, seed: u64) -> Result<EtaEstimate> {
    let ck = clusters_total(c, k)?;
    if n_d % ck != 0 {
        return Err(invalid(format!("N_D={n_d} is not divisible by c·K={ck}")));
    }
    if n_f > n_d || trials == 0 {
        return Err(invalid("need N_F ≤ N_D and at least one trial"));
    }
    let size = n_d / ck;
    let n_r = n_d - n_f;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; ck];
    let samples: Vec<f64> = (0..trials)
        .map(|_| {
            if n_r == 0 {
                return 0.0;
            }
            hits.iter_mut().for_each(|h| *h = 0);
            for f in rand::seq::index::sample(&mut rng, n_d, n_f) {
                hits[f / size] += 1;
            }
            let kept: usize = hits.iter().map(|&h| if h == 0 { 1 } else { size - h }).sum();
            kept as f64 / n_r as f64
        })
        .collect();
    let (mc_mean, mc_std) = mean_std(&samples);
    let analytic_main = if n_r > 0 { eta_analytic(c, k, n_d, n_r)? } else { 0.0 };
    Ok(EtaEstimate {
        empirical: None,
        analytic_main,
        mc_mean,
        mc_std,
        trials,
        threshold: min_retain_threshold(c, k, n_d).ok(),
    })
}

/// η-thresholded epoch rule: more than 0.7 → 30 epochs, above 0.4 → 20,
/// otherwise 10.
pub fn epochs_for_eta(eta: f64) -> Result<usize> {
    if !eta.is_finite() {
        return Err(NnError::Config(format!("η must be finite, got {eta}")).into());
    }
    Ok(if eta > 0.7 {
        30
    } else if eta > 0.4 {
        20
    } else {
        10
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_edge_cases() {
        assert_eq!(eta_analytic(5, 2, 10, 10).unwrap(), 1.0);
        let v = eta_analytic(2, 2, 16, 16).unwrap();
        assert!((v - 0.75f64.powi(12) * 4.0 / 16.0).abs() < 1e-15);
        assert!(eta_analytic(0, 3, 10, 5).is_err());
    }

    #[test]
    fn threshold_formula() {
        let t = min_retain_threshold(10, 45, 50000).unwrap();
        assert!((t - (50001.0 - 450.0 * 450f64.ln())).abs() < 1e-9);
        assert!((t - 47251.8386).abs() < 1e-3);
    }

    #[test]
    fn monte_carlo_extremes_are_exact() {
        let none = eta_monte_carlo(2, 2, 16, 0, 50, 1).unwrap();
        assert_eq!(none.mc_mean, 4.0 / 16.0);
        assert_eq!(none.mc_std, 0.0);
        let all = eta_monte_carlo(2, 2, 16, 16, 50, 1).unwrap();
        assert_eq!((all.mc_mean, all.mc_std), (0.0, 0.0));
        assert!(eta_monte_carlo(3, 1, 16, 2, 5, 0).is_err());
    }

    #[test]
    fn epoch_rule_boundaries() {
        assert_eq!(epochs_for_eta(0.71).unwrap(), 30);
        assert_eq!(epochs_for_eta(0.7).unwrap(), 20);
        assert_eq!(epochs_for_eta(0.4).unwrap(), 10);
    }
}
