//! Accuracy, gradient-based instrumentation, membership inference, RBE
//! ranking and the Hessian spectrum diagnostic.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::collect::EtaEstimate;
use crate::grad::{cosine, mean_loss_gradient, per_sample_losses};
use crate::nnkit::loss::CrossEntropy;
use crate::nnkit::{build_model, train_segments, ArchSpec, Segment, SegmentMask, TrainConfig};
use crate::{invalid, Error, PartitionedModel, Result, Samples};

/// Default cap on samples per set for gradient-based metrics.
pub const GRADIENT_CAP: usize = 512;
const FOLDS: usize = 5;
const RIDGE: f64 = 1e-3;

/// Top-1 accuracy in percent.
pub fn accuracy(model: &mut PartitionedModel, samples: &Samples) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set for accuracy".into()));
    }
    let pred = model.predict(&samples.images)?;
    let hit = pred.iter().zip(&samples.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hit as f64 / samples.len() as f64)
}

/// Evenly spaced subsample of at most `cap` rows.
pub fn capped(samples: &Samples, cap: usize) -> Samples {
    if samples.len() <= cap {
        return samples.clone();
    }
    let idx: Vec<usize> = (0..cap).map(|i| i * samples.len() / cap).collect();
    samples.select(&idx)
}

/// `100·(1 − cos(g_R, g_F))`.
pub fn unlearning_metric_from_gradients(retain: &[f64], forget: &[f64]) -> Result<f64> {
    if retain.len() != forget.len() {
        return Err(Error::Mismatch("gradient lengths differ".into()));
    }
    cosine(retain, forget)
        .map(|c| 100.0 * (1.0 - c))
        .ok_or_else(|| Error::Degenerate("zero-norm gradient, unlearning metric undefined".into()))
}

/// Unlearning metric of `model` between mean retain and mean forget loss
/// gradients over the full parameter vector. Each set is capped at `cap`.
pub fn unlearning_metric(
    model: &mut PartitionedModel,
    retain: &Samples,
    forget: &Samples,
    cap: usize,
) -> Result<f64> {
    let (_, gr) = mean_loss_gradient(model, &capped(retain, cap))?;
    let (_, gf) = mean_loss_gradient(model, &capped(forget, cap))?;
    model.zero_grad();
    unlearning_metric_from_gradients(&gr, &gf)
}

/// `|loss − mean(|∇θ|)|`.
pub fn overfitting_metric_from_parts(loss: f64, grads: &[f64]) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Degenerate(format!("non-finite loss {loss}")));
    }
    let mean_abs = grads.iter().map(|g| g.abs()).sum::<f64>() / grads.len().max(1) as f64;
    Ok((loss - mean_abs).abs())
}

/// Overfitting metric of every sample (one backward pass each).
pub fn overfitting_metrics(model: &mut PartitionedModel, samples: &Samples) -> Result<Vec<f64>> {
    let out = (0..samples.len())
        .map(|i| {
            let (loss, g) = mean_loss_gradient(model, &samples.select(&[i]))?;
            overfitting_metric_from_parts(loss, &g)
        })
        .collect();
    model.zero_grad();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; the last bin is closed.
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            if v < lo || v > hi || !v.is_finite() {
                continue;
            }
            let b = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }

    pub fn of(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return Self::new(&[], bins, 0.0, 1.0);
        }
        Self::new(values, bins, lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmStats {
    pub mean: f64,
    pub min: f64,
    pub histogram: Histogram,
}

impl OmStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("overfitting metric values".into()));
        }
        Ok(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            histogram: Histogram::of(values, 20),
        })
    }
}

/// Mid-rank empirical CDF of `fit`, evaluated at `x`.
fn ecdf(fit: &[f64], x: f64) -> f64 {
    let lo = fit.partition_point(|&v| v < x);
    let hi = fit.partition_point(|&v| v <= x);
    (lo + hi) as f64 / (2.0 * fit.len() as f64)
}

/// Class-weighted, ridge-penalised one-feature logistic regression.
/// Returns `(bias, weight)`.
fn fit_logistic(x: &[f64], y: &[bool]) -> (f64, f64) {
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let neg = y.len() as f64 - pos;
    let n = y.len() as f64;
    let weight = |t: bool| if t { n / (2.0 * pos) } else { n / (2.0 * neg) };
    let (mut b, mut w) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (mut gb, mut gw) = (0.0, RIDGE * w);
        let (mut hbb, mut hbw, mut hww) = (1e-12, 0.0, RIDGE);
        for (&xi, &yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(b + w * xi)).exp());
            let s = weight(yi);
            let r = s * (p - if yi { 1.0 } else { 0.0 });
            gb += r;
            gw += r * xi;
            let c = s * p * (1.0 - p);
            hbb += c;
            hbw += c * xi;
            hww += c * xi * xi;
        }
        let det = hbb * hww - hbw * hbw;
        if det.abs() < 1e-300 {
            break;
        }
        let db = (hww * gb - hbw * gw) / det;
        let dw = (hbb * gw - hbw * gb) / det;
        b -= db;
        w -= dw;
        if db.abs() + dw.abs() < 1e-10 {
            break;
        }
    }
    (b, w)
}

fn balanced_accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0, 0, 0, 0);
    for (&a, &t) in pred.iter().zip(truth) {
        if t {
            p += 1;
            tp += a as usize;
        } else {
            n += 1;
            tn += (!a) as usize;
        }
    }
    50.0 * (tp as f64 / p as f64 + tn as f64 / n as f64)
}

/// Loss-threshold attacker: logistic regression on the mid-rank ECDF of
/// the loss.
#[derive(Debug, Clone)]
pub struct LossAttack {
    reference: Vec<f64>,
    bias: f64,
    weight: f64,
}

impl LossAttack {
    /// Fit with the ECDF taken over the training losses themselves.
    pub fn fit(member_losses: &[f64], other_losses: &[f64]) -> Result<Self> {
        let reference = member_losses.iter().chain(other_losses).copied().collect();
        Self::fit_with_reference(reference, member_losses, other_losses)
    }

    /// Fit with the ECDF taken over an unlabelled `reference` pool.
    pub fn fit_with_reference(mut reference: Vec<f64>, member_losses: &[f64], other_losses: &[f64]) -> Result<Self> {
        if member_losses.is_empty() || other_losses.is_empty() {
            return Err(Error::Degenerate("attack needs both members and non-members".into()));
        }
        reference.sort_by(f64::total_cmp);
        let x: Vec<f64> = member_losses
            .iter()
            .chain(other_losses)
            .map(|&v| ecdf(&reference, v))
            .collect();
        let y: Vec<bool> = (0..x.len()).map(|i| i < member_losses.len()).collect();
        let (bias, weight) = fit_logistic(&x, &y);
        Ok(Self { reference, bias, weight })
    }

    pub fn is_member(&self, loss: f64) -> bool {
        self.bias + self.weight * ecdf(&self.reference, loss) > 0.0
    }

    /// Balanced accuracy in percent on labelled losses.
    pub fn score(&self, member_losses: &[f64], other_losses: &[f64]) -> f64 {
        let pred: Vec<bool> = member_losses
            .iter()
            .chain(other_losses)
            .map(|&l| self.is_member(l))
            .collect();
        let truth: Vec<bool> = (0..pred.len()).map(|i| i < member_losses.len()).collect();
        balanced_accuracy(&pred, &truth)
    }
}

fn stratified_folds(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % FOLDS;
    }
    fold
}

/// Membership attack from losses alone: members are `forget`, non-members
/// are `test`. Balanced accuracy in percent, pooled over stratified 5-fold
/// out-of-fold predictions.
pub fn mia_logistic_from_losses(forget: &[f64], test: &[f64]) -> Result<f64> {
    if forget.len() < FOLDS || test.len() < FOLDS {
        return Err(Error::Degenerate(format!(
            "each side needs at least {FOLDS} samples, got {} and {}",
            forget.len(),
            test.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d1a);
    let ff = stratified_folds(forget.len(), &mut rng);
    let tf = stratified_folds(test.len(), &mut rng);
    // label-free ECDF over every loss, so held-out points keep distinct ranks
    let pool: Vec<f64> = forget.iter().chain(test).copied().collect();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for k in 0..FOLDS {
        let pick = |v: &[f64], f: &[usize], keep: bool| -> Vec<f64> {
            v.iter().zip(f).filter(|(_, &g)| (g == k) != keep).map(|(&x, _)| x).collect()
        };
        let attack = LossAttack::fit_with_reference(pool.clone(), &pick(forget, &ff, true), &pick(test, &tf, true))?;
        for l in pick(forget, &ff, false) {
            pred.push(attack.is_member(l));
            truth.push(true);
        }
        for l in pick(test, &tf, false) {
            pred.push(attack.is_member(l));
            truth.push(false);
        }
    }
    Ok(balanced_accuracy(&pred, &truth))
}

/// Logistic loss attack against `model`: forget samples are members,
/// `test` samples non-members.
pub fn mia_logistic(model: &mut PartitionedModel, forget: &Samples, test: &Samples) -> Result<f64> {
    let lf = per_sample_losses(model, forget)?;
    let lt = per_sample_losses(model, test)?;
    mia_logistic_from_losses(&lf, &lt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
}

/// Shadow-model attack. `population` is split into `shadow_count` disjoint
/// chunks; each shadow trains on half of its chunk and the other half is
/// its non-member pool. The pooled (loss, membership) records train one
/// attacker, scored on the target's `members` vs `non_members`.
pub fn mia_shadow(
    target: &mut PartitionedModel,
    members: &Samples,
    non_members: &Samples,
    population: &Samples,
    shadow_count: usize,
    cfg: &ShadowConfig,
) -> Result<f64> {
    if shadow_count == 0 {
        return Err(invalid("need at least one shadow model"));
    }
    let chunk = population.len() / shadow_count;
    if chunk / 2 < FOLDS {
        return Err(Error::Degenerate(format!(
            "population of {} is too small for {shadow_count} shadows",
            population.len()
        )));
    }
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::Empty("target membership sets".into()));
    }
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5ad0));
    let (mut ins, mut outs) = (Vec::new(), Vec::new());
    for s in 0..shadow_count {
        let part = &order[s * chunk..(s + 1) * chunk];
        let (tr, held) = part.split_at(chunk / 2);
        let train = population.select(tr);
        let out = population.select(held);
        let mut shadow = build_model(
            &cfg.arch,
            population.image_shape(),
            target.class_count,
            None,
            cfg.train.seed.wrapping_add(1 + s as u64),
        )?;
        let tc = TrainConfig {
            seed: cfg.train.seed.wrapping_add(101 + s as u64),
            ..cfg.train
        };
        train_segments(&mut shadow, &train, &tc, SegmentMask::ALL, &CrossEntropy)?;
        ins.extend(per_sample_losses(&mut shadow, &train)?);
        outs.extend(per_sample_losses(&mut shadow, &out)?);
    }
    let attack = LossAttack::fit(&ins, &outs)?;
    let lm = per_sample_losses(target, members)?;
    let ln = per_sample_losses(target, non_members)?;
    Ok(attack.score(&lm, &ln))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetKind {
    Random,
    Class,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RbeNormalization {
    /// Min-max over every method and architecture of the dataset.
    WithinDataset,
    /// Min-max inside each architecture separately.
    PerCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbeRow {
    pub method: String,
    pub arch: String,
    pub ra: f64,
    pub fa: f64,
    pub mia: f64,
    pub ut: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbeTable {
    pub rows: Vec<RbeRow>,
    pub weights: [f64; 4],
    pub normalization: RbeNormalization,
    /// Mean over architectures, keyed by method.
    pub rbe: BTreeMap<String, f64>,
}

impl RbeTable {
    /// Methods ordered from best (lowest) to worst.
    pub fn ranking(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self.rbe.iter().map(|(k, v)| (k.clone(), *v)).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1));
        v
    }
}

pub const RBE_WEIGHTS: [f64; 4] = [1.0, 0.5, 1.0, 1.0];

/// Relative best error. Per architecture, each metric becomes a distance
/// from its best value: RA from the maximum, FA from the reference
/// method's FA (random forgetting) or from 0 (class forgetting), MIA from
/// the value closest to 50, UT from the minimum. Columns are min-max
/// normalised (a constant column contributes 0), combined with weights
/// (1, 0.5, 1, 1) / 3.5, and averaged over architectures per method.
pub fn rbe(rows: &[RbeRow], kind: ForgetKind, reference: &str, norm: RbeNormalization) -> Result<RbeTable> {
    let mut archs: Vec<&str> = rows.iter().map(|r| r.arch.as_str()).collect();
    archs.sort_unstable();
    archs.dedup();
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    if methods.len() < 2 {
        return Err(invalid("RBE needs at least two methods"));
    }
    let mut errs = vec![[0.0; 4]; rows.len()];
    for arch in &archs {
        let cell: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].arch == *arch).collect();
        let best_ra = cell.iter().map(|&i| rows[i].ra).fold(f64::NEG_INFINITY, f64::max);
        let best_mia = cell.iter().map(|&i| (rows[i].mia - 50.0).abs()).fold(f64::INFINITY, f64::min);
        let best_ut = cell.iter().map(|&i| rows[i].ut).fold(f64::INFINITY, f64::min);
        let fa_ref = match kind {
            ForgetKind::Class => 0.0,
            ForgetKind::Random => cell
                .iter()
                .find(|&&i| rows[i].method == reference)
                .map(|&i| rows[i].fa)
                .ok_or_else(|| invalid(format!("reference method {reference} missing for {arch}")))?,
        };
        for &i in &cell {
            let r = &rows[i];
            errs[i] = [
                best_ra - r.ra,
                (r.fa - fa_ref).abs(),
                (r.mia - 50.0).abs() - best_mia,
                r.ut - best_ut,
            ];
        }
    }
    let groups: Vec<Vec<usize>> = match norm {
        RbeNormalization::WithinDataset => vec![(0..rows.len()).collect()],
        RbeNormalization::PerCell => archs
            .iter()
            .map(|a| (0..rows.len()).filter(|&i| rows[i].arch == *a).collect())
            .collect(),
    };
    let mut normed = vec![[0.0; 4]; rows.len()];
    for g in &groups {
        for m in 0..4 {
            let lo = g.iter().map(|&i| errs[i][m]).fold(f64::INFINITY, f64::min);
            let hi = g.iter().map(|&i| errs[i][m]).fold(f64::NEG_INFINITY, f64::max);
            for &i in g {
                normed[i][m] = if hi > lo { (errs[i][m] - lo) / (hi - lo) } else { 0.0 };
            }
        }
    }
    let wsum: f64 = RBE_WEIGHTS.iter().sum();
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let score = (0..4).map(|m| RBE_WEIGHTS[m] * normed[i][m]).sum::<f64>() / wsum;
        let e = acc.entry(r.method.clone()).or_insert((0.0, 0));
        e.0 += score;
        e.1 += 1;
    }
    Ok(RbeTable {
        rows: rows.to_vec(),
        weights: RBE_WEIGHTS,
        normalization: norm,
        rbe: acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub segment: Segment,
    pub layer: String,
    pub norm: f64,
}

/// Per-layer L2 norm of the per-sample loss gradient, averaged over the
/// first `max_samples` samples, shallow to deep. Only weight-bearing layers
/// (linear and convolution) are reported.
pub fn layer_gradient_profile(
    model: &mut PartitionedModel,
    samples: &Samples,
    max_samples: usize,
) -> Result<Vec<LayerGradient>> {
    let s = capped(samples, max_samples);
    if s.is_empty() {
        return Err(Error::Empty("sample set for gradient profile".into()));
    }
    let keep = |name: &str| name != "batchnorm2d";
    let mut sums: Vec<LayerGradient> = Vec::new();
    for i in 0..s.len() {
        mean_loss_gradient(model, &s.select(&[i]))?;
        let groups = model.layer_groups();
        if sums.is_empty() {
            sums = groups
                .iter()
                .filter(|g| keep(g.1))
                .map(|g| LayerGradient {
                    segment: g.0,
                    layer: g.1.to_string(),
                    norm: 0.0,
                })
                .collect();
        }
        for (slot, g) in sums.iter_mut().zip(groups.iter().filter(|g| keep(g.1))) {
            slot.norm += g.2
                .iter()
                .flat_map(|p| p.grad.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
        }
    }
    model.zero_grad();
    for slot in &mut sums {
        slot.norm /= s.len() as f64;
    }
    Ok(sums)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of mid-ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// One-sided one-sample t-test of `mean(values) < 0`; returns the p-value.
pub fn t_test_negative_mean(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(invalid("t-test needs at least two values"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(if mean < 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n as f64 - 1.0).map_err(|e| invalid(e.to_string()))?;
    Ok(dist.cdf(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianDiagnostic {
    pub eigenvalues: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    /// `None` when the Hessian is not positive definite.
    pub variance_inverse: Option<f64>,
    pub positive_definite: bool,
    pub gradient_norm: f64,
}

fn population_variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Dense Hessian by central differences of an analytic gradient,
/// symmetrised.
pub fn hessian_from_gradient<F>(theta: &[f64], mut grad: F, h: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = theta.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut t = theta.to_vec();
    for j in 0..n {
        t[j] = theta[j] + h;
        let up = grad(&t)?;
        t[j] = theta[j] - h;
        let down = grad(&t)?;
        t[j] = theta[j];
        for i in 0..n {
            hess[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Spectrum summary of a symmetric matrix.
pub fn eigen_diagnostic(hess: DMatrix<f64>, gradient_norm: f64) -> HessianDiagnostic {
    let mut eig: Vec<f64> = SymmetricEigen::new(hess).eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    let positive_definite = eig.iter().all(|&l| l > 0.0);
    let inv: Vec<f64> = eig.iter().map(|l| 1.0 / l).collect();
    HessianDiagnostic {
        mean: eig.iter().sum::<f64>() / eig.len() as f64,
        variance: population_variance(&eig),
        variance_inverse: positive_definite.then(|| population_variance(&inv)),
        positive_definite,
        gradient_norm,
        eigenvalues: eig,
    }
}

pub const HESSIAN_MAX_PARAMS: usize = 200;

/// Eigen-spectrum of the mean-loss Hessian of a tiny model.
pub fn hessian_eigen_diagnostic(model: &mut PartitionedModel, samples: &Samples) -> Result<HessianDiagnostic> {
    let n = model.param_count();
    if n > HESSIAN_MAX_PARAMS {
        return Err(invalid(format!(
            "Hessian diagnostic supports at most {HESSIAN_MAX_PARAMS} parameters, model has {n}"
        )));
    }
    let theta = model.flat_params();
    let (_, g0) = mean_loss_gradient(model, samples)?;
    let gradient_norm = g0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let hess = hessian_from_gradient(
        &theta,
        |t| {
            model.set_flat_params(t)?;
            Ok(mean_loss_gradient(model, samples)?.1)
        },
        1e-5,
    )?;
    model.set_flat_params(&theta)?;
    model.zero_grad();
    Ok(eigen_diagnostic(hess, gradient_norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub method: String,
    pub ra: f64,
    pub fa: f64,
    pub mia: f64,
    pub ut_seconds: f64,
    pub test_accuracy: Option<f64>,
    pub um: Option<f64>,
    pub um_note: Option<String>,
    pub om: Option<OmStats>,
    pub eta: Option<EtaEstimate>,
}

/// Data an [`UnlearnReport`] is measured on.
pub struct ReportData<'a> {
    pub retain: &'a Samples,
    pub forget: &'a Samples,
    /// Non-members for the membership attack.
    pub mia_reference: &'a Samples,
    pub eval: Option<&'a Samples>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub unlearning_metric: bool,
    pub overfitting_metric: bool,
    pub gradient_cap: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            unlearning_metric: true,
            overfitting_metric: false,
            gradient_cap: GRADIENT_CAP,
        }
    }
}

pub fn build_report(
    method: &str,
    model: &mut PartitionedModel,
    data: &ReportData<'_>,
    ut_seconds: f64,
    opts: &ReportOptions,
) -> Result<UnlearnReport> {
    let ra = accuracy(model, data.retain)?;
    let fa = accuracy(model, data.forget)?;
    let mia = mia_logistic(model, data.forget, data.mia_reference)?;
    let test_accuracy = data.eval.map(|e| accuracy(model, e)).transpose()?;
    let (um, um_note) = if opts.unlearning_metric {
        match unlearning_metric(model, data.retain, data.forget, opts.gradient_cap) {
            Ok(v) => (Some(v), None),
            Err(Error::Degenerate(msg)) => (None, Some(msg)),
            Err(e) => return Err(e),
        }
    } else {
        (None, None)
    };
    let om = if opts.overfitting_metric {
        let f = capped(data.forget, opts.gradient_cap);
        Some(OmStats::of(&overfitting_metrics(model, &f)?)?)
    } else {
        None
    };
    Ok(UnlearnReport {
        method: method.to_string(),
        ra,
        fa,
        mia,
        ut_seconds,
        test_accuracy,
        um,
        um_note,
        om,
        eta: None,
    })
}

/// Mean per-sample loss of each split, useful for quick audits.
pub fn mean_losses(model: &mut PartitionedModel, sets: &[&Samples]) -> Result<Vec<f64>> {
    sets.iter()
        .map(|s| {
            let l = per_sample_losses(model, s)?;
            Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
        })
        .collect()
}

/// Rows of `samples` whose label is in `classes`.
pub fn restrict_to_classes(samples: &Samples, classes: &[usize]) -> Samples {
    let idx: Vec<usize> = (0..samples.len())
        .filter(|&i| classes.contains(&samples.labels[i]))
        .collect();
    Samples {
        images: samples.images.select(Axis(0), &idx),
        labels: idx.iter().map(|&i| samples.labels[i]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unlearning_metric_identities() {
        let g = [1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((unlearning_metric_from_gradients(&g, &g).unwrap()).abs() < 1e-12);
        assert!((unlearning_metric_from_gradients(&g, &neg).unwrap() - 200.0).abs() < 1e-12);
        assert!((unlearning_metric_from_gradients(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 100.0).abs() < 1e-12);
        assert!(matches!(
            unlearning_metric_from_gradients(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn overfitting_metric_examples() {
        assert_eq!(overfitting_metric_from_parts(0.0, &[0.0; 4]).unwrap(), 0.0);
        assert!((overfitting_metric_from_parts(0.5, &[0.1, -0.1, 0.1]).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn separated_losses_are_almost_always_caught() {
        // only held-out points adjacent to the class gap are ambiguous in rank space
        let f: Vec<f64> = (0..500).map(|i| i as f64 * 0.01).collect();
        let t: Vec<f64> = (0..500).map(|i| 50.0 + i as f64 * 0.01).collect();
        assert!(mia_logistic_from_losses(&f, &t).unwrap() >= 99.5);
    }

    #[test]
    fn spearman_of_reversed_order_is_minus_one() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[9.0, 5.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_hessian_spectrum() {
        let d = eigen_diagnostic(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 4.0])), 0.0);
        assert_eq!(d.mean, 3.0);
        assert!(d.variance_inverse.unwrap() < d.variance);
    }

    #[test]
    fn histogram_counts_every_value_once() {
        let h = Histogram::of(&[0.0, 0.5, 1.0, 1.0], 2);
        assert_eq!(h.counts, vec![1, 3]);
    }
}
