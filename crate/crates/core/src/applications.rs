//! Applications: Otsu-gated membership-inference defense, model-inversion
//! audit of a trained or unlearned model, and unlearning inside a
//! "condensed model" whose final segment can be swapped.

use std::time::Instant;

use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::condense::{train_inverter, InversionConfig, InversionPairs, InverterNet};
use crate::data::SplitView;
use crate::metrics::{accuracy, mia_logistic, mia_shadow, overfitting_metrics, ShadowConfig};
use crate::modular::{offline_phase, online_phase, ModularSchedule, PhaseRecord, RemembranceSet};
use crate::nnkit::{build_head, train_segments, CrossEntropy, HeadArch, Sequential, Snapshot};
use crate::{invalid, ArchId, Error, PartitionedModel, Result, Samples, Segment, SegmentMask, Tensor, TrainConfig};

pub const OTSU_BINS: usize = 256;

/// Split of `values` by an Otsu threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtsuSplit {
    pub threshold: f64,
    /// Index of the first bin on the high side.
    pub bin: usize,
    /// Positions of values on the low side.
    pub low: Vec<usize>,
    pub between_variance: f64,
}

fn bin_of(v: f64, lo: f64, width: f64) -> usize {
    (((v - lo) / width) as usize).min(OTSU_BINS - 1)
}

/// Threshold maximizing between-class variance over a 256-bin histogram
/// spanning `[min, max]`. Candidate thresholds are the 255 inner bin
/// edges; the first maximizer wins.
pub fn otsu_split(values: &[f64]) -> Result<OtsuSplit> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("Otsu input must be finite"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.len() < 2 || !(hi > lo) {
        return Err(Error::Degenerate("Otsu needs at least two distinct values".into()));
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut count = [0.0f64; OTSU_BINS];
    let mut sum = [0.0f64; OTSU_BINS];
    for &v in values {
        let b = bin_of(v, lo, width);
        count[b] += 1.0;
        sum[b] += v;
    }
    let n = values.len() as f64;
    let total: f64 = sum.iter().sum();
    let (mut c0, mut s0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 1);
    for t in 1..OTSU_BINS {
        c0 += count[t - 1];
        s0 += sum[t - 1];
        let c1 = n - c0;
        if c0 == 0.0 || c1 == 0.0 {
            continue;
        }
        let d = s0 / c0 - (total - s0) / c1;
        let var = (c0 / n) * (c1 / n) * d * d;
        if var > best.0 {
            best = (var, t);
        }
    }
    let t = best.1;
    Ok(OtsuSplit {
        threshold: lo + width * t as f64,
        bin: t,
        low: (0..values.len()).filter(|&i| bin_of(values[i], lo, width) < t).collect(),
        between_variance: best.0,
    })
}

pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    Ok(otsu_split(values)?.threshold)
}

/// Overfitting-metric values of the training samples and their Otsu split.
/// The low-OM side is the more overfitted one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitPartition {
    pub om_values: Vec<f64>,
    pub threshold: f64,
    pub overfit_indices: Vec<usize>,
}

pub fn overfit_partition(model: &mut PartitionedModel, train: &Samples) -> Result<OverfitPartition> {
    let om_values = overfitting_metrics(model, train)?;
    let split = otsu_split(&om_values)?;
    Ok(OverfitPartition {
        threshold: split.threshold,
        overfit_indices: split.low,
        om_values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Online-phase steps; 0 leaves the model unchanged.
    pub epochs: usize,
    pub schedule: ModularSchedule,
    pub shadow: ShadowConfig,
    pub shadow_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub mia_before: f64,
    pub mia_after: f64,
    pub test_accuracy_before: f64,
    pub test_accuracy_after: f64,
    pub partition: Option<OverfitPartition>,
    pub records: Vec<PhaseRecord>,
    pub note: Option<String>,
}

/// Data of a defense run. `population` is disjoint from `train` and `eval`
/// and feeds the shadow models.
pub struct DefenseData<'a> {
    pub train: &'a Samples,
    pub eval: &'a Samples,
    pub population: &'a Samples,
    pub remembrance: &'a RemembranceSet,
}

fn shadow_mia(model: &mut PartitionedModel, d: &DefenseData<'_>, cfg: &DefenseConfig) -> Result<f64> {
    mia_shadow(model, d.train, d.eval, d.population, cfg.shadow_count, &cfg.shadow)
}

/// Treat the Otsu low-OM side as a forget set and run the online phase on
/// the remaining training samples for `cfg.epochs` steps.
pub fn mia_defense(model: &mut PartitionedModel, data: &DefenseData<'_>, cfg: &DefenseConfig) -> Result<DefenseReport> {
    let mia_before = shadow_mia(model, data, cfg)?;
    let test_accuracy_before = accuracy(model, data.eval)?;
    let mut report = DefenseReport {
        mia_before,
        mia_after: mia_before,
        test_accuracy_before,
        test_accuracy_after: test_accuracy_before,
        partition: None,
        records: Vec::new(),
        note: None,
    };
    if cfg.epochs == 0 {
        report.note = Some("zero defense epochs".into());
        return Ok(report);
    }
    let part = match overfit_partition(model, data.train) {
        Ok(p) => p,
        Err(Error::Degenerate(msg)) => {
            report.note = Some(msg);
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    let split = match SplitView::from_forget(data.train.len(), &part.overfit_indices) {
        Ok(s) => s,
        Err(Error::Empty(what)) => {
            report.note = Some(format!("Otsu split left an empty {what}"));
            report.partition = Some(part);
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    let retained = data.train.select(&split.retain);
    let mut sched = cfg.schedule;
    sched.online.steps = cfg.epochs;
    sched.online.tau = (cfg.epochs / 2).max(1);
    let out = online_phase(model, &retained, data.remembrance, &sched)?;
    report.records = out.records;
    report.mia_after = shadow_mia(model, data, cfg)?;
    report.test_accuracy_after = accuracy(model, data.eval)?;
    report.partition = Some(part);
    Ok(report)
}

/// Reconstructions of an audited model: `k` images per class, class-major.
#[derive(Debug, Clone)]
pub struct InversionAudit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub k: usize,
    pub epoch_loss: Vec<f64>,
}

/// Model-inversion audit with `k` uniform pseudo-clusters per class and no
/// pixel targets (cross-entropy only). The model is never written.
pub fn invert_unlearned(model: &mut PartitionedModel, k: usize, cfg: &InversionConfig) -> Result<InversionAudit> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    let c = model.class_count;
    let cluster_labels: Vec<usize> = (0..c * k).collect();
    let classes: Vec<usize> = cluster_labels.iter().map(|l| l / k).collect();
    let mut gen = InverterNet::new(c * k, &model.input_shape, cfg.hidden, cfg.seed)?;
    let pairs = InversionPairs {
        cluster_labels: cluster_labels.clone(),
        classes: classes.clone(),
        targets: None,
    };
    let cfg = InversionConfig { lambda: 0.0, ..*cfg };
    let epoch_loss = train_inverter(&mut gen, model, &pairs, &cfg)?;
    Ok(InversionAudit {
        images: gen.generate(&cluster_labels)?,
        labels: classes,
        k,
        epoch_loss,
    })
}

fn rms(a: ndarray::ArrayViewD<f64>, b: ndarray::ArrayViewD<f64>) -> f64 {
    let n = a.len() as f64;
    (a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-class pixel mean of `samples`; `None` for classes without samples.
pub fn class_means(samples: &Samples, class_count: usize) -> Vec<Option<Tensor>> {
    (0..class_count)
        .map(|c| {
            let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples.labels[i] == c).collect();
            (!idx.is_empty()).then(|| {
                samples
                    .images
                    .select(Axis(0), &idx)
                    .mean_axis(Axis(0))
                    .expect("non-empty")
            })
        })
        .collect()
}

/// Mean RMS pixel distance of each class's reconstructions to that class's
/// true mean image.
pub fn distance_to_class_means(audit: &InversionAudit, means: &[Option<Tensor>]) -> Vec<Option<f64>> {
    means
        .iter()
        .enumerate()
        .map(|(c, m)| {
            let m = m.as_ref()?;
            let rows: Vec<usize> = (0..audit.labels.len()).filter(|&i| audit.labels[i] == c).collect();
            if rows.is_empty() {
                return None;
            }
            let d: f64 = rows
                .iter()
                .map(|&i| rms(audit.images.index_axis(Axis(0), i), m.view()))
                .sum();
            Some(d / rows.len() as f64)
        })
        .collect()
}

/// Mean pairwise distance between reconstructions of different classes
/// over the mean distance within a class. Needs `k ≥ 2`.
pub fn between_within_ratio(audit: &InversionAudit) -> Option<f64> {
    let n = audit.labels.len();
    let (mut between, mut nb, mut within, mut nw) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let d = rms(audit.images.index_axis(Axis(0), i), audit.images.index_axis(Axis(0), j));
            if audit.labels[i] == audit.labels[j] {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    if nw == 0 || nb == 0 || within == 0.0 {
        return None;
    }
    Some((between / nb as f64) / (within / nw as f64))
}

/// Autoencoder-bodied model plus the remembrance samples that retrain any
/// replacement head.
#[derive(Debug, Clone)]
pub struct CondensedModel {
    pub model: PartitionedModel,
    pub remembrance: RemembranceSet,
    pub manifest: serde_json::Value,
}

impl CondensedModel {
    pub fn new(model: PartitionedModel, remembrance: RemembranceSet) -> Result<Self> {
        let out = model.output_shape_of(Segment::Intermediate)?;
        if out != model.input_shape {
            return Err(Error::Mismatch(format!(
                "encoder output {out:?} differs from input {:?}",
                model.input_shape
            )));
        }
        Ok(Self {
            model,
            remembrance,
            manifest: serde_json::json!({ "unlearning": [] }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedModelReport {
    pub pre_swap_test_accuracy: f64,
    pub test_accuracy: f64,
    pub fa: f64,
    pub mia: f64,
    pub online_seconds: f64,
    /// Wall time of training the swapped head on remembrance samples.
    pub head_seconds: f64,
    pub direct_test_accuracy: f64,
    /// Wall time of training the same head directly on the retain set.
    pub direct_seconds: f64,
    pub head_train_samples: usize,
    pub direct_train_samples: usize,
    pub records: Vec<PhaseRecord>,
}

/// Data of a condensed-model run.
pub struct CondensedModelData<'a> {
    pub train: &'a Samples,
    pub retain: &'a Samples,
    pub forget: &'a Samples,
    pub reduced: &'a Samples,
    pub eval: &'a Samples,
    /// Non-members for the membership attack.
    pub mia_reference: &'a Samples,
}

/// Offline and online phases on the autoencoder-bodied model, then swap
/// the final segment for a fresh `new_final` head trained only on
/// remembrance samples. The same head trained directly on the retain set
/// is the reference.
pub fn condensed_model_unlearn(
    cm: &mut CondensedModel,
    pretrained: &Snapshot,
    data: &CondensedModelData<'_>,
    sched: &ModularSchedule,
    new_final: &HeadArch,
    head_cfg: &TrainConfig,
) -> Result<CondensedModelReport> {
    let model = &mut cm.model;
    let shape = model.output_shape_of(Segment::Intermediate)?;
    let mut records = offline_phase(model, pretrained, data.train, &cm.remembrance, sched)?;
    let online = online_phase(model, data.reduced, &cm.remembrance, sched)?;
    records.extend(online.records);
    let pre_swap_test_accuracy = accuracy(model, data.eval)?;

    let head = build_head(new_final, &shape, model.class_count, head_cfg.seed)?;
    model.replace_final(head)?;
    let clock = Instant::now();
    let log = train_segments(model, &cm.remembrance.samples, head_cfg, SegmentMask::only(Segment::Final), &CrossEntropy)?;
    let head_seconds = clock.elapsed().as_secs_f64();
    records.push(PhaseRecord {
        phase: "swap".into(),
        step: 0,
        segment: Segment::Final,
        epochs: head_cfg.epochs,
        loss: log.last_loss(),
        wall_ms: log.wall_ms,
        data: "remembrance".into(),
        samples: cm.remembrance.len(),
    });
    cm.manifest["unlearning"]
        .as_array_mut()
        .expect("manifest array")
        .push(serde_json::json!({
            "reduced_samples": data.reduced.len(),
            "forget_samples": data.forget.len(),
            "head": new_final,
        }));

    let mut direct = direct_head_model(new_final, &model.input_shape, model.class_count, head_cfg.seed)?;
    let clock = Instant::now();
    train_segments(&mut direct, data.retain, head_cfg, SegmentMask::only(Segment::Final), &CrossEntropy)?;
    let direct_seconds = clock.elapsed().as_secs_f64();

    Ok(CondensedModelReport {
        pre_swap_test_accuracy,
        test_accuracy: accuracy(model, data.eval)?,
        fa: accuracy(model, data.forget)?,
        mia: mia_logistic(model, data.forget, data.mia_reference)?,
        online_seconds: online.ut_seconds,
        head_seconds,
        direct_test_accuracy: accuracy(&mut direct, data.eval)?,
        direct_seconds,
        head_train_samples: cm.remembrance.len(),
        direct_train_samples: data.retain.len(),
        records,
    })
}

/// A bare classifier head on raw images, as a partitioned model with empty
/// beginning and intermediate segments.
pub fn direct_head_model(head: &HeadArch, input_shape: &[usize], classes: usize, seed: u64) -> Result<PartitionedModel> {
    let h = build_head(head, input_shape, classes, seed)?;
    Ok(PartitionedModel::from_segments(
        ArchId::Custom,
        input_shape,
        classes,
        (0, 0),
        [Sequential::default(), Sequential::default(), h],
        seed,
    )?)
}

/// Stack images `[n, c, h, w]` into one grid image `[c, rows·h, cols·w]`.
pub fn image_grid(images: &Tensor, cols: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || cols == 0 {
        return Err(invalid(format!("grid needs [n, c, h, w] images, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let rows = n.div_ceil(cols);
    let mut grid = Tensor::zeros(IxDyn(&[c, rows * h, cols * w]));
    for i in 0..n {
        let (r, q) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    grid[[ch, r * h + y, q * w + x]] = images[[i, ch, y, x]];
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn otsu_splits_two_levels() {
        let s = otsu_split(&[0.0, 0.0, 0.0, 10.0, 10.0]).unwrap();
        assert!(s.threshold > 0.0 && s.threshold < 10.0);
        assert_eq!(s.low, vec![0, 1, 2]);
    }

    #[test]
    fn otsu_rejects_constant_input() {
        assert!(matches!(otsu_threshold(&[2.0, 2.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn grid_places_images_row_major() {
        let imgs = Tensor::from_shape_fn(IxDyn(&[3, 1, 1, 1]), |i| i[0] as f64);
        let g = image_grid(&imgs, 2).unwrap();
        assert_eq!(g.shape(), &[1, 2, 2]);
        assert_eq!(g[[0, 0, 1]], 1.0);
        assert_eq!(g[[0, 1, 0]], 2.0);
        assert_eq!(g[[0, 1, 1]], 0.0);
    }
}
