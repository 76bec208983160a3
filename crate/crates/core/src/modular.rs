//! Modular training: an offline phase that anchors the final segment on
//! remembrance samples and concentrates knowledge in the intermediate
//! segment, and an online phase that retrains the beginning on the reduced
//! retain set so the intermediate segment's knowledge goes stale.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collect::epochs_for_eta;
use crate::data::LabeledDataset;
use crate::grad::mean_loss_gradient;
use crate::metrics::Histogram;
use crate::nnkit::{train_segments_with, Adam, CrossEntropy, NnError, Snapshot, TrainHooks, TrainLog};
use crate::{invalid, Error, PartitionedModel, Result, Samples, Segment, SegmentMask, TrainConfig};

/// `M` samples per class drawn from the remembrance pool.
#[derive(Debug, Clone)]
pub struct RemembranceSet {
    pub m: usize,
    pub classes: Vec<usize>,
    /// Rows of the pool that were drawn, class-major.
    pub pool_indices: Vec<usize>,
    pub samples: Samples,
}

impl RemembranceSet {
    /// Draw exactly `m` samples of every class not in `exclude`.
    pub fn draw(pool: &LabeledDataset, m: usize, exclude: &[usize], seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(invalid("remembrance needs M ≥ 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<usize> = (0..pool.class_count).filter(|c| !exclude.contains(c)).collect();
        if classes.is_empty() {
            return Err(Error::Empty("remembrance classes".into()));
        }
        let mut pool_indices = Vec::with_capacity(m * classes.len());
        for &c in &classes {
            let mut view = pool.class_view(c)?;
            if view.len() < m {
                return Err(Error::Dataset(format!(
                    "class {c} has {} remembrance candidates, need {m}",
                    view.len()
                )));
            }
            view.shuffle(&mut rng);
            let mut pick = view[..m].to_vec();
            pick.sort_unstable();
            pool_indices.extend(pick);
        }
        Ok(Self {
            m,
            samples: pool.subset(&pool_indices),
            classes,
            pool_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineSchedule {
    pub iters: usize,
    pub final_epochs: usize,
    pub intermediate_epochs: usize,
    pub lr_final: f64,
    pub lr_intermediate: f64,
    pub batch_size: usize,
    /// Share of the training set used by each intermediate pass.
    pub subsample: f64,
}

impl Default for OfflineSchedule {
    fn default() -> Self {
        Self {
            iters: 10,
            final_epochs: 20,
            intermediate_epochs: 20,
            lr_final: 1e-4,
            lr_intermediate: 1e-5,
            batch_size: 256,
            subsample: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineSchedule {
    pub steps: usize,
    pub final_epochs: usize,
    pub tau: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub batch_size: usize,
}

impl Default for OnlineSchedule {
    fn default() -> Self {
        Self {
            steps: 30,
            final_epochs: 15,
            tau: 15,
            lr: 1e-3,
            lr_final: 1e-4,
            batch_size: 256,
        }
    }
}

impl OnlineSchedule {
    /// Whether step `s` (0-based) refreshes the final segment.
    pub fn refreshes_at(&self, s: usize) -> bool {
        s + self.tau < self.steps
    }

    pub fn refresh_count(&self) -> usize {
        self.steps.saturating_sub(self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ModularSchedule {
    pub offline: OfflineSchedule,
    pub online: OnlineSchedule,
    pub seed: u64,
}

impl ModularSchedule {
    pub fn validate(&self) -> Result<()> {
        let on = &self.online;
        if !(0 < on.tau && on.tau < on.steps) {
            return Err(invalid(format!("need 0 < τ={} < S={}", on.tau, on.steps)));
        }
        let off = &self.offline;
        if !(off.subsample > 0.0 && off.subsample <= 1.0) {
            return Err(invalid(format!("subsample {} not in (0, 1]", off.subsample)));
        }
        for lr in [off.lr_final, off.lr_intermediate, on.lr, on.lr_final] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(invalid(format!("learning rate {lr} must be positive")));
            }
        }
        if off.batch_size == 0 || on.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        Ok(())
    }

    /// Set S from η and rescale τ to keep the same refresh share.
    pub fn for_eta(mut self, eta: f64) -> Result<Self> {
        let steps = epochs_for_eta(eta)?;
        let old = self.online.steps.max(1) as f64;
        let tau = (self.online.tau as f64 * steps as f64 / old).round() as usize;
        self.online.tau = tau.clamp(1, steps - 1);
        self.online.steps = steps;
        Ok(self)
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub step: usize,
    pub segment: Segment,
    pub epochs: usize,
    pub loss: Option<f64>,
    pub wall_ms: f64,
    /// Which data stream was trained on.
    pub data: String,
    pub samples: usize,
}

pub fn write_log(path: impl AsRef<Path>, records: &[PhaseRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<PhaseRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

struct Stage<'a> {
    phase: &'static str,
    step: usize,
    segment: Segment,
    data_name: &'static str,
    data: &'a Samples,
    cfg: TrainConfig,
}

fn run_stage(model: &mut PartitionedModel, st: Stage<'_>, opt: &mut Adam) -> Result<PhaseRecord> {
    let log: TrainLog = if st.cfg.epochs == 0 {
        TrainLog::default()
    } else {
        train_segments_with(
            model,
            st.data,
            &st.cfg,
            SegmentMask::only(st.segment),
            &CrossEntropy,
            &TrainHooks::default(),
            opt,
        )?
    };
    Ok(PhaseRecord {
        phase: st.phase.into(),
        step: st.step,
        segment: st.segment,
        epochs: st.cfg.epochs,
        loss: log.last_loss(),
        wall_ms: log.wall_ms,
        data: st.data_name.into(),
        samples: st.data.len(),
    })
}

fn stage_seed(seed: u64, phase: u64, step: usize, seg: Segment) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (phase << 56)
        ^ ((step as u64) << 8)
        ^ seg.index() as u64
}

/// Offline phase. Each iteration restores the final segment from
/// `pretrained`, trains it on remembrance samples, then trains the
/// intermediate segment on `train`. The beginning is never written.
pub fn offline_phase(
    model: &mut PartitionedModel,
    pretrained: &Snapshot,
    train: &Samples,
    remembrance: &RemembranceSet,
    sched: &ModularSchedule,
) -> Result<Vec<PhaseRecord>> {
    sched.validate()?;
    if remembrance.is_empty() {
        return Err(Error::Empty("remembrance set".into()));
    }
    let off = &sched.offline;
    let mut records = Vec::new();
    for r in 0..off.iters {
        pretrained.restore_segment(model, Segment::Final)?;
        let mut opt = Adam::new(off.lr_final);
        records.push(run_stage(
            model,
            Stage {
                phase: "offline",
                step: r,
                segment: Segment::Final,
                data_name: "remembrance",
                data: &remembrance.samples,
                cfg: TrainConfig::new(
                    off.lr_final,
                    off.batch_size,
                    off.final_epochs,
                    stage_seed(sched.seed, 1, r, Segment::Final),
                ),
            },
            &mut opt,
        )?);
        let seed = stage_seed(sched.seed, 1, r, Segment::Intermediate);
        let sub;
        let data = if off.subsample < 1.0 {
            let n = ((train.len() as f64 * off.subsample).round() as usize).max(1);
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(n);
            idx.sort_unstable();
            sub = train.select(&idx);
            &sub
        } else {
            train
        };
        let mut opt = Adam::new(off.lr_intermediate);
        records.push(run_stage(
            model,
            Stage {
                phase: "offline",
                step: r,
                segment: Segment::Intermediate,
                data_name: "train",
                data,
                cfg: TrainConfig::new(off.lr_intermediate, off.batch_size, off.intermediate_epochs, seed),
            },
            &mut opt,
        )?);
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub records: Vec<PhaseRecord>,
    pub ut_seconds: f64,
    pub refreshes: usize,
}

/// Online phase over the reduced retain set. The beginning trains one epoch
/// per step with a persistent optimizer; the final segment is refreshed on
/// remembrance samples while `s < S − τ` (0-based `s`); the intermediate
/// segment then trains one epoch on the reduced set.
pub fn online_phase(
    model: &mut PartitionedModel,
    reduced: &Samples,
    remembrance: &RemembranceSet,
    sched: &ModularSchedule,
) -> Result<OnlineOutcome> {
    sched.validate()?;
    if reduced.is_empty() {
        return Err(Error::Empty("reduced retain set".into()));
    }
    if remembrance.is_empty() {
        return Err(Error::Empty("remembrance set".into()));
    }
    let on = &sched.online;
    let clock = Instant::now();
    let mut records = Vec::new();
    let mut opt_begin = Adam::new(on.lr);
    let mut opt_final = Adam::new(on.lr_final);
    let mut refreshes = 0;
    for s in 0..on.steps {
        records.push(run_stage(
            model,
            Stage {
                phase: "online",
                step: s,
                segment: Segment::Beginning,
                data_name: "reduced",
                data: reduced,
                cfg: TrainConfig::new(on.lr, on.batch_size, 1, stage_seed(sched.seed, 2, s, Segment::Beginning)),
            },
            &mut opt_begin,
        )?);
        if on.refreshes_at(s) {
            refreshes += 1;
            records.push(run_stage(
                model,
                Stage {
                    phase: "online",
                    step: s,
                    segment: Segment::Final,
                    data_name: "remembrance",
                    data: &remembrance.samples,
                    cfg: TrainConfig::new(
                        on.lr_final,
                        on.batch_size,
                        on.final_epochs,
                        stage_seed(sched.seed, 2, s, Segment::Final),
                    ),
                },
                &mut opt_final,
            )?);
        }
    }
    let mut opt = Adam::new(on.lr);
    records.push(run_stage(
        model,
        Stage {
            phase: "online",
            step: on.steps,
            segment: Segment::Intermediate,
            data_name: "reduced",
            data: reduced,
            cfg: TrainConfig::new(on.lr, on.batch_size, 1, stage_seed(sched.seed, 2, on.steps, Segment::Intermediate)),
        },
        &mut opt,
    )?);
    Ok(OnlineOutcome {
        records,
        ut_seconds: clock.elapsed().as_secs_f64(),
        refreshes,
    })
}

/// Absolute per-parameter gradients of the intermediate segment under the
/// retain loss, for two models with the same partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateGradients {
    pub mu: Histogram,
    pub cf: Histogram,
    pub mu_std: f64,
    pub cf_std: f64,
}

fn intermediate_abs_grads(model: &mut PartitionedModel, samples: &Samples) -> Result<Vec<f64>> {
    mean_loss_gradient(model, samples)?;
    let g: Vec<f64> = model
        .flat_grads_of(Segment::Intermediate)
        .into_iter()
        .map(f64::abs)
        .collect();
    model.zero_grad();
    Ok(g)
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn intermediate_gradient_profile(
    model_mu: &mut PartitionedModel,
    model_cf: &mut PartitionedModel,
    retain: &Samples,
    bins: usize,
) -> Result<IntermediateGradients> {
    if model_mu.param_counts() != model_cf.param_counts() || model_mu.cuts != model_cf.cuts {
        return Err(Error::Mismatch("models are partitioned differently".into()));
    }
    let mu = intermediate_abs_grads(model_mu, retain)?;
    let cf = intermediate_abs_grads(model_cf, retain)?;
    if mu.is_empty() {
        return Err(NnError::Partition("intermediate segment has no parameters".into()).into());
    }
    let hi = mu.iter().chain(&cf).fold(0.0f64, |a, &b| a.max(b));
    let hi = if hi > 0.0 { hi } else { 1.0 };
    Ok(IntermediateGradients {
        mu_std: std_dev(&mu),
        cf_std: std_dev(&cf),
        mu: Histogram::new(&mu, bins, 0.0, hi),
        cf: Histogram::new(&cf, bins, 0.0, hi),
    })
}
