//! Reference unlearning methods: retraining, catastrophic forgetting,
//! distillation, bad-teacher distillation, sparsity regularization, and
//! synaptic-flow pruning followed by finetuning.

use std::time::Instant;

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SplitView};
use crate::metrics::{accuracy, build_report, ReportData, ReportOptions, UnlearnReport};
use crate::nnkit::train::L1Schedule;
use crate::nnkit::{
    build_model, train_segments_with, Adam, CrossEntropy, Distill, Objective, ParamKind, TrainHooks, TrainLog,
};
use crate::{invalid, ArchSpec, Error, PartitionedModel, Result, Samples, Segment, SegmentMask, Tensor, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    R,
    #[serde(rename = "CF")]
    Cf,
    D,
    #[serde(rename = "BD")]
    Bd,
    S,
    #[serde(rename = "PU")]
    Pu,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::R, Method::Cf, Method::D, Method::Bd, Method::S, Method::Pu];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::R => "R",
            Method::Cf => "CF",
            Method::D => "D",
            Method::Bd => "BD",
            Method::S => "S",
            Method::Pu => "PU",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown baseline {s:?}")))
    }
}

/// Method hyperparameters. A field left `None` is an error only for the
/// methods that read it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub temperature: Option<f64>,
    pub hw: Option<f64>,
    pub sw: Option<f64>,
    pub ratio_r: Option<f64>,
    /// Weight toward the incompetent teacher on forget samples; the
    /// competent teacher gets `1 − β` on retain samples.
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub epoch_l1: Option<usize>,
    pub pr: Option<f64>,
    pub synflow_iters: usize,
    /// Rank by weight magnitude instead of synaptic flow.
    pub magnitude_prune: bool,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            temperature: Some(4.0),
            hw: Some(1.0),
            sw: Some(0.1),
            ratio_r: Some(0.3),
            beta: Some(0.5),
            gamma: Some(1e-4),
            epoch_l1: Some(15),
            pr: Some(0.95),
            synflow_iters: 100,
            magnitude_prune: false,
        }
    }
}

fn need<T>(v: Option<T>, name: &str, m: Method) -> Result<T> {
    v.ok_or_else(|| invalid(format!("{} needs parameter {name}", m.as_str())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: Method,
    /// Learning rate, batch size, epochs_main and seed.
    pub base: TrainConfig,
    pub params: MethodParams,
    /// Architecture for freshly initialized models (R, BD).
    pub arch: Option<ArchSpec>,
}

impl BaselineConfig {
    pub fn new(method: Method, base: TrainConfig) -> Self {
        Self {
            method,
            base,
            params: MethodParams::default(),
            arch: None,
        }
    }

    pub fn with_arch(mut self, arch: ArchSpec) -> Self {
        self.arch = Some(arch);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let (m, p) = (self.method, &self.params);
        match m {
            Method::R => {
                need(self.arch.as_ref(), "arch", m)?;
            }
            Method::Cf => {}
            Method::D => {
                let t = need(p.temperature, "T", m)?;
                need(p.hw, "hw", m)?;
                need(p.sw, "sw", m)?;
                if t <= 0.0 {
                    return Err(invalid("T must be positive"));
                }
            }
            Method::Bd => {
                need(self.arch.as_ref(), "arch", m)?;
                let t = need(p.temperature, "T", m)?;
                let r = need(p.ratio_r, "ratio_R", m)?;
                let b = need(p.beta, "beta", m)?;
                if t <= 0.0 || !(r > 0.0 && r <= 1.0) || !(0.0..=1.0).contains(&b) {
                    return Err(invalid("BD needs T > 0, 0 < ratio_R ≤ 1 and 0 ≤ β ≤ 1"));
                }
            }
            Method::S => {
                let g = need(p.gamma, "gamma", m)?;
                need(p.epoch_l1, "epoch_L1", m)?;
                if g < 0.0 {
                    return Err(invalid("γ must be non-negative"));
                }
            }
            Method::Pu => {
                let pr = need(p.pr, "pr", m)?;
                if !(pr > 0.0 && pr < 1.0) {
                    return Err(invalid("pr must lie in (0, 1)"));
                }
                if p.synflow_iters == 0 && !p.magnitude_prune {
                    return Err(invalid("synaptic flow needs at least one iteration"));
                }
            }
        }
        Ok(())
    }
}

/// Trained model plus wall-clock unlearning time.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: PartitionedModel,
    pub ut_seconds: f64,
    pub log: TrainLog,
    /// Pruning masks aligned with `model.params()` (PU only).
    pub masks: Option<Vec<Option<Tensor>>>,
}

fn fresh(cfg: &BaselineConfig, like: &PartitionedModel, seed: u64) -> Result<PartitionedModel> {
    let arch = cfg.arch.as_ref().ok_or_else(|| invalid("missing arch"))?;
    if arch.arch != like.arch {
        return Err(Error::Mismatch(format!(
            "config arch {} differs from model arch {}",
            arch.arch.as_str(),
            like.arch.as_str()
        )));
    }
    Ok(build_model(arch, &like.input_shape, like.class_count, Some(like.cuts), seed)?)
}

fn train_all(
    model: &mut PartitionedModel,
    data: &Samples,
    cfg: &TrainConfig,
    obj: &dyn Objective,
    hooks: &TrainHooks<'_>,
) -> Result<TrainLog> {
    let mut opt = Adam::new(cfg.lr);
    Ok(train_segments_with(model, data, cfg, SegmentMask::ALL, obj, hooks, &mut opt)?)
}

/// Run the unlearning routine only. `model` is the pretrained model and is
/// left untouched; the result is a new model.
pub fn unlearn_baseline(
    cfg: &BaselineConfig,
    model: &PartitionedModel,
    train: &LabeledDataset,
    split: &SplitView,
) -> Result<BaselineOutcome> {
    cfg.validate()?;
    let p = &cfg.params;
    let base = cfg.base;
    let retain = train.subset(&split.retain);
    let clock = Instant::now();
    let mut masks = None;
    let (student, log) = match cfg.method {
        Method::R => {
            let mut m = fresh(cfg, model, base.seed ^ 0x5eed)?;
            let log = train_all(&mut m, &retain, &base, &CrossEntropy, &TrainHooks::default())?;
            (m, log)
        }
        Method::Cf => {
            let mut m = model.clone();
            let log = train_all(&mut m, &retain, &base, &CrossEntropy, &TrainHooks::default())?;
            (m, log)
        }
        Method::D => {
            let mut teacher = model.clone();
            let logits = teacher.logits(&retain.images)?;
            let obj = Distill::new(logits, p.temperature.unwrap(), p.hw.unwrap(), p.sw.unwrap());
            let mut m = model.clone();
            let log = train_all(&mut m, &retain, &base, &obj, &TrainHooks::default())?;
            (m, log)
        }
        Method::Bd => {
            let mut rng = ChaCha8Rng::seed_from_u64(base.seed ^ 0xbd);
            let mut sub = split.retain.clone();
            sub.shuffle(&mut rng);
            let keep = ((sub.len() as f64 * p.ratio_r.unwrap()).round() as usize).max(1);
            sub.truncate(keep);
            sub.sort_unstable();
            let r = train.subset(&sub);
            let f = train.subset(&split.forget);
            let data = r.concat(&f)?;
            let mut competent = model.clone();
            let mut incompetent = fresh(cfg, model, base.seed ^ 0xbad)?;
            let tr = competent.logits(&r.images)?;
            let tf = incompetent.logits(&f.images)?;
            let teacher = ndarray::concatenate(ndarray::Axis(0), &[tr.view(), tf.view()])
                .map_err(|e| Error::Mismatch(e.to_string()))?;
            let beta = p.beta.unwrap();
            let kl: Vec<f64> = (0..data.len())
                .map(|i| if i < r.len() { 1.0 - beta } else { beta })
                .collect();
            let obj = Distill::new(teacher, p.temperature.unwrap(), 0.0, 1.0)
                .with_sample_weights(vec![0.0; data.len()], kl);
            let mut m = model.clone();
            let log = train_all(&mut m, &data, &base, &obj, &TrainHooks::default())?;
            (m, log)
        }
        Method::S => {
            let horizon = base.epochs.saturating_sub(p.epoch_l1.unwrap());
            let hooks = TrainHooks {
                l1: Some(L1Schedule {
                    gamma: p.gamma.unwrap(),
                    horizon,
                }),
                ..Default::default()
            };
            let mut m = model.clone();
            let log = train_all(&mut m, &retain, &base, &CrossEntropy, &hooks)?;
            (m, log)
        }
        Method::Pu => {
            let mut m = model.clone();
            let pr = p.pr.unwrap();
            let mk = if p.magnitude_prune {
                magnitude_masks(&m, pr)
            } else {
                synflow_masks(&mut m, pr, p.synflow_iters)?
            };
            apply_masks(&mut m, &mk);
            let hooks = TrainHooks {
                prune_masks: Some(&mk),
                ..Default::default()
            };
            let log = train_all(&mut m, &retain, &base, &CrossEntropy, &hooks)?;
            masks = Some(mk);
            (m, log)
        }
    };
    Ok(BaselineOutcome {
        model: student,
        ut_seconds: clock.elapsed().as_secs_f64(),
        log,
        masks,
    })
}

/// Unlearn and measure. The report's UT is the wall time of the unlearning
/// routine alone.
pub fn run_baseline(
    cfg: &BaselineConfig,
    model: &PartitionedModel,
    train: &LabeledDataset,
    split: &SplitView,
    data: &ReportData<'_>,
    opts: &ReportOptions,
) -> Result<(PartitionedModel, UnlearnReport)> {
    let mut out = unlearn_baseline(cfg, model, train, split)?;
    let report = build_report(cfg.method.as_str(), &mut out.model, data, out.ut_seconds, opts)?;
    Ok((out.model, report))
}

/// Retraining from scratch at matched retain accuracy: train one epoch at a
/// time with a persistent optimizer until accuracy on `retain` reaches
/// `target` or `cfg.base.epochs` run out. UT counts training steps only.
/// The flag reports whether the target was reached.
pub fn retrain_to_accuracy(
    cfg: &BaselineConfig,
    model: &PartitionedModel,
    retain: &Samples,
    target: f64,
) -> Result<(BaselineOutcome, bool)> {
    if cfg.method != Method::R {
        return Err(invalid("matched-accuracy retraining applies to R only"));
    }
    cfg.validate()?;
    let base = cfg.base;
    let mut m = fresh(cfg, model, base.seed ^ 0x5eed)?;
    let mut opt = Adam::new(base.lr);
    let mut log = TrainLog::default();
    let mut spent = 0.0;
    let mut reached = false;
    for ep in 0..base.epochs {
        let step = TrainConfig {
            epochs: 1,
            seed: base.seed.wrapping_add(ep as u64),
            ..base
        };
        let clock = Instant::now();
        let l = train_segments_with(&mut m, retain, &step, SegmentMask::ALL, &CrossEntropy, &TrainHooks::default(), &mut opt)?;
        spent += clock.elapsed().as_secs_f64();
        log.wall_ms += l.wall_ms;
        log.epochs.extend(l.epochs.into_iter().map(|mut e| {
            e.epoch = ep;
            e
        }));
        if accuracy(&mut m, retain)? >= target {
            reached = true;
            break;
        }
    }
    Ok((
        BaselineOutcome {
            model: m,
            ut_seconds: spent,
            log,
            masks: None,
        },
        reached,
    ))
}

pub fn apply_masks(model: &mut PartitionedModel, masks: &[Option<Tensor>]) {
    for (p, m) in model.params_mut().into_iter().zip(masks) {
        if let Some(m) = m {
            p.value.zip_mut_with(m, |v, &k| *v *= k);
        }
    }
}

/// Share of prunable weights that are nonzero.
pub fn weight_density(model: &PartitionedModel) -> f64 {
    let (mut nz, mut total) = (0usize, 0usize);
    for p in model.params() {
        if p.kind == ParamKind::Weight {
            total += p.value.len();
            nz += p.value.iter().filter(|v| **v != 0.0).count();
        }
    }
    nz as f64 / total.max(1) as f64
}

/// Keep the `keep` highest-scoring weights globally; ties go to the lower
/// flat index.
fn top_masks(model: &PartitionedModel, scores: &[Option<Vec<f64>>], keep: usize) -> Vec<Option<Tensor>> {
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, s) in scores.iter().enumerate() {
        if let Some(s) = s {
            flat.extend(s.iter().enumerate().map(|(j, &v)| (v, pi, j)));
        }
    }
    flat.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let params = model.params();
    let mut masks: Vec<Option<Tensor>> = params
        .iter()
        .zip(scores)
        .map(|(p, s)| s.as_ref().map(|_| Tensor::zeros(p.value.raw_dim())))
        .collect();
    for &(_, pi, j) in flat.iter().take(keep) {
        if let Some(m) = masks[pi].as_mut() {
            m.as_slice_memory_order_mut().expect("contiguous mask")[j] = 1.0;
        }
    }
    masks
}

fn weight_total(model: &PartitionedModel) -> usize {
    model
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.value.len())
        .sum()
}

fn kept(total: usize, pr: f64, frac: f64) -> usize {
    ((total as f64) * (1.0 - pr).powf(frac)).round() as usize
}

pub fn magnitude_masks(model: &PartitionedModel, pr: f64) -> Vec<Option<Tensor>> {
    let scores: Vec<Option<Vec<f64>>> = model
        .params()
        .iter()
        .map(|p| (p.kind == ParamKind::Weight).then(|| p.value.iter().map(|v| v.abs()).collect()))
        .collect();
    top_masks(model, &scores, kept(weight_total(model), pr, 1.0))
}

/// Iterative data-free synaptic-flow pruning with an exponential density
/// schedule. Scores are `|θ ⊙ ∂R/∂θ|` with `R = 1ᵀ f(1; |θ|)`, computed in
/// inference mode. The model's parameter values are restored afterwards.
pub fn synflow_masks(model: &mut PartitionedModel, pr: f64, iters: usize) -> Result<Vec<Option<Tensor>>> {
    let original: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let total = weight_total(model);
    let mut shape = vec![1];
    shape.extend(&model.input_shape);
    let ones = Tensor::ones(IxDyn(&shape));
    let mut masks: Vec<Option<Tensor>> = model
        .params()
        .iter()
        .map(|p| (p.kind == ParamKind::Weight).then(|| Tensor::ones(p.value.raw_dim())))
        .collect();
    for it in 1..=iters {
        for ((p, orig), m) in model.params_mut().into_iter().zip(&original).zip(&masks) {
            p.value = orig.mapv(f64::abs);
            if let Some(m) = m {
                p.value *= m;
            }
        }
        model.zero_grad();
        let out = model.forward(&ones)?;
        model.backward_to(&Tensor::ones(out.raw_dim()), Segment::Beginning);
        let scores: Vec<Option<Vec<f64>>> = model
            .params()
            .iter()
            .zip(&masks)
            .map(|(p, m)| {
                m.as_ref().map(|_| {
                    p.value
                        .iter()
                        .zip(p.grad.iter())
                        .map(|(v, g)| {
                            let s = (v * g).abs();
                            if s.is_finite() {
                                s
                            } else {
                                f64::MAX
                            }
                        })
                        .collect()
                })
            })
            .collect();
        masks = top_masks(model, &scores, kept(total, pr, it as f64 / iters as f64));
    }
    model.zero_grad();
    for (p, orig) in model.params_mut().into_iter().zip(original) {
        p.value = orig;
    }
    Ok(masks)
}
