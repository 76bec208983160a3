use std::time::Instant;

use ndarray::{Axis, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::loss::Objective;
use crate::model::{PartitionedModel, Segment, SegmentMask};
use crate::optim::Adam;
use crate::{NnError, Result, Tensor};

/// Frozen-prefix activations are cached when they fit in this many values.
const PREFIX_CACHE_LIMIT: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            lr,
            batch_size,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(NnError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(1e-3, 256, 1, 0)
    }
}

/// Linearly decayed L1 penalty `γ(t)·‖θ‖₁`, `γ(t) = γ·max(0, 1 − t/horizon)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1Schedule {
    pub gamma: f64,
    pub horizon: usize,
}

impl L1Schedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.horizon == 0 || epoch >= self.horizon {
            return 0.0;
        }
        (self.gamma * (1.0 - epoch as f64 / self.horizon as f64)).max(0.0)
    }
}

/// Optional additions to the plain training step.
#[derive(Debug, Clone, Default)]
pub struct TrainHooks<'a> {
    pub l1: Option<L1Schedule>,
    /// Binary masks aligned with `model.params()`, re-applied after each step.
    pub prune_masks: Option<&'a [Option<Tensor>]>,
    /// Epoch offset for the L1 schedule when training is split across calls.
    pub epoch_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub wall_ms: f64,
}

impl TrainLog {
    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Train the segments in `trainable` with a fresh optimizer.
pub fn train_segments(
    model: &mut PartitionedModel,
    data: &Samples,
    cfg: &TrainConfig,
    trainable: SegmentMask,
    objective: &dyn Objective,
) -> Result<TrainLog> {
    let mut opt = Adam::new(cfg.lr);
    train_segments_with(model, data, cfg, trainable, objective, &TrainHooks::default(), &mut opt)
}

/// Train with caller-owned optimizer state and hooks. Segments outside
/// `trainable` run in inference mode and are never written.
pub fn train_segments_with(
    model: &mut PartitionedModel,
    data: &Samples,
    cfg: &TrainConfig,
    trainable: SegmentMask,
    objective: &dyn Objective,
    hooks: &TrainHooks<'_>,
    opt: &mut Adam,
) -> Result<TrainLog> {
    cfg.validate()?;
    let start = trainable
        .first()
        .ok_or_else(|| NnError::Config("no trainable segment".into()))?;
    if cfg.epochs == 0 {
        return Ok(TrainLog::default());
    }
    if data.is_empty() {
        return Err(NnError::EmptyData);
    }
    opt.lr = cfg.lr;
    let clock = Instant::now();
    model.reseed(cfg.seed);

    // frozen prefix activations are fixed, so compute them once
    let prefix: Vec<Segment> = Segment::ALL.into_iter().filter(|s| *s < start).collect();
    let mut cached: Option<Tensor> = None;
    if !prefix.is_empty() {
        let width: usize = model.input_shape_of(start)?.iter().product();
        if width * data.len() <= PREFIX_CACHE_LIMIT {
            cached = Some(prefix_forward(model, &data.images, &prefix)?);
        }
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let gamma = hooks
            .l1
            .map(|s| s.at(epoch + hooks.epoch_offset))
            .unwrap_or(0.0);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = match &cached {
                Some(c) => c.select(Axis(0), idx),
                None => prefix_forward(model, &data.images.select(Axis(0), idx), &prefix)?,
            };
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            model.zero_grad();
            let out = model.forward_from(&x, start, trainable)?;
            let logits = out
                .into_dimensionality::<Ix2>()
                .map_err(|e| NnError::Shape(e.to_string()))?;
            let (loss, grad) = objective.evaluate(&logits, &labels, idx);
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, step });
            }
            model.backward_to(&grad.into_dyn(), start);
            let mut params = model.params_mut_masked(trainable);
            if gamma != 0.0 {
                for p in params.iter_mut() {
                    let crate::layers::Param { value, grad, .. } = &mut **p;
                    grad.zip_mut_with(value, |g, &v| {
                        if v != 0.0 {
                            *g += gamma * v.signum();
                        }
                    });
                }
            }
            opt.step(&mut params);
            if let Some(masks) = hooks.prune_masks {
                for (p, m) in model.params_mut().into_iter().zip(masks) {
                    if let Some(m) = m {
                        p.value.zip_mut_with(m, |v, &k| *v *= k);
                    }
                }
            }
            total += loss * idx.len() as f64;
            steps += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: total / data.len() as f64,
            steps,
            samples: data.len(),
        });
    }
    log.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    Ok(log)
}

fn prefix_forward(model: &mut PartitionedModel, x: &Tensor, prefix: &[Segment]) -> Result<Tensor> {
    let mut a = x.to_owned();
    for &seg in prefix {
        a = model.segment_forward(seg, &a, false)?;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, ArchSpec};
    use crate::loss::CrossEntropy;
    use ndarray::IxDyn;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::zeros(IxDyn(&[n, 1, 2, 2]));
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            for k in 0..4 {
                let mu = if c == 0 { 0.2 } else { 0.8 };
                x[[i, 0, k / 2, k % 2]] = mu + 0.05 * (rng.random::<f64>() - 0.5);
            }
            y.push(c);
        }
        Samples::new(x, y).unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut m = build_model(&ArchSpec::mlp(8), &[1, 2, 2], 2, None, 0).unwrap();
        let before = m.flat_params();
        let log = train_segments(&mut m, &blobs(10, 0), &TrainConfig::new(1e-2, 4, 0, 0), SegmentMask::ALL, &CrossEntropy).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(before, m.flat_params());
    }

    #[test]
    fn empty_data_and_bad_config_are_rejected() {
        let mut m = build_model(&ArchSpec::mlp(8), &[1, 2, 2], 2, None, 0).unwrap();
        let empty = Samples::empty(&[1, 2, 2]);
        assert!(matches!(
            train_segments(&mut m, &empty, &TrainConfig::new(1e-2, 4, 1, 0), SegmentMask::ALL, &CrossEntropy),
            Err(NnError::EmptyData)
        ));
        assert!(matches!(
            train_segments(&mut m, &blobs(4, 0), &TrainConfig::new(0.0, 4, 1, 0), SegmentMask::ALL, &CrossEntropy),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut m = build_model(&ArchSpec::mlp(8), &[1, 2, 2], 2, None, 0).unwrap();
        let mut d = blobs(4, 0);
        d.images[[0, 0, 0, 0]] = f64::NAN;
        let r = train_segments(&mut m, &d, &TrainConfig::new(1e-2, 4, 1, 0), SegmentMask::ALL, &CrossEntropy);
        assert!(matches!(r, Err(NnError::NonFiniteLoss { epoch: 0, step: 0 })));
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let mut m = build_model(&ArchSpec::mlp(16), &[1, 2, 2], 2, None, 1).unwrap();
        let d = blobs(64, 1);
        let log = train_segments(&mut m, &d, &TrainConfig::new(1e-2, 16, 20, 0), SegmentMask::ALL, &CrossEntropy).unwrap();
        assert!(log.epochs.last().unwrap().mean_loss < log.epochs[0].mean_loss);
        let pred = m.predict(&d.images).unwrap();
        assert_eq!(pred, d.labels);
    }

    #[test]
    fn l1_schedule_decays_linearly_and_clamps() {
        let s = L1Schedule { gamma: 0.1, horizon: 4 };
        assert_eq!(s.at(0), 0.1);
        assert!((s.at(2) - 0.05).abs() < 1e-15);
        assert_eq!(s.at(4), 0.0);
        assert_eq!(s.at(9), 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let d = blobs(32, 3);
        let run = || {
            let mut m = build_model(&ArchSpec::cnn(2, 8), &[1, 2, 2], 2, None, 5).unwrap();
            train_segments(&mut m, &d, &TrainConfig::new(1e-2, 8, 3, 9), SegmentMask::ALL, &CrossEntropy).unwrap();
            m.flat_params()
        };
        assert_eq!(run(), run());
    }
}
