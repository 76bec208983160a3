use ndarray::{Array2, Axis, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchId;
use crate::layers::{Ctx, Layer, Param};
use crate::sequential::Sequential;
use crate::{NnError, Result, Tensor};

/// Rows per forward pass when evaluating large sample sets.
pub const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Beginning,
    Intermediate,
    Final,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Beginning, Segment::Intermediate, Segment::Final];

    pub fn index(self) -> usize {
        match self {
            Segment::Beginning => 0,
            Segment::Intermediate => 1,
            Segment::Final => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Beginning => "beginning",
            Segment::Intermediate => "intermediate",
            Segment::Final => "final",
        }
    }
}

/// Set of segments that are trainable in a training call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SegmentMask([bool; 3]);

impl SegmentMask {
    pub const NONE: SegmentMask = SegmentMask([false; 3]);
    pub const ALL: SegmentMask = SegmentMask([true; 3]);

    pub fn only(seg: Segment) -> Self {
        Self::NONE.with(seg)
    }

    pub fn with(mut self, seg: Segment) -> Self {
        self.0[seg.index()] = true;
        self
    }

    pub fn contains(&self, seg: Segment) -> bool {
        self.0[seg.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    /// Shallowest trainable segment.
    pub fn first(&self) -> Option<Segment> {
        Segment::ALL.into_iter().find(|s| self.contains(*s))
    }

    pub fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        Segment::ALL.into_iter().filter(|s| self.contains(*s))
    }
}

/// Where `features` reads the representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// Flattened output of the intermediate segment.
    Intermediate,
    /// Input to the last linear layer of the final segment.
    Penultimate,
}

/// Classifier split into beginning, intermediate and final segments.
#[derive(Debug, Clone)]
pub struct PartitionedModel {
    pub arch: ArchId,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub cuts: (usize, usize),
    segments: [Sequential; 3],
    rng: ChaCha8Rng,
}

impl PartitionedModel {
    /// Assemble a model from explicit segments. Any segment may be empty
    /// (identity); the composed output must be `[class_count]` logits.
    pub fn from_segments(
        arch: ArchId,
        input_shape: &[usize],
        class_count: usize,
        cuts: (usize, usize),
        segments: [Sequential; 3],
        seed: u64,
    ) -> Result<Self> {
        let model = Self {
            arch,
            input_shape: input_shape.to_vec(),
            class_count,
            cuts,
            segments,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d0d0),
        };
        let out = model.output_shape_of(Segment::Final)?;
        if out != [class_count] {
            return Err(NnError::Shape(format!(
                "model produces {out:?}, expected [{class_count}] logits"
            )));
        }
        Ok(model)
    }

    pub fn segment(&self, seg: Segment) -> &Sequential {
        &self.segments[seg.index()]
    }

    pub fn segment_mut(&mut self, seg: Segment) -> &mut Sequential {
        &mut self.segments[seg.index()]
    }

    /// Reseed the dropout stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d0d0);
    }

    /// Per-sample output shape of a segment.
    pub fn output_shape_of(&self, seg: Segment) -> Result<Vec<usize>> {
        let mut s = self.input_shape.clone();
        for cur in Segment::ALL {
            s = self.segments[cur.index()].output_shape(&s)?;
            if cur == seg {
                break;
            }
        }
        Ok(s)
    }

    /// Per-sample input shape of a segment.
    pub fn input_shape_of(&self, seg: Segment) -> Result<Vec<usize>> {
        match seg {
            Segment::Beginning => Ok(self.input_shape.clone()),
            Segment::Intermediate => self.output_shape_of(Segment::Beginning),
            Segment::Final => self.output_shape_of(Segment::Intermediate),
        }
    }

    pub fn param_counts(&self) -> [usize; 3] {
        [
            self.segments[0].param_count(),
            self.segments[1].param_count(),
            self.segments[2].param_count(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_counts().iter().sum()
    }

    fn check_input(&self, x: &Tensor, seg: Segment) -> Result<()> {
        let want = self.input_shape_of(seg)?;
        if x.ndim() == 0 || x.shape()[1..] != want[..] {
            return Err(NnError::Shape(format!(
                "{} segment expects per-sample {want:?}, got {:?}",
                seg.name(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Run one segment. `train` selects training-mode normalization/dropout.
    pub fn segment_forward(&mut self, seg: Segment, x: &Tensor, train: bool) -> Result<Tensor> {
        let Self { segments, rng, .. } = self;
        let mut ctx = Ctx { train, rng };
        segments[seg.index()].forward(x, &mut ctx)
    }

    /// Run segments `start..=Final`; segments in `train_mask` use training mode.
    pub fn forward_from(
        &mut self,
        x: &Tensor,
        start: Segment,
        train_mask: SegmentMask,
    ) -> Result<Tensor> {
        self.check_input(x, start)?;
        let mut a = x.to_owned();
        for seg in Segment::ALL.into_iter().filter(|s| *s >= start) {
            a = self.segment_forward(seg, &a, train_mask.contains(seg))?;
        }
        Ok(a)
    }

    /// Inference-mode logits for one batch.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_from(x, Segment::Beginning, SegmentMask::NONE)
    }

    /// Backpropagate logit gradients from the final segment down to and
    /// including `stop`. Returns the gradient w.r.t. the input of `stop`.
    /// Requires a preceding forward pass over the same segments.
    pub fn backward_to(&mut self, grad: &Tensor, stop: Segment) -> Tensor {
        let mut g = grad.to_owned();
        for seg in Segment::ALL.into_iter().rev().filter(|s| *s >= stop) {
            g = self.segments[seg.index()].backward(&g);
        }
        g
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.segments {
            s.zero_grad();
        }
    }

    /// Inference-mode logits, evaluated in chunks.
    pub fn logits(&mut self, images: &Tensor) -> Result<Array2<f64>> {
        self.chunked(images, |m, x| m.forward(x))
    }

    pub fn predict(&mut self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0
            })
            .collect())
    }

    /// Feature rows at `tap`, inference mode.
    pub fn features(&mut self, images: &Tensor, tap: FeatureTap) -> Result<Array2<f64>> {
        self.check_input(images, Segment::Beginning)?;
        self.chunked(images, |m, x| m.features_batch(x, tap))
    }

    /// Feature map for one batch with caches populated, so that
    /// [`Self::features_backward`] can follow.
    pub fn features_batch(&mut self, x: &Tensor, tap: FeatureTap) -> Result<Tensor> {
        let a = self.segment_forward(Segment::Beginning, x, false)?;
        let mut a = self.segment_forward(Segment::Intermediate, &a, false)?;
        if tap == FeatureTap::Penultimate {
            let cut = self.penultimate_cut();
            let Self { segments, rng, .. } = self;
            let mut ctx = Ctx { train: false, rng };
            for l in &mut segments[2].layers[..cut] {
                a = l.forward(&a, &mut ctx)?;
            }
        }
        let n = a.shape()[0];
        let d = a.len() / n.max(1);
        Ok(a.as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[n, d]))
            .unwrap())
    }

    /// Gradient w.r.t. the model input of a loss on `features_batch` output.
    pub fn features_backward(&mut self, grad: &Tensor, tap: FeatureTap) -> Tensor {
        let mut g = grad.to_owned();
        if tap == FeatureTap::Penultimate {
            let cut = self.penultimate_cut();
            let shape = self
                .output_shape_of(Segment::Intermediate)
                .expect("model shapes validated");
            let mut shape_in = vec![g.shape()[0]];
            let mut s = shape;
            for l in &self.segments[2].layers[..cut] {
                s = l.output_shape(&s).expect("validated");
            }
            shape_in.extend(s);
            g = g.into_shape_with_order(IxDyn(&shape_in)).unwrap();
            for l in self.segments[2].layers[..cut].iter_mut().rev() {
                g = l.backward(&g);
            }
        } else {
            let mut shape = vec![g.shape()[0]];
            shape.extend(
                self.output_shape_of(Segment::Intermediate)
                    .expect("validated"),
            );
            g = g.into_shape_with_order(IxDyn(&shape)).unwrap();
        }
        let g = self.segments[1].backward(&g);
        self.segments[0].backward(&g)
    }

    /// Width of the feature vector at `tap`.
    pub fn feature_dim(&self, tap: FeatureTap) -> Result<usize> {
        let mut s = self.output_shape_of(Segment::Intermediate)?;
        if tap == FeatureTap::Penultimate {
            for l in &self.segments[2].layers[..self.penultimate_cut()] {
                s = l.output_shape(&s)?;
            }
        }
        Ok(s.iter().product())
    }

    fn penultimate_cut(&self) -> usize {
        self.segments[2]
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Linear(_)))
            .unwrap_or(0)
    }

    fn chunked<F>(&mut self, images: &Tensor, mut f: F) -> Result<Array2<f64>>
    where
        F: FnMut(&mut Self, &Tensor) -> Result<Tensor>,
    {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = images.slice_axis(Axis(0), (start..end).into()).to_owned();
            let out = f(self, &chunk)?;
            parts.push(out.into_dimensionality::<Ix2>().map_err(|e| {
                NnError::Shape(format!("expected rank-2 output: {e}"))
            })?);
            start = end;
        }
        if parts.is_empty() {
            let width = self.output_shape_of(Segment::Final)?.iter().product();
            return Ok(Array2::zeros((0, width)));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| NnError::Shape(e.to_string()))
    }

    pub fn params_of(&self, seg: Segment) -> Vec<&Param> {
        self.segments[seg.index()].params()
    }

    pub fn params_mut_of(&mut self, seg: Segment) -> Vec<&mut Param> {
        self.segments[seg.index()].params_mut()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.segments.iter().flat_map(|s| s.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.segments.iter_mut().flat_map(|s| s.params_mut()).collect()
    }

    /// Parameters of the segments in `mask`, shallow to deep.
    pub fn params_mut_masked(&mut self, mask: SegmentMask) -> Vec<&mut Param> {
        self.segments
            .iter_mut()
            .zip(Segment::ALL)
            .filter(|(_, seg)| mask.contains(*seg))
            .flat_map(|(s, _)| s.params_mut())
            .collect()
    }

    /// Normalization buffers of every segment.
    pub fn buffers(&self) -> Vec<&Tensor> {
        self.segments.iter().flat_map(|s| s.buffers()).collect()
    }

    /// Concatenated parameter vector of one segment.
    pub fn flat_params_of(&self, seg: Segment) -> Vec<f64> {
        self.params_of(seg)
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    /// Full parameter vector θ, segments in order.
    pub fn flat_params(&self) -> Vec<f64> {
        Segment::ALL
            .iter()
            .flat_map(|s| self.flat_params_of(*s))
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    pub fn flat_grads_of(&self, seg: Segment) -> Vec<f64> {
        self.params_of(seg)
            .iter()
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let total = self.param_count();
        if values.len() != total {
            return Err(NnError::Shape(format!(
                "expected {total} parameters, got {}",
                values.len()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value
                .iter_mut()
                .zip(&values[off..off + n])
                .for_each(|(d, s)| *d = *s);
            off += n;
        }
        Ok(())
    }

    /// Swap in a new final segment. Its input must match the intermediate
    /// output and it must emit `class_count` logits.
    pub fn replace_final(&mut self, head: Sequential) -> Result<()> {
        let input = self.output_shape_of(Segment::Intermediate)?;
        let out = head.output_shape(&input)?;
        if out != [self.class_count] {
            return Err(NnError::Shape(format!(
                "new final emits {out:?}, expected [{}]",
                self.class_count
            )));
        }
        self.segments[2] = head;
        Ok(())
    }

    /// Shallow-to-deep parameter groups, one per parameterized leaf layer.
    pub fn layer_groups(&self) -> Vec<(Segment, &'static str, Vec<&Param>)> {
        Segment::ALL
            .iter()
            .flat_map(|seg| {
                self.segments[seg.index()]
                    .leaf_param_groups()
                    .into_iter()
                    .map(move |(name, ps)| (*seg, name, ps))
            })
            .collect()
    }
}
