//! One synthetic image per cluster, by fast distribution matching (a
//! trainable convex combination of the cluster's images) or by model
//! inversion through a frozen classifier.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis, Ix2, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterIndex;
use crate::data::LabeledDataset;
use crate::nnkit::layers::{ConvTranspose2d, Ctx, Layer, Linear, Relu, Sigmoid};
use crate::nnkit::loss::{CrossEntropy, Objective};
use crate::nnkit::{arch::reshape_layer, Adam, FeatureTap, NnError, Segment, Sequential};
use crate::{invalid, Error, PartitionedModel, Result, Samples, Tensor};

const CLUSTER_CHUNK: usize = 256;
const FEATURE_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondenseMethod {
    Fdm,
    Inversion,
}

/// Condensed images φ_ij with their class labels, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedSet {
    pub method: CondenseMethod,
    pub k: usize,
    /// `[clusters, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `(class, j)` of each row.
    pub clusters: Vec<(usize, usize)>,
    pub meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    method: CondenseMethod,
    k: usize,
    image_shape: Vec<usize>,
    labels: Vec<usize>,
    clusters: Vec<(usize, usize)>,
    meta: serde_json::Value,
}

impl CondensedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, class: usize, j: usize) -> Option<usize> {
        self.clusters.iter().position(|&c| c == (class, j))
    }

    pub fn samples(&self) -> Samples {
        Samples {
            images: self.images.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Write `<stem>.bin` (tensor) and `<stem>.json` (sidecar).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        write_tensor(stem.with_extension("bin"), &self.images)?;
        let side = Sidecar {
            method: self.method,
            k: self.k,
            image_shape: self.images.shape()[1..].to_vec(),
            labels: self.labels.clone(),
            clusters: self.clusters.clone(),
            meta: self.meta.clone(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let side: Sidecar = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
        let images = read_tensor(stem.with_extension("bin"))?;
        if images.shape()[0] != side.labels.len() || images.shape()[1..] != side.image_shape[..] {
            return Err(Error::Mismatch("condensed tensor does not match sidecar".into()));
        }
        Ok(Self {
            method: side.method,
            k: side.k,
            images,
            labels: side.labels,
            clusters: side.clusters,
            meta: side.meta,
        })
    }
}

const TENSOR_MAGIC: &[u8; 8] = b"UNFTENS1";

/// Magic, `u64` rank, `u64` dims, then little-endian `f64` values.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(TENSOR_MAGIC)?;
    f.write_all(&(t.ndim() as u64).to_le_bytes())?;
    for &d in t.shape() {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    if &word != TENSOR_MAGIC {
        return Err(Error::Mismatch("not a tensor file".into()));
    }
    r.read_exact(&mut word)?;
    let rank = u64::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u64::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != n * 8 {
        return Err(Error::Mismatch("tensor file length does not match its shape".into()));
    }
    let data = r.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_shape_vec(IxDyn(&shape), data).expect("length checked"))
}

/// Differentiable feature extractor used as the matching space.
pub trait FeatureMap {
    /// Feature rows for a batch `[N, C, H, W]`.
    fn forward(&mut self, x: &Tensor) -> Result<Array2<f64>>;
    /// Gradient w.r.t. the last `forward` input.
    fn backward(&mut self, grad: &Array2<f64>) -> Tensor;
}

/// Features of a frozen model at a tap, inference mode.
pub struct ModelFeatures<'a> {
    pub model: &'a mut PartitionedModel,
    pub tap: FeatureTap,
}

impl FeatureMap for ModelFeatures<'_> {
    fn forward(&mut self, x: &Tensor) -> Result<Array2<f64>> {
        Ok(self
            .model
            .features_batch(x, self.tap)?
            .into_dimensionality::<Ix2>()
            .map_err(|e| NnError::Shape(e.to_string()))?)
    }

    fn backward(&mut self, grad: &Array2<f64>) -> Tensor {
        let g = self.model.features_backward(&grad.clone().into_dyn(), self.tap);
        self.model.zero_grad();
        g
    }
}

/// `f(x) = A · vec(x)`.
pub struct LinearFeatures {
    pub a: Array2<f64>,
    shape: Vec<usize>,
}

impl LinearFeatures {
    pub fn new(a: Array2<f64>) -> Self {
        Self { a, shape: Vec::new() }
    }
}

impl FeatureMap for LinearFeatures {
    fn forward(&mut self, x: &Tensor) -> Result<Array2<f64>> {
        let n = x.shape()[0];
        self.shape = x.shape().to_vec();
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, x.len() / n.max(1)))
            .map_err(|e| NnError::Shape(e.to_string()))?;
        if flat.ncols() != self.a.ncols() {
            return Err(invalid(format!(
                "linear features expect {} inputs, got {}",
                self.a.ncols(),
                flat.ncols()
            )));
        }
        Ok(flat.dot(&self.a.t()))
    }

    fn backward(&mut self, grad: &Array2<f64>) -> Tensor {
        grad.dot(&self.a)
            .into_shape_with_order(IxDyn(&self.shape))
            .expect("shape of last forward")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FdmInit {
    /// ω = 0, i.e. the plain cluster mean.
    Uniform,
    /// ω ~ N(0, 1).
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdmConfig {
    pub epochs: usize,
    pub lr: f64,
    pub init: FdmInit,
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            init: FdmInit::Uniform,
        }
    }
}

/// Trainable logits ω of one cluster; weights are `softmax(ω)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdmWeights {
    pub omega: Vec<f64>,
}

impl FdmWeights {
    pub fn normalized(&self) -> Vec<f64> {
        let m = self.omega.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.omega.iter().map(|w| (w - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FdmOutcome {
    pub set: CondensedSet,
    /// Best weights found per cluster, aligned with `set`.
    pub weights: Vec<FdmWeights>,
    pub initial_loss: Vec<f64>,
    pub final_loss: Vec<f64>,
}

fn flatten_rows(t: &Tensor) -> Array2<f64> {
    let n = t.shape()[0];
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, t.len() / n.max(1)))
        .expect("contiguous")
}

fn mean_features(fmap: &mut dyn FeatureMap, images: &Tensor) -> Result<Array1<f64>> {
    let n = images.shape()[0];
    let mut sum: Option<Array1<f64>> = None;
    let mut start = 0;
    while start < n {
        let end = (start + FEATURE_CHUNK).min(n);
        let f = fmap.forward(&images.slice_axis(Axis(0), (start..end).into()).to_owned())?;
        let s = f.sum_axis(Axis(0));
        sum = Some(match sum {
            Some(acc) => acc + s,
            None => s,
        });
        start = end;
    }
    Ok(sum.expect("non-empty cluster") / n as f64)
}

/// Fast distribution matching: per cluster, minimise
/// `‖mean F(Γ) − F(Σ softmax(ω)_k Γ_k)‖₂` over ω with Adam. The best iterate
/// is kept, so the reported loss never exceeds the initial one.
pub fn condense_fdm(
    clusters: &ClusterIndex,
    ds: &LabeledDataset,
    fmap: &mut dyn FeatureMap,
    cfg: &FdmConfig,
) -> Result<FdmOutcome> {
    if cfg.epochs < 1 {
        return Err(invalid("FDM needs at least one epoch"));
    }
    if !(cfg.lr > 0.0) {
        return Err(invalid("FDM lr must be positive"));
    }
    let all: Vec<(usize, usize, &[usize])> = clusters.iter().collect();
    if all.iter().any(|c| c.2.is_empty()) {
        return Err(Error::Empty("cluster".into()));
    }
    let image_shape = ds.image_shape();
    let mut rng = match cfg.init {
        FdmInit::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        FdmInit::Uniform => None,
    };
    let mut images = Vec::with_capacity(all.len());
    let mut weights = Vec::with_capacity(all.len());
    let mut initial_loss = Vec::with_capacity(all.len());
    let mut final_loss = Vec::with_capacity(all.len());
    for chunk in all.chunks(CLUSTER_CHUNK) {
        let xs: Vec<Array2<f64>> = chunk
            .iter()
            .map(|c| flatten_rows(&ds.images.select(Axis(0), c.2)))
            .collect();
        let targets: Vec<Array1<f64>> = chunk
            .iter()
            .map(|c| mean_features(fmap, &ds.images.select(Axis(0), c.2)))
            .collect::<Result<_>>()?;
        let mut omega: Vec<Vec<f64>> = chunk
            .iter()
            .map(|c| match &mut rng {
                Some(r) => (0..c.2.len()).map(|_| StandardNormal.sample(r)).collect(),
                None => vec![0.0; c.2.len()],
            })
            .collect();
        let mut best: Vec<(f64, Vec<f64>)> = omega.iter().map(|w| (f64::INFINITY, w.clone())).collect();
        let mut first = vec![0.0; chunk.len()];
        let mut opt = Adam::new(cfg.lr);
        for epoch in 0..=cfg.epochs {
            let w: Vec<Vec<f64>> = omega
                .iter()
                .map(|o| FdmWeights { omega: o.clone() }.normalized())
                .collect();
            let phi = stack_combinations(&xs, &w, &image_shape);
            let f = fmap.forward(&phi)?;
            let mut gf = Array2::zeros(f.raw_dim());
            for (c, target) in targets.iter().enumerate() {
                let diff = &f.row(c) - target;
                let loss = diff.dot(&diff).sqrt();
                if !loss.is_finite() {
                    return Err(NnError::NonFiniteLoss { epoch, step: c }.into());
                }
                if epoch == 0 {
                    first[c] = loss;
                }
                if loss < best[c].0 {
                    best[c] = (loss, omega[c].clone());
                }
                if loss > 0.0 {
                    gf.row_mut(c).assign(&(diff / loss));
                }
            }
            if epoch == cfg.epochs {
                break;
            }
            let gphi = flatten_rows(&fmap.backward(&gf));
            let grads: Vec<Vec<f64>> = (0..chunk.len())
                .map(|c| {
                    let dw = xs[c].dot(&gphi.row(c));
                    let avg: f64 = w[c].iter().zip(&dw).map(|(a, b)| a * b).sum();
                    w[c].iter().zip(&dw).map(|(wk, d)| wk * (d - avg)).collect()
                })
                .collect();
            let mut vals: Vec<&mut [f64]> = omega.iter_mut().map(|o| o.as_mut_slice()).collect();
            let gs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            opt.step_raw(&mut vals, &gs);
        }
        let best_w: Vec<Vec<f64>> = best
            .iter()
            .map(|(_, o)| FdmWeights { omega: o.clone() }.normalized())
            .collect();
        images.push(stack_combinations(&xs, &best_w, &image_shape));
        for (c, (loss, o)) in best.into_iter().enumerate() {
            initial_loss.push(first[c]);
            final_loss.push(loss);
            weights.push(FdmWeights { omega: o });
        }
    }
    let views: Vec<_> = images.iter().map(|t| t.view()).collect();
    let images = ndarray::concatenate(Axis(0), &views).map_err(|e| NnError::Shape(e.to_string()))?;
    let set = CondensedSet {
        method: CondenseMethod::Fdm,
        k: clusters.k,
        images,
        labels: all.iter().map(|c| c.0).collect(),
        clusters: all.iter().map(|c| (c.0, c.1)).collect(),
        meta: serde_json::json!({ "epochs": cfg.epochs, "lr": cfg.lr, "init": cfg.init }),
    };
    Ok(FdmOutcome {
        set,
        weights,
        initial_loss,
        final_loss,
    })
}

/// FDM against the intermediate-segment features of a frozen model.
pub fn condense_fdm_model(
    clusters: &ClusterIndex,
    ds: &LabeledDataset,
    model: &mut PartitionedModel,
    cfg: &FdmConfig,
) -> Result<FdmOutcome> {
    let mut fmap = ModelFeatures {
        model,
        tap: FeatureTap::Intermediate,
    };
    condense_fdm(clusters, ds, &mut fmap, cfg)
}

fn stack_combinations(xs: &[Array2<f64>], w: &[Vec<f64>], image_shape: &[usize]) -> Tensor {
    let p: usize = image_shape.iter().product();
    let mut out = Array2::zeros((xs.len(), p));
    for (c, x) in xs.iter().enumerate() {
        out.row_mut(c).assign(&Array1::from_vec(w[c].clone()).dot(x));
    }
    let mut shape = vec![xs.len()];
    shape.extend_from_slice(image_shape);
    out.into_shape_with_order(IxDyn(&shape)).expect("sizes agree")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub epochs: usize,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lambda: 1.0,
            lr: 1e-3,
            batch_size: 64,
            hidden: 128,
            seed: 0,
        }
    }
}

/// Generator Λ from one-hot cluster labels to images.
///
/// One-hot → linear → ReLU → linear → ReLU → reshape → two stride-2
/// transposed convolutions → sigmoid. Images whose sides are not multiples
/// of 4 use a dense decoder instead.
#[derive(Debug, Clone)]
pub struct InverterNet {
    pub net: Sequential,
    pub label_count: usize,
    pub image_shape: Vec<usize>,
    rng: ChaCha8Rng,
}

impl InverterNet {
    pub fn new(label_count: usize, image_shape: &[usize], hidden: usize, seed: u64) -> Result<Self> {
        if image_shape.len() != 3 || label_count == 0 || hidden == 0 {
            return Err(invalid(format!(
                "inverter needs [C, H, W], labels and width, got {image_shape:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (image_shape[0], image_shape[1], image_shape[2]);
        let mut layers = vec![
            Layer::Linear(Linear::new(label_count, hidden, true, &mut rng)),
            Layer::Relu(Relu::default()),
        ];
        if h % 4 == 0 && w % 4 == 0 && h >= 4 && w >= 4 {
            let ch = 16;
            layers.extend([
                Layer::Linear(Linear::new(hidden, ch * (h / 4) * (w / 4), true, &mut rng)),
                Layer::Relu(Relu::default()),
                reshape_layer(&[ch, h / 4, w / 4]),
                Layer::ConvTranspose2d(ConvTranspose2d::new(ch, ch, 4, 2, 1, true, &mut rng)),
                Layer::Relu(Relu::default()),
                Layer::ConvTranspose2d(ConvTranspose2d::new(ch, c, 4, 2, 1, true, &mut rng)),
            ]);
        } else {
            layers.extend([
                Layer::Linear(Linear::new(hidden, c * h * w, true, &mut rng)),
                reshape_layer(image_shape),
            ]);
        }
        layers.push(Layer::Sigmoid(Sigmoid::default()));
        let net = Sequential::new(layers);
        let out = net.output_shape(&[label_count])?;
        if out != image_shape {
            return Err(NnError::Shape(format!("inverter emits {out:?}, expected {image_shape:?}")).into());
        }
        Ok(Self {
            net,
            label_count,
            image_shape: image_shape.to_vec(),
            rng,
        })
    }

    fn one_hot(&self, labels: &[usize]) -> Tensor {
        let mut x = Tensor::zeros(IxDyn(&[labels.len(), self.label_count]));
        for (r, &l) in labels.iter().enumerate() {
            x[[r, l]] = 1.0;
        }
        x
    }

    fn forward(&mut self, labels: &[usize]) -> Result<Tensor> {
        let x = self.one_hot(labels);
        let Self { net, rng, .. } = self;
        Ok(net.forward(&x, &mut Ctx { train: true, rng })?)
    }

    /// Λ(l) for each label, clamped to [0, 1].
    pub fn generate(&mut self, labels: &[usize]) -> Result<Tensor> {
        Ok(self.forward(labels)?.mapv(|v| v.clamp(0.0, 1.0)))
    }
}

/// Training pairs for the inverter: cluster label, class label and an
/// optional target image row.
pub struct InversionPairs<'a> {
    pub cluster_labels: Vec<usize>,
    pub classes: Vec<usize>,
    /// Images and per-pair row indices for the MSE term; `None` drops it.
    pub targets: Option<(&'a Tensor, Vec<usize>)>,
}

/// Train Λ through the frozen `model` on
/// `CE(MΛ(l_ij), l_i) + λ·MSE(Λ(l_ij), target)`. Returns per-epoch mean loss.
pub fn train_inverter(
    gen: &mut InverterNet,
    model: &mut PartitionedModel,
    pairs: &InversionPairs<'_>,
    cfg: &InversionConfig,
) -> Result<Vec<f64>> {
    if !(cfg.lambda >= 0.0) {
        return Err(invalid(format!("lambda must be non-negative, got {}", cfg.lambda)));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(invalid("inversion needs a positive lr and batch size"));
    }
    let n = pairs.cluster_labels.len();
    if n == 0 {
        return Err(Error::Empty("inversion pairs".into()));
    }
    let use_mse = cfg.lambda > 0.0 && pairs.targets.is_some();
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| pairs.cluster_labels[i]).collect();
            let classes: Vec<usize> = idx.iter().map(|&i| pairs.classes[i]).collect();
            gen.net.zero_grad();
            let out = gen.forward(&labels)?;
            let logits = model
                .forward(&out)?
                .into_dimensionality::<Ix2>()
                .map_err(|e| NnError::Shape(e.to_string()))?;
            let (mut loss, glog) = CrossEntropy.evaluate(&logits, &classes, idx);
            let mut g = model.backward_to(&glog.into_dyn(), Segment::Beginning);
            if use_mse {
                let (images, rows) = pairs.targets.as_ref().expect("checked");
                let sel: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
                let diff = &out - &images.select(Axis(0), &sel);
                let m = diff.len() as f64;
                loss += cfg.lambda * diff.iter().map(|d| d * d).sum::<f64>() / m;
                g.zip_mut_with(&diff, |gv, &d| *gv += cfg.lambda * 2.0 * d / m);
            }
            if !loss.is_finite() {
                model.zero_grad();
                return Err(NnError::NonFiniteLoss { epoch, step }.into());
            }
            gen.net.backward(&g);
            opt.step(&mut gen.net.params_mut());
            total += loss * idx.len() as f64;
        }
        history.push(total / n as f64);
    }
    model.zero_grad();
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct InversionOutcome {
    pub set: CondensedSet,
    pub inverter: InverterNet,
    pub epoch_loss: Vec<f64>,
}

/// Model-inversion condensation: train Λ on every (cluster label, member)
/// pair, then emit φ_ij = Λ(l_ij). The model is never written.
pub fn condense_inversion(
    clusters: &ClusterIndex,
    ds: &LabeledDataset,
    model: &mut PartitionedModel,
    cfg: &InversionConfig,
) -> Result<InversionOutcome> {
    let label_count = clusters.class_count() * clusters.k;
    let mut gen = InverterNet::new(label_count, &ds.image_shape(), cfg.hidden, cfg.seed)?;
    let mut cluster_labels = Vec::new();
    let mut classes = Vec::new();
    let mut rows = Vec::new();
    for (i, j, members) in clusters.iter() {
        for &m in members {
            cluster_labels.push(clusters.cluster_label(i, j));
            classes.push(i);
            rows.push(m);
        }
    }
    let pairs = InversionPairs {
        cluster_labels,
        classes,
        targets: Some((&ds.images, rows)),
    };
    let epoch_loss = train_inverter(&mut gen, model, &pairs, cfg)?;
    let keys: Vec<(usize, usize)> = clusters.iter().map(|c| (c.0, c.1)).collect();
    let labels: Vec<usize> = keys.iter().map(|&(i, j)| clusters.cluster_label(i, j)).collect();
    let images = gen.generate(&labels)?;
    let set = CondensedSet {
        method: CondenseMethod::Inversion,
        k: clusters.k,
        images,
        labels: keys.iter().map(|k| k.0).collect(),
        clusters: keys,
        meta: serde_json::json!({
            "epochs": cfg.epochs,
            "lambda": cfg.lambda,
            "lr": cfg.lr,
            "batch_size": cfg.batch_size,
            "hidden": cfg.hidden,
            "seed": cfg.seed,
        }),
    };
    Ok(InversionOutcome {
        set,
        inverter: gen,
        epoch_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy(images: Vec<f64>, n: usize) -> LabeledDataset {
        let t = Tensor::from_shape_vec(IxDyn(&[n, 1, 1, images.len() / n]), images).unwrap();
        LabeledDataset::new("toy", t, vec![0; n], 1).unwrap()
    }

    fn one_cluster(n: usize) -> ClusterIndex {
        ClusterIndex {
            k: 1,
            seed: 0,
            feature_dim: 0,
            feature_checksum: String::new(),
            classes: vec![vec![(0..n).collect()]],
            warnings: vec![],
        }
    }

    #[test]
    fn identical_images_condense_to_themselves() {
        let ds = toy(vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7], 3);
        let mut f = LinearFeatures::new(array![[1.0, -2.0], [0.5, 0.5]]);
        let out = condense_fdm(&one_cluster(3), &ds, &mut f, &FdmConfig { epochs: 5, ..Default::default() }).unwrap();
        assert!(out.final_loss[0] < 1e-15);
        assert!((out.set.images[[0, 0, 0, 0]] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn singleton_cluster_is_exact() {
        let ds = toy(vec![0.25, 0.5], 1);
        let mut f = LinearFeatures::new(array![[1.0, 1.0]]);
        let out = condense_fdm(&one_cluster(1), &ds, &mut f, &FdmConfig::default()).unwrap();
        assert_eq!(out.set.images.iter().copied().collect::<Vec<_>>(), vec![0.25, 0.5]);
    }

    #[test]
    fn zero_epochs_rejected() {
        let ds = toy(vec![0.25, 0.5], 1);
        let mut f = LinearFeatures::new(array![[1.0, 1.0]]);
        let cfg = FdmConfig { epochs: 0, ..Default::default() };
        assert!(condense_fdm(&one_cluster(1), &ds, &mut f, &cfg).is_err());
    }

    #[test]
    fn softmax_weights_are_convex() {
        let w = FdmWeights { omega: vec![3.0, -1.0, 0.5] }.normalized();
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inverter_output_matches_image_shape() {
        let mut g = InverterNet::new(6, &[3, 8, 8], 16, 0).unwrap();
        assert_eq!(g.generate(&[0, 5]).unwrap().shape(), &[2, 3, 8, 8]);
        let mut g = InverterNet::new(2, &[1, 3, 5], 8, 0).unwrap();
        assert_eq!(g.generate(&[1]).unwrap().shape(), &[1, 1, 3, 5]);
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_shape_fn(IxDyn(&[2, 1, 2, 3]), |i| (i[0] * 7 + i[3]) as f64 * 0.1);
        let p = dir.path().join("t.bin");
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }
}
