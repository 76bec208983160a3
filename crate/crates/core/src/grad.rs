//! Loss gradients over the full parameter vector, inference mode.

use ndarray::{Axis, Ix2};

use crate::nnkit::loss::{cross_entropy_per_sample, CrossEntropy, Objective};
use crate::nnkit::{NnError, Segment};
use crate::{Error, PartitionedModel, Result, Samples};

const CHUNK: usize = 256;

/// Mean cross-entropy over `samples` and its gradient with respect to θ.
///
/// Every segment runs in inference mode. The gradient is also left in each
/// parameter's `grad` field, so per-layer views can be read afterwards.
pub fn mean_loss_gradient(model: &mut PartitionedModel, samples: &Samples) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set for gradient".into()));
    }
    let n = samples.len();
    model.zero_grad();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = samples.images.slice_axis(Axis(0), (start..end).into()).to_owned();
        let labels = &samples.labels[start..end];
        let logits = model
            .forward(&x)?
            .into_dimensionality::<Ix2>()
            .map_err(|e| NnError::Shape(e.to_string()))?;
        let idx: Vec<usize> = (start..end).collect();
        let (loss, mut g) = CrossEntropy.evaluate(&logits, labels, &idx);
        let w = (end - start) as f64 / n as f64;
        g.mapv_inplace(|v| v * w);
        total += loss * w;
        model.backward_to(&g.into_dyn(), Segment::Beginning);
        start = end;
    }
    Ok((total, model.flat_grads()))
}

/// Per-sample cross-entropy losses, inference mode.
pub fn per_sample_losses(model: &mut PartitionedModel, samples: &Samples) -> Result<Vec<f64>> {
    let logits = model.logits(&samples.images)?;
    Ok(cross_entropy_per_sample(&logits, &samples.labels))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{build_model, ArchSpec};
    use crate::Tensor;
    use ndarray::IxDyn;

    #[test]
    fn chunked_gradient_matches_finite_differences() {
        let mut m = build_model(&ArchSpec::mlp(3), &[1, 1, 2], 2, None, 4).unwrap();
        let n = 300;
        let x = Tensor::from_shape_fn(IxDyn(&[n, 1, 1, 2]), |i| ((i[0] * 7 + i[3] * 3) % 11) as f64 / 11.0);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let s = Samples::new(x, y).unwrap();
        let (_, g) = mean_loss_gradient(&mut m, &s).unwrap();
        let theta = m.flat_params();
        let h = 1e-6;
        for k in [0, 5, theta.len() - 1] {
            let mut t = theta.clone();
            t[k] += h;
            m.set_flat_params(&t).unwrap();
            let up: f64 = per_sample_losses(&mut m, &s).unwrap().iter().sum::<f64>() / n as f64;
            t[k] -= 2.0 * h;
            m.set_flat_params(&t).unwrap();
            let down: f64 = per_sample_losses(&mut m, &s).unwrap().iter().sum::<f64>() / n as f64;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn cosine_of_zero_vector_is_undefined() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_eq!(cosine(&[2.0, 0.0], &[1.0, 0.0]), Some(1.0));
    }
}
