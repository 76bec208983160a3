use ndarray::{Axis, IxDyn};

use crate::{NnError, Result, Tensor};

/// Image batch with integer labels. Images are `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(NnError::Shape(format!(
                "samples need rank-4 images, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(NnError::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn empty(image_shape: &[usize]) -> Self {
        let mut s = vec![0];
        s.extend_from_slice(image_shape);
        Self {
            images: Tensor::zeros(IxDyn(&s)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(&self, other: &Samples) -> Result<Self> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.image_shape() != other.image_shape() {
            return Err(NnError::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.image_shape(),
                other.image_shape()
            )));
        }
        let images = ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()])
            .map_err(|e| NnError::Shape(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self { images, labels })
    }
}
