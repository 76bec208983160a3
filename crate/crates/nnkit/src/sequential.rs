use crate::layers::{Ctx, Layer, Param};
use crate::{Result, Tensor};

/// Ordered stack of layers. An empty stack is the identity map.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        let mut a = x.to_owned();
        for l in &mut self.layers {
            a = l.forward(&a, ctx)?;
        }
        Ok(a)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.to_owned();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in &self.layers {
            s = l.output_shape(&s)?;
        }
        Ok(s)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn leaf_param_groups(&self) -> Vec<(&'static str, Vec<&Param>)> {
        self.layers
            .iter()
            .flat_map(|l| l.leaf_param_groups())
            .collect()
    }
}
