use crate::layers::Param;

/// Adam with bias correction. Moment buffers are keyed by slot position, so
/// callers must pass parameters in a stable order between steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Drop all moment state.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        let mut values: Vec<&mut [f64]> = Vec::with_capacity(params.len());
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.len());
        for p in params.iter_mut() {
            let Param { value, grad, .. } = &mut **p;
            grads.push(grad.iter().copied().collect());
            values.push(value.as_slice_mut().expect("parameters are contiguous"));
        }
        let grads: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        self.step_raw(&mut values, &grads);
    }

    /// One update over raw slices. `values[i]` and `grads[i]` must have equal length.
    pub fn step_raw(&mut self, values: &mut [&mut [f64]], grads: &[&[f64]]) {
        if self.m.len() != values.len() {
            self.m = values.iter().map(|v| vec![0.0; v.len()]).collect();
            self.v = values.iter().map(|v| vec![0.0; v.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (slot, (value, grad)) in values.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::new(0.1);
        let mut x = vec![1.0, -2.0];
        opt.step_raw(&mut [x.as_mut_slice()], &[&[3.0, -0.5]]);
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut x = vec![3.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.0)];
            opt.step_raw(&mut [x.as_mut_slice()], &[&g]);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }
}
