//! Training objectives over logits.
//!
//! An [`Objective`] maps a batch of logits to a mean loss and the gradient of
//! that mean w.r.t. the logits. `idx` carries each row's position in the
//! sample set being trained on, so per-sample targets (teacher logits,
//! regression targets) can be looked up.

use ndarray::{Array2, ArrayView1, Axis};

pub trait Objective {
    fn evaluate(&self, logits: &Array2<f64>, labels: &[usize], idx: &[usize]) -> (f64, Array2<f64>);
}

/// Row-wise softmax of `logits / t`.
pub fn softmax(logits: &Array2<f64>, t: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v / t);
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-sample cross-entropy `-log softmax(z)[y]`.
pub fn cross_entropy_per_sample(logits: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(r, &y)| log_sum_exp(r) - r[y])
        .collect()
}

/// Mean cross-entropy against integer labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn evaluate(&self, logits: &Array2<f64>, labels: &[usize], _idx: &[usize]) -> (f64, Array2<f64>) {
        let n = logits.nrows() as f64;
        let loss = cross_entropy_per_sample(logits, labels).iter().sum::<f64>() / n;
        let mut g = softmax(logits, 1.0);
        for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
            row[y] -= 1.0;
        }
        g.mapv_inplace(|v| v / n);
        (loss, g)
    }
}

/// Mean squared error between logits and per-sample target rows.
#[derive(Debug, Clone)]
pub struct Mse {
    pub targets: Array2<f64>,
}

impl Mse {
    pub fn new(targets: Array2<f64>) -> Self {
        Self { targets }
    }

    /// Targets are one-hot encodings of `labels`.
    pub fn one_hot(labels: &[usize], classes: usize) -> Self {
        let mut t = Array2::zeros((labels.len(), classes));
        for (i, &y) in labels.iter().enumerate() {
            t[[i, y]] = 1.0;
        }
        Self { targets: t }
    }
}

impl Objective for Mse {
    fn evaluate(&self, logits: &Array2<f64>, _labels: &[usize], idx: &[usize]) -> (f64, Array2<f64>) {
        let target = self.targets.select(Axis(0), idx);
        let diff = logits - &target;
        let m = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / m;
        (loss, diff.mapv(|d| 2.0 * d / m))
    }
}

/// Knowledge distillation: `hw·CE(z, y) + sw·T²·KL(p_teacher,T ‖ p_student,T)`,
/// averaged over the batch. Optional per-sample weights scale each term.
#[derive(Debug, Clone)]
pub struct Distill {
    /// Teacher logits, one row per training sample.
    pub teacher: Array2<f64>,
    pub temperature: f64,
    pub hw: f64,
    pub sw: f64,
    pub ce_weights: Option<Vec<f64>>,
    pub kl_weights: Option<Vec<f64>>,
}

impl Distill {
    pub fn new(teacher: Array2<f64>, temperature: f64, hw: f64, sw: f64) -> Self {
        Self {
            teacher,
            temperature,
            hw,
            sw,
            ce_weights: None,
            kl_weights: None,
        }
    }

    pub fn with_sample_weights(mut self, ce: Vec<f64>, kl: Vec<f64>) -> Self {
        self.ce_weights = Some(ce);
        self.kl_weights = Some(kl);
        self
    }
}

impl Objective for Distill {
    fn evaluate(&self, logits: &Array2<f64>, labels: &[usize], idx: &[usize]) -> (f64, Array2<f64>) {
        let n = logits.nrows() as f64;
        let mut loss = 0.0;
        let mut grad = Array2::zeros(logits.raw_dim());
        // zero-weight terms are skipped so that the reduction to plain CE is exact
        if self.hw != 0.0 {
            let ce = cross_entropy_per_sample(logits, labels);
            let mut g = softmax(logits, 1.0);
            for (i, (mut row, &y)) in g.rows_mut().into_iter().zip(labels).enumerate() {
                row[y] -= 1.0;
                let w = self.ce_weights.as_ref().map_or(1.0, |w| w[idx[i]]);
                if w != 1.0 {
                    row.mapv_inplace(|v| v * w);
                }
                loss += w * ce[i];
            }
            loss *= self.hw;
            grad = g.mapv(|v| v * self.hw / n);
            loss /= n;
        }
        if self.sw != 0.0 {
            let t = self.temperature;
            let teacher = self.teacher.select(Axis(0), idx);
            let pt = softmax(&teacher, t);
            let ps = softmax(logits, t);
            let mut kl_sum = 0.0;
            for i in 0..logits.nrows() {
                let w = self.kl_weights.as_ref().map_or(1.0, |w| w[idx[i]]);
                if w == 0.0 {
                    continue;
                }
                let zs = logits.row(i).mapv(|v| v / t);
                let zt = teacher.row(i).mapv(|v| v / t);
                let (ls, lt) = (log_sum_exp(zs.view()), log_sum_exp(zt.view()));
                let kl: f64 = (0..logits.ncols())
                    .filter(|&k| pt[[i, k]] > 0.0)
                    .map(|k| pt[[i, k]] * ((zt[k] - lt) - (zs[k] - ls)))
                    .sum();
                kl_sum += w * kl;
                // d/dz of T²·KL at temperature T is T·(p_s − p_t)
                for k in 0..logits.ncols() {
                    grad[[i, k]] += self.sw * w * t * (ps[[i, k]] - pt[[i, k]]) / n;
                }
            }
            loss += self.sw * t * t * kl_sum / n;
        }
        (loss, grad)
    }
}

/// Weighted sum of objectives.
pub struct Composite<'a> {
    pub terms: Vec<(f64, &'a dyn Objective)>,
}

impl Objective for Composite<'_> {
    fn evaluate(&self, logits: &Array2<f64>, labels: &[usize], idx: &[usize]) -> (f64, Array2<f64>) {
        let mut loss = 0.0;
        let mut grad = Array2::zeros(logits.raw_dim());
        for (w, obj) in &self.terms {
            let (l, g) = obj.evaluate(logits, labels, idx);
            loss += w * l;
            grad.scaled_add(*w, &g);
        }
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(obj: &dyn Objective, z: &Array2<f64>, y: &[usize], idx: &[usize]) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(z.raw_dim());
        for i in 0..z.nrows() {
            for k in 0..z.ncols() {
                let mut p = z.clone();
                p[[i, k]] += eps;
                let mut m = z.clone();
                m[[i, k]] -= eps;
                g[[i, k]] = (obj.evaluate(&p, y, idx).0 - obj.evaluate(&m, y, idx).0) / (2.0 * eps);
            }
        }
        g
    }

    fn check(obj: &dyn Objective) {
        let z = array![[0.3, -1.2, 2.0], [1.5, 0.1, -0.4]];
        let y = [2, 0];
        let idx = [1, 0];
        let (_, g) = obj.evaluate(&z, &y, &idx);
        let n = numeric_grad(obj, &z, &y, &idx);
        for (a, b) in g.iter().zip(n.iter()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        check(&CrossEntropy);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        check(&Mse::one_hot(&[1, 2], 3));
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let teacher = array![[1.0, 0.0, -1.0], [0.2, 0.9, 0.4]];
        check(&Distill::new(teacher.clone(), 4.0, 0.3, 0.7));
        check(&Distill::new(teacher, 2.0, 1.0, 1.0).with_sample_weights(vec![0.0, 1.0], vec![0.5, 2.0]));
    }

    #[test]
    fn distill_without_soft_term_equals_cross_entropy_bitwise() {
        let z = array![[0.3, -1.2, 2.0], [1.5, 0.1, -0.4]];
        let d = Distill::new(Array2::zeros((2, 3)), 4.0, 1.0, 0.0);
        let (la, ga) = d.evaluate(&z, &[2, 0], &[0, 1]);
        let (lb, gb) = CrossEntropy.evaluate(&z, &[2, 0], &[0, 1]);
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn kl_vanishes_when_student_equals_teacher() {
        let z = array![[0.3, -1.2, 2.0]];
        let (l, g) = Distill::new(z.clone(), 3.0, 0.0, 1.0).evaluate(&z, &[0], &[0]);
        assert!(l.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let z = array![[1000.0, 0.0]];
        let l = cross_entropy_per_sample(&z, &[1]);
        assert!((l[0] - 1000.0).abs() < 1e-9);
    }
}
