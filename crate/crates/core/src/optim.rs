use std::collections::BTreeMap;

use crate::networks::ParamSet;
use crate::tensor::Tensor;

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    /// β₁ = 0, β₂ = 0.99.
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.0, beta2: 0.99, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates every parameter that has a gradient; others are left alone.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = f64::from(g);
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = (f64::from(*w) - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[2], vec![1.0f32, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(&[2], vec![0.5f32, -3.0]));
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &grads);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[1], vec![3.0f32]));
        let mut opt = Adam::new(0.05);
        for _ in 0..400 {
            let w = p.get("w").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::new(&[1], vec![2.0 * (w - 1.0)]));
            opt.step(&mut p, &grads);
        }
        assert!((p.get("w").unwrap().data()[0] - 1.0).abs() < 0.05);
    }
}
