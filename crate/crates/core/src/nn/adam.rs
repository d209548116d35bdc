use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is clipped to before the update.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(&t.shape)).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clips to the configured global norm and applies one update. Returns
    /// the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) -> f64 {
        let norm = grads.grads.iter().flatten().map(|g| g.sum_squares()).sum::<f64>().sqrt();
        let clip = if norm > self.config.clip_norm { self.config.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamStore::new();
        let id = ps.add("p", Tensor::new(vec![2], vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &ps);
        let grads = Gradients { grads: vec![Some(Tensor::new(vec![2], vec![0.2, -0.05]))] };
        adam.update(&mut ps, &grads);
        let p = ps.get(id);
        assert!((p.data[0] - 0.9).abs() < 1e-6);
        assert!((p.data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let mut ps = ParamStore::new();
        ps.add("p", Tensor::zeros(&[2]));
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        let grads = Gradients { grads: vec![Some(Tensor::new(vec![2], vec![3.0, 4.0]))] };
        assert_eq!(adam.update(&mut ps, &grads), 5.0);
    }
}
