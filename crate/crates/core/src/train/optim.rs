use super::config::OptimConfig;
use crate::numerics::{deterministic_sum, Tensor};

/// Adaptive-moment optimizer with decoupled weight decay. Decay applies to
/// matrices only; vectors (biases, norm gains) are left undecayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self { first: params.iter().map(zeros).collect(), second: params.iter().map(zeros).collect(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], cfg: &OptimConfig, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * *w);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    deterministic_sum(grads.iter().map(Tensor::sum_sq)).sqrt()
}

/// Rescales `grads` to norm `max_norm` if larger; returns the pre-clip norm
/// and whether clipping happened.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, bool) {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}
