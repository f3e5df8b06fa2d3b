//! AdamW with decoupled weight decay, plus the warm-up / polynomial-decay
//! learning-rate schedule.

use crate::params::ParamStore;
use crate::tensor::Real;

pub struct AdamW<F: Real> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<F: Real> AdamW<F> {
    pub fn new(store: &ParamStore<F>, weight_decay: f64) -> Self {
        let m = store
            .ids()
            .map(|id| vec![F::zero(); store.tensor(id).numel()])
            .collect();
        let v = store
            .ids()
            .map(|id| vec![F::zero(); store.tensor(id).numel()])
            .collect();
        AdamW {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update from the gradients currently accumulated in the store.
    /// Parameters without a gradient are treated as zero-gradient (they
    /// still receive decoupled decay).
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bias1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bias2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_f = F::from_f64(lr);
        let eps = F::from_f64(self.eps);
        let wd = F::from_f64(self.weight_decay);
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let decay = store.decay(id);
            let tensor = store.tensor_mut(id);
            let grad = tensor.grad.clone().unwrap_or_else(|| vec![F::zero(); tensor.numel()]);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                let mut w_new = data[j] - lr_f * m_hat / (v_hat.sqrt() + eps);
                if decay {
                    w_new = w_new - lr_f * wd * data[j];
                }
                data[j] = w_new;
            }
        }
    }
}

/// Linear warm-up into polynomial decay.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub poly_exponent: f64,
}

impl LrSchedule {
    pub fn new(base: f64, total_steps: u64, warmup_fraction: f64, poly_exponent: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_fraction).round() as u64;
        LrSchedule {
            base,
            total_steps,
            warmup_steps,
            poly_exponent,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / decay_span;
        self.base * (1.0 - progress.min(1.0)).powf(self.poly_exponent)
    }
}
