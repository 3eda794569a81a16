//! AdamW with decoupled weight decay.

use crate::{Float, ParamStore, Result, TensorError};

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in `store`, then clears the grads.
    ///
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`; decay applies only to
    /// parameters flagged `decay`. Fails without touching anything if any
    /// gradient is unpopulated.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if let Some(e) = store.entries().iter().find(|e| e.tensor.grad().is_none()) {
            return Err(TensorError::MissingGradient {
                name: e.name.clone(),
            });
        }
        if self.m.is_empty() {
            self.m = store.entries().iter().map(|e| vec![F::zero(); e.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(TensorError::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let t = self.step as i32;
        let bc1 = F::from_f64(1.0 - b1.powi(t));
        let bc2 = F::from_f64(1.0 - b2.powi(t));
        let (b1f, b2f) = (F::from_f64(b1), F::from_f64(b2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - b1), F::from_f64(1.0 - b2));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);

        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let wd = F::from_f64(if entry.decay { self.weight_decay } else { 0.0 });
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = entry.tensor.grad().expect("checked above").to_vec();
            let data = entry.tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1f * m[j] + one_b1 * g;
                v[j] = b2f * v[j] + one_b2 * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let p = data[j];
                let delta = lr * wd * p + lr * m_hat / (v_hat.sqrt() + eps);
                // A zero step must leave p (including -0.0) untouched.
                if delta != F::zero() {
                    data[j] = p - delta;
                }
            }
            entry.tensor.clear_grad();
        }
        Ok(())
    }
}
