use super::{ParamBank, ParamId};
use crate::error::{Error, Result};

/// Adam with bias correction; beta1=0.9, beta2=0.999, epsilon=1e-8.
///
/// Moment slots align with bank indices and are allocated lazily so the same
/// state object survives bank growth in tests.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    slots: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            slots: Vec::new(),
        }
    }

    /// One optimizer step over every trainable parameter that has a gradient.
    /// Gradients are consumed (zeroed) by the update.
    pub fn step(&mut self, bank: &mut ParamBank, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate {lr} must be > 0")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = bank.trainable_ids();
        for id in ids {
            let idx = id.0;
            if self.slots.len() <= idx {
                self.slots.resize(idx + 1, None);
            }
            let tensor = bank.get_mut(id);
            let n = tensor.numel();
            let slot = self.slots[idx].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if slot.0.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![slot.0.len()],
                    rhs: vec![n],
                });
            }
            let Some(grad) = tensor.grad.as_mut() else {
                continue;
            };
            for i in 0..n {
                let g = grad[i];
                slot.0[i] = self.beta1 * slot.0[i] + (1.0 - self.beta1) * g;
                slot.1[i] = self.beta2 * slot.1[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.0[i] / bc1;
                let v_hat = slot.1[i] / bc2;
                tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
                grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}
