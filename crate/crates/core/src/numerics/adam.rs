use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Step decay: the rate is multiplied by `factor` every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub base_lr: f64,
    pub period: usize,
    pub factor: f64,
}

impl StepDecay {
    /// Effective rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let period = self.period.max(1);
        self.base_lr * self.factor.powi((epoch / period) as i32)
    }
}

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub schedule: StepDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, schedule: StepDecay) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            second: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update using the gradients currently stored
    /// in `params`. Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, epoch: usize) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "state tracks {} parameters, store has {}",
                    self.first.len(),
                    params.len()
                ),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad.shape() != p.value.shape() || self.first[i].shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "{}: value {:?}, grad {:?}, moments {:?}",
                        p.name,
                        p.value.shape(),
                        p.grad.shape(),
                        self.first[i].shape()
                    ),
                ));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let lr = T::from_f64_lossy(self.schedule.lr_at(epoch));
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let eps = T::from_f64_lossy(self.eps);
        let correct1 = T::one() - b1.powi(t);
        let correct2 = T::one() - b2.powi(t);

        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = params.grad(id).clone();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let value = params.value_mut(id);
            for (((w, &g), mk), vk) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mk = b1 * *mk + (T::one() - b1) * g;
                *vk = b2 * *vk + (T::one() - b2) * g * g;
                let m_hat = *mk / correct1;
                let v_hat = *vk / correct2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
