//! Adam and AdamW.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    Adamw,
    Adam,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Only applied by [`OptimizerKind::Adamw`].
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Moment estimates and step count as a parameter store, so they can
    /// be checkpointed next to the weights.
    pub fn export(&self, params: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        out.insert("step", Tensor::scalar(self.step as f64))?;
        for (i, (_, p)) in params.iter().enumerate() {
            let zeros = || Tensor::zeros(p.tensor.shape());
            out.insert(format!("m/{}", p.name), self.first.get(i).cloned().unwrap_or_else(zeros))?;
            out.insert(format!("v/{}", p.name), self.second.get(i).cloned().unwrap_or_else(zeros))?;
        }
        Ok(out)
    }

    /// Inverse of [`OptimizerState::export`].
    pub fn import(kind: OptimizerKind, learning_rate: f64, saved: &ParamStore, params: &ParamStore) -> Result<Self> {
        let mut s = Self::new(kind, learning_rate)?;
        let get = |name: &str| {
            saved
                .id(name)
                .map(|id| saved.tensor(id).clone())
                .ok_or_else(|| Error::Contract(format!("optimizer state lacks `{name}`")))
        };
        s.step = get("step")?.item() as u64;
        for (_, p) in params.iter() {
            let (m, v) = (get(&format!("m/{}", p.name))?, get(&format!("v/{}", p.name))?);
            if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
                return Err(Error::Contract(format!("optimizer state shape mismatch for `{}`", p.name)));
            }
            s.first.push(m);
            s.second.push(v);
        }
        Ok(s)
    }

    /// Applies one update to every parameter from its accumulated grad.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::Contract(format!(
                "optimizer step with no gradient for `{}`",
                p.name
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = match self.kind {
            OptimizerKind::Adamw => self.weight_decay,
            OptimizerKind::Adam => 0.0,
        };
        for ((p, m), v) in params
            .params_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let g = p.grad.as_ref().expect("checked above");
            let w = p.tensor.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                w[i] -= self.learning_rate * (mhat / (vhat.sqrt() + self.eps) + decay * w[i]);
            }
        }
        Ok(())
    }
}
