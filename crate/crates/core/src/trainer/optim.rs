//! AdamW with decoupled weight decay.

use crate::nn::{ParamKind, ParamTree};
use crate::tensor::DenseArray;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied only to [`ParamKind::Weight`] leaves.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Optimizer state for one parameter group, ordered like the group's leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<DenseArray>,
    pub second_moment: Vec<DenseArray>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    /// One update of every leaf that received a gradient. Leaves with `None`
    /// are left untouched, moments included.
    pub fn update<P>(&mut self, params: &P, grads: &[Option<DenseArray>], lr: f64) -> Result<P>
    where
        P: ParamTree<DenseArray, With<DenseArray> = P>,
    {
        let mut shapes = Vec::new();
        params.map_leaves(&mut |_, _, v| shapes.push(v.shape().to_vec()));
        if shapes.len() != grads.len() {
            return Err(Error::InvalidInput(format!("{} gradients for {} parameters", grads.len(), shapes.len())));
        }
        if self.first_moment.is_empty() {
            self.first_moment = shapes.iter().map(|s| DenseArray::zeros(s)).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != shapes.len() {
            return Err(Error::InvalidInput("optimizer state does not match parameters".into()));
        }
        for (g, s) in grads.iter().zip(&shapes) {
            if let Some(g) = g {
                if g.shape() != s.as_slice() {
                    return Err(Error::InvalidInput(format!("gradient shape {:?} for parameter {s:?}", g.shape())));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let mut idx = 0;
        let (first, second) = (&mut self.first_moment, &mut self.second_moment);
        let updated = params.map_leaves(&mut |_, kind: ParamKind, value: &DenseArray| {
            let i = idx;
            idx += 1;
            let Some(g) = &grads[i] else { return value.clone() };
            let mut out = value.clone();
            let decay = if kind.decays() { lr * c.weight_decay } else { 0.0 };
            let (m, v) = (first[i].values_mut(), second[i].values_mut());
            for (j, p) in out.values_mut().iter_mut().enumerate() {
                let gj = g.values()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *p -= decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            out
        });
        Ok(updated)
    }
}
