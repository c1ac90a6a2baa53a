//! SGD with momentum and Adam, operating on flat parameter lists.
//!
//! Optimizer state is indexed positionally, so callers must pass parameters
//! and gradients in a stable order across steps.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Stochastic gradient descent with classical momentum:
/// v <- m*v + g; p <- p - lr*v.
pub struct Sgd<T: Real> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::config(format!("{} params but {} grads", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction and additive L2 weight decay folded into the
/// gradient before the moment updates.
pub struct Adam<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    t: u32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T, beta1: T, beta2: T, weight_decay: T) -> Self {
        Adam { lr, beta1, beta2, eps: T::from_f64(1e-8), weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::config(format!("{} params but {} grads", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t as i32);
        let bc2 = T::one() - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g_eff = gv + self.weight_decay * *pv;
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g_eff;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g_eff * g_eff;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
