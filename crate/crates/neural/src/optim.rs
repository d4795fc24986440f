use serde::{Deserialize, Serialize};

use crate::dense::{DenseNet, Gradients};
use crate::NeuralError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Method {
    pub fn adam() -> Self {
        Method::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over the flattened parameters of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub method: Method,
    pub lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(method: Method, lr: f64) -> Result<Self, NeuralError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NeuralError::InvalidHyperparameter(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(Self {
            method,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self, NeuralError> {
        Self::new(Method::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self, NeuralError> {
        Self::new(Method::adam(), lr)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<(), NeuralError> {
        let flat = grads.flat();
        if flat.len() != net.param_count() || grads.0.len() != net.layers().len() * 2 {
            return Err(NeuralError::ShapeMismatch {
                op: "Optimizer::step",
                expected: vec![net.param_count()],
                got: vec![flat.len()],
            });
        }
        let mut params = net.flat_params();
        self.step_flat(&mut params, &flat)?;
        net.set_flat_params(&params)
    }

    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NeuralError> {
        if params.len() != grads.len() {
            return Err(NeuralError::ShapeMismatch {
                op: "Optimizer::step_flat",
                expected: vec![params.len()],
                got: vec![grads.len()],
            });
        }
        self.step += 1;
        match self.method {
            Method::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            Method::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
