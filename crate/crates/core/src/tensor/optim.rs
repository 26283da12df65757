//! Plain gradient descent, Adam and Adadelta.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Adadelta { rho: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adadelta() -> Self {
        OptimizerKind::Adadelta { rho: 0.9, eps: 1e-6 }
    }
}

/// Optimizer state; accumulators mirror the parameter shapes they were built for.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    shapes: Vec<Vec<usize>>,
    // Adam: (m, v). Adadelta: (E[g²], E[Δ²]). Empty for SGD.
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new<'a>(kind: OptimizerKind, lr: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.shape().to_vec()).collect();
        let slots = match kind {
            OptimizerKind::Sgd => Vec::new(),
            _ => shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    (vec![0.0; n], vec![0.0; n])
                })
                .collect(),
        };
        Self {
            kind,
            lr,
            step: 0,
            shapes,
            slots,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Nothing is modified if any check fails.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "{} params / {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.shapes.len()
                ),
            ));
        }
        for ((p, g), s) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != s.as_slice() || g.shape() != s.as_slice() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("param {:?} / grad {:?} vs slot {s:?}", p.shape(), g.shape()),
                ));
            }
        }
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {pos}")));
        }

        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    for (i, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * d;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * d * d;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adadelta { rho, eps } => {
                for ((p, g), (sq, delta)) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    for (i, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        sq[i] = rho * sq[i] + (1.0 - rho) * d * d;
                        let update = (delta[i] + eps).sqrt() / (sq[i] + eps).sqrt() * d;
                        delta[i] = rho * delta[i] + (1.0 - rho) * update * update;
                        *w -= lr * update;
                    }
                }
            }
        }
        Ok(())
    }
}
