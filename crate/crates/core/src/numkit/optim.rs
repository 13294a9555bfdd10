use alloc::vec;
use alloc::vec::Vec;

use super::mlp::{Grads, MlpParams};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub const ADAM: Self = Self::Adam {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::ADAM
    }
}

/// Optimizer bound to the shape of one [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, params: &MlpParams) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => {
                let shapes: Vec<Vec<f64>> = params
                    .layers()
                    .iter()
                    .flat_map(|l| [vec![0.0; l.weight.as_slice().len()], vec![0.0; l.bias.len()]])
                    .collect();
                (shapes.clone(), shapes)
            }
        };
        Self {
            kind,
            lr,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies accumulated gradients to `params` and zeroes `grads`.
    pub fn step(&mut self, params: &mut MlpParams, grads: &mut Grads) -> Result<()> {
        if params.is_frozen() {
            return Err(Error::Frozen);
        }
        if grads.count() == 0 {
            return Err(Error::NoGradients);
        }
        check_len("gradient buffer depth", params.layer_count(), grads.layers().len())?;
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr;
        let kind = self.kind;
        let mut tensor = 0;
        for (layer, glayer) in params.layers_mut().iter_mut().zip(grads.layers()) {
            let pairs: [(&mut [f64], &[f64]); 2] = [
                (layer.weight.as_mut_slice(), glayer.weight.as_slice()),
                (layer.bias.as_mut_slice(), glayer.bias.as_slice()),
            ];
            for (p, g) in pairs {
                check_len("gradient tensor", p.len(), g.len())?;
                match kind {
                    OptimizerKind::Sgd => {
                        for (pi, gi) in p.iter_mut().zip(g) {
                            *pi -= lr * gi;
                        }
                    }
                    OptimizerKind::Adam {
                        beta1,
                        beta2,
                        epsilon,
                    } => {
                        let c1 = 1.0 - libm::pow(beta1, t as f64);
                        let c2 = 1.0 - libm::pow(beta2, t as f64);
                        let (m, v) = (&mut self.first[tensor], &mut self.second[tensor]);
                        for i in 0..p.len() {
                            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                            let m_hat = m[i] / c1;
                            let v_hat = v[i] / c2;
                            p[i] -= lr * m_hat / (libm::sqrt(v_hat) + epsilon);
                        }
                    }
                }
                tensor += 1;
            }
        }
        grads.zero();
        if params.layers().iter().any(|l| !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite())) {
            return Err(Error::NonFinite("parameters after optimizer step"));
        }
        Ok(())
    }
}
