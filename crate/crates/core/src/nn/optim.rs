use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Params, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(())
    }
}

/// First-order optimizer. Each step returns a new set of leaf parameters;
/// the inputs are never modified.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: HashMap::new(),
        })
    }

    pub fn step(&mut self, params: &Params, grads: &GradientMap) -> Result<Params> {
        self.step += 1;
        let mut out = Params::new();
        for (name, p) in params.iter() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("`{name}`: grad {:?} for {:?}", g.shape(), p.shape()),
                ));
            }
            let values: Vec<f64> = match self.config {
                OptimizerConfig::Sgd { lr } => p
                    .values()
                    .iter()
                    .zip(g.values())
                    .map(|(w, d)| w - lr * d)
                    .collect(),
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let (m, v) = self
                        .moments
                        .entry(name.to_owned())
                        .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    p.values()
                        .iter()
                        .zip(g.values())
                        .enumerate()
                        .map(|(i, (w, d))| {
                            m[i] = beta1 * m[i] + (1.0 - beta1) * d;
                            v[i] = beta2 * v[i] + (1.0 - beta2) * d * d;
                            w - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps)
                        })
                        .collect()
                }
            };
            out.insert(name, Tensor::param(values, p.shape())?);
        }
        Ok(out)
    }
}
