use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{GradSet, Graph, ParamId};
use crate::error::{Error, Result};

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self::Adam { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = match *self {
            Self::Sgd { lr } => lr,
            Self::Adam { lr, beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                    return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
                }
                if !(eps > 0.0) {
                    return Err(Error::Config("Adam eps must be positive".into()));
                }
                lr
            }
        };
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        Ok(())
    }
}

/// SGD or bias-corrected Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    t: i32,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn step(&mut self, graph: &mut Graph, grads: &GradSet) -> Result<()> {
        self.t += 1;
        for (&id, g) in grads {
            if graph.param(id).value.len() != g.len() {
                return Err(Error::Shape(format!("gradient for parameter {id} has the wrong size")));
            }
            match self.config {
                OptimizerConfig::Sgd { lr } => {
                    for (p, gi) in graph.param_data_mut(id).iter_mut().zip(g.data()) {
                        *p -= lr * gi;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    for (((p, gi), mi), vi) in graph.param_data_mut(id).iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
