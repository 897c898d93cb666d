use std::path::Path;

use serde::{Deserialize, Serialize};

use super::combination::{CombinationParams, ObjectiveMode};
use super::objective::TailInterval;
use super::ActivationKind;
use crate::error::{Error, Result};
use crate::fmt::to_json_string;

/// On-disk coefficient file. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientFile {
    pub activation: ActivationKind,
    pub k: u32,
    pub mode: ObjectiveMode,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub objective_value: f64,
    pub constraint_residual: f64,
    pub interval: [f64; 2],
    pub epsilon_tail: f64,
    pub seed: u64,
}

impl CoefficientFile {
    pub fn new(activation: ActivationKind, params: &CombinationParams, seed: u64) -> Self {
        Self {
            activation,
            k: params.k,
            mode: params.mode,
            a: params.a.clone(),
            c: params.c.clone(),
            objective_value: params.objective_value,
            constraint_residual: params.constraint_residual(),
            interval: [params.interval.lower, params.interval.upper],
            epsilon_tail: params.interval.epsilon,
            seed,
        }
    }

    /// Rebuilds validated parameters. Shape and threshold ordering are checked;
    /// the residual invariant is checked for primitive-mode files.
    pub fn to_params(&self) -> Result<CombinationParams> {
        let interval = TailInterval::new(self.interval[0], self.interval[1], self.epsilon_tail)?;
        let mut p = CombinationParams::new(self.k, self.a.clone(), self.c.clone(), self.mode, interval)?;
        if self.mode == ObjectiveMode::PrimitiveL2 {
            p.check_constraint()?;
        }
        p.objective_value = self.objective_value;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        to_json_string(self).expect("coefficient file is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad coefficient file: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
