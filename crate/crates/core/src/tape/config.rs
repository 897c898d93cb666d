//! JSON model configuration.
//!
//! Layer `residual.from` names an activation index: `0` is the model input
//! and `i + 1` is the output of layer `i`. Coefficient paths are resolved
//! relative to the configuration file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{DataSource, Spiral, TeacherRegression};
use super::graph::{Graph, GraphBuilder, Loss, StoragePolicy};
use super::optim::OptimizerConfig;
use crate::approximator::{ActivationKind, CoefficientFile};
use crate::error::{Error, Result};
use crate::stepgrad::StepLevels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationChoice {
    #[default]
    Gelu,
    Regelu2,
    Silu,
    Resilu2,
}

impl ActivationChoice {
    pub fn kind(self) -> ActivationKind {
        match self {
            Self::Gelu | Self::Regelu2 => ActivationKind::Gelu,
            Self::Silu | Self::Resilu2 => ActivationKind::Silu,
        }
    }

    pub fn is_step(self) -> bool {
        matches!(self, Self::Regelu2 | Self::Resilu2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gelu => "gelu",
            Self::Regelu2 => "regelu2",
            Self::Silu => "silu",
            Self::Resilu2 => "resilu2",
        }
    }
}

impl fmt::Display for ActivationChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivationChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "regelu2" => Ok(Self::Regelu2),
            "silu" => Ok(Self::Silu),
            "resilu2" => Ok(Self::Resilu2),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormChoice {
    #[default]
    Ln,
    Msln,
    Rms,
    Msrms,
}

impl NormChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ln => "ln",
            Self::Msln => "msln",
            Self::Rms => "rms",
            Self::Msrms => "msrms",
        }
    }

    fn memory_sharing(self) -> bool {
        matches!(self, Self::Msln | Self::Msrms)
    }
}

impl fmt::Display for NormChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ln" => Ok(Self::Ln),
            "msln" => Ok(Self::Msln),
            "rms" => Ok(Self::Rms),
            "msrms" => Ok(Self::Msrms),
            other => Err(Error::Config(format!("unknown norm {other:?}"))),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        out: usize,
        #[serde(default = "default_true")]
        trainable: bool,
    },
    Lora {
        out: usize,
        rank: usize,
    },
    LoraFa {
        out: usize,
        rank: usize,
    },
    /// Uses the model-wide activation unless `kind` is given.
    Activation {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kind: Option<ActivationChoice>,
    },
    /// Uses the model-wide norm unless `kind` is given.
    Norm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kind: Option<NormChoice>,
        #[serde(default)]
        affine_trainable: bool,
    },
    Residual {
        from: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Regression { output_dim: usize, teacher_hidden: usize, noise: f64 },
    Spiral { turns: f64, noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CoefficientPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gelu: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silu: Option<PathBuf>,
}

fn default_storage_bits() -> (u32, u32) {
    (16, 32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSpec {
    pub activation_bits: u32,
    pub norm_bits: u32,
}

impl Default for StorageSpec {
    fn default() -> Self {
        let (activation_bits, norm_bits) = default_storage_bits();
        Self { activation_bits, norm_bits }
    }
}

fn default_batch() -> usize {
    64
}

fn default_steps() -> usize {
    100
}

fn default_eps() -> f64 {
    crate::norm::DEFAULT_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub activation: ActivationChoice,
    #[serde(default)]
    pub norm: NormChoice,
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
    pub task: TaskSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub storage: StorageSpec,
    #[serde(default)]
    pub coefficients: CoefficientPaths,
    /// Directory that relative coefficient paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Loads step levels from a coefficient file or a bare
/// `{"thresholds": [...], "levels": [...]}` file, validating every invariant.
pub fn load_levels(path: &Path, kind: ActivationKind) -> Result<StepLevels> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!(
            "cannot read coefficient file {}: {e}; point the config at a shipped file such as coefficients/{kind}_primitive.json or create one with `membp fit --activation {kind}`",
            path.display()
        ))
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: not JSON: {e}", path.display())))?;
    if value.get("thresholds").is_some() {
        return StepLevels::from_json(&text);
    }
    let file = CoefficientFile::from_json(&text)?;
    if file.activation != kind {
        return Err(Error::Config(format!(
            "{} holds {} coefficients but a {kind} activation was requested",
            path.display(),
            file.activation
        )));
    }
    Ok(StepLevels::from_params(&file.to_params()?))
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad model config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn policy(&self) -> Result<StoragePolicy> {
        for bits in [self.storage.activation_bits, self.storage.norm_bits] {
            if ![16, 32, 64].contains(&bits) {
                return Err(Error::Config(format!("storage bits must be 16, 32 or 64, got {bits}")));
            }
        }
        Ok(StoragePolicy {
            activation_bits: self.storage.activation_bits,
            norm_bits: self.storage.norm_bits,
            ..StoragePolicy::default()
        })
    }

    fn levels_for(&self, kind: ActivationKind) -> Result<StepLevels> {
        let path = match kind {
            ActivationKind::Gelu => &self.coefficients.gelu,
            ActivationKind::Silu => &self.coefficients.silu,
        };
        let path = path.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "a step activation needs {kind} coefficients: add \"coefficients\": {{\"{kind}\": \"path.json\"}} to the config (e.g. the shipped coefficients/{kind}_primitive.json)"
            ))
        })?;
        load_levels(&self.base_dir.join(path), kind)
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            TaskSpec::Regression { output_dim, .. } => output_dim,
            TaskSpec::Spiral { .. } => 2,
        }
    }

    pub fn data(&self) -> Result<Box<dyn DataSource>> {
        match self.task {
            TaskSpec::Regression { output_dim, teacher_hidden, noise } => {
                if output_dim == 0 || teacher_hidden == 0 || !(noise >= 0.0) {
                    return Err(Error::Config("regression task needs positive sizes and noise >= 0".into()));
                }
                Ok(Box::new(TeacherRegression::new(self.seed, self.input_dim, teacher_hidden, output_dim, noise)))
            }
            TaskSpec::Spiral { turns, noise } => {
                if self.input_dim != 2 {
                    return Err(Error::Config("the spiral task has 2 input features".into()));
                }
                Ok(Box::new(Spiral::new(self.seed, turns, noise)))
            }
        }
    }

    /// Builds the graph, with optional overrides of the model-wide choices.
    /// Weights are drawn from `seed`; memory-sharing norms are folded after
    /// construction so their graphs share initial weights with the plain ones.
    pub fn build(&self, activation: Option<ActivationChoice>, norm: Option<NormChoice>, seed: Option<u64>) -> Result<Graph> {
        if self.input_dim == 0 || self.layers.is_empty() {
            return Err(Error::Config("config needs a positive input_dim and at least one layer".into()));
        }
        let activation = activation.unwrap_or(self.activation);
        let norm = norm.unwrap_or(self.norm);
        let mut b = GraphBuilder::new(self.input_dim, seed.unwrap_or(self.seed)).policy(self.policy()?).eps(self.eps);
        let mut fold = Vec::new();
        for layer in &self.layers {
            b = match *layer {
                LayerSpec::Linear { out, trainable } => b.linear(out, trainable)?,
                LayerSpec::Lora { out, rank } => b.lora(out, rank)?,
                LayerSpec::LoraFa { out, rank } => b.lora_fa(out, rank)?,
                LayerSpec::Activation { kind } => {
                    let choice = kind.unwrap_or(activation);
                    if choice.is_step() {
                        let levels = self.levels_for(choice.kind())?;
                        b.act_step(choice.kind(), levels)
                    } else {
                        b.act_plain(choice.kind())
                    }
                }
                LayerSpec::Norm { kind, affine_trainable } => {
                    let choice = kind.unwrap_or(norm);
                    fold.push(choice.memory_sharing());
                    match choice {
                        NormChoice::Ln | NormChoice::Msln => b.layer_norm(affine_trainable)?,
                        NormChoice::Rms | NormChoice::Msrms => b.rms_norm(affine_trainable)?,
                    }
                }
                LayerSpec::Residual { from } => b.residual(from)?,
            };
        }
        if b.width() != self.output_dim() {
            return Err(Error::Config(format!(
                "last layer has width {} but the task needs {} outputs",
                b.width(),
                self.output_dim()
            )));
        }
        let loss = match self.loss {
            LossKind::Mse => Loss::Mse,
            LossKind::CrossEntropy => Loss::CrossEntropy,
        };
        let graph = b.build(loss);
        let mut norm_index = 0;
        let which: Vec<bool> = graph
            .nodes()
            .iter()
            .map(|n| {
                let is_norm = matches!(n, super::NodeKind::LayerNorm { .. } | super::NodeKind::RmsNorm { .. });
                if is_norm {
                    norm_index += 1;
                    fold[norm_index - 1]
                } else {
                    false
                }
            })
            .collect();
        graph.into_memory_sharing_where(|i| which[i])
    }
}
