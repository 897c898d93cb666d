//! Per-block activation memory of transformer blocks, in bytes and in units of
//! one `[b, n, c]` tensor at 16 bits.
//!
//! Attention is modeled as a FlashAttention-style kernel that keeps q, k, v,
//! its output and one fp32 log-sum-exp per head and token.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MemoryReport;
use crate::approximator::ActivationKind;
use crate::error::{Error, Result};
use crate::fmt::to_json_string;

const SIGMA_BITS: u32 = 32;
const LSE_BITS: u32 = 32;
const CODE_BITS: u32 = 2;
const UNIT_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "vit-b")]
    VitB,
    #[serde(rename = "llama-13b")]
    Llama13b,
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gating {
    None,
    Swiglu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionModel {
    #[default]
    Flash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormFlavor {
    Layernorm,
    Rmsnorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Baseline,
    Ours,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "ours" => Ok(Self::Ours),
            other => Err(Error::Config(format!("unknown scheme {other:?} (expected baseline or ours)"))),
        }
    }
}

fn default_norm_bits() -> u32 {
    32
}

fn default_activation_bits() -> u32 {
    16
}

fn default_true() -> bool {
    true
}

/// Shape and precision of one transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub arch: Arch,
    pub hidden: u64,
    pub tokens: u64,
    pub batch: u64,
    pub heads: u64,
    pub expansion: f64,
    #[serde(default = "default_norm_bits")]
    pub norm_bits: u32,
    #[serde(default = "default_activation_bits")]
    pub activation_bits: u32,
    #[serde(default)]
    pub attention: AttentionModel,
    pub gating: Gating,
    /// Defaults to LayerNorm without gating and RMSNorm with SwiGLU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormFlavor>,
    /// Defaults to GELU without gating and SiLU with SwiGLU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationKind>,
    /// Whether the block's linear layers keep their inputs (trainable weights).
    #[serde(default = "default_true")]
    pub linears_save_input: bool,
}

impl BlockSpec {
    pub fn vit_b() -> Self {
        Self {
            arch: Arch::VitB,
            hidden: 768,
            tokens: 197,
            batch: 1,
            heads: 12,
            expansion: 4.0,
            norm_bits: 32,
            activation_bits: 16,
            attention: AttentionModel::Flash,
            gating: Gating::None,
            norm: None,
            activation: None,
            linears_save_input: true,
        }
    }

    pub fn llama_13b() -> Self {
        Self {
            arch: Arch::Llama13b,
            hidden: 5120,
            tokens: 512,
            batch: 1,
            heads: 40,
            expansion: 2.7,
            gating: Gating::Swiglu,
            ..Self::vit_b()
        }
    }

    /// Resolves `vit-b`, `llama-13b` or a path to a JSON spec.
    pub fn resolve(name: &str) -> Result<Self> {
        match name {
            "vit-b" => Ok(Self::vit_b()),
            "llama-13b" => Ok(Self::llama_13b()),
            path if path.ends_with(".json") => Self::read(Path::new(path)),
            other => Err(Error::Config(format!("unknown architecture {other:?} (expected vit-b, llama-13b or a .json spec)"))),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad block spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.hidden, self.tokens, self.batch, self.heads].contains(&0) {
            return Err(Error::Config("hidden, tokens, batch and heads must be positive".into()));
        }
        if !(self.expansion > 0.0 && self.expansion.is_finite()) {
            return Err(Error::Config(format!("expansion factor must be positive, got {}", self.expansion)));
        }
        for bits in [self.norm_bits, self.activation_bits] {
            if ![16, 32, 64].contains(&bits) {
                return Err(Error::Config(format!("precision must be 16, 32 or 64 bits, got {bits}")));
            }
        }
        Ok(())
    }

    pub fn norm_flavor(&self) -> NormFlavor {
        self.norm.unwrap_or(match self.gating {
            Gating::None => NormFlavor::Layernorm,
            Gating::Swiglu => NormFlavor::Rmsnorm,
        })
    }

    pub fn activation_kind(&self) -> ActivationKind {
        self.activation.unwrap_or(match self.gating {
            Gating::None => ActivationKind::Gelu,
            Gating::Swiglu => ActivationKind::Silu,
        })
    }

    /// MLP hidden width `round(c · expansion)`.
    pub fn mlp_width(&self) -> u64 {
        (self.hidden as f64 * self.expansion).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorUsage {
    pub operator: String,
    pub kind: String,
    pub bytes: u64,
    pub units: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticBlock {
    pub spec: BlockSpec,
    pub scheme: Scheme,
    pub operators: Vec<OperatorUsage>,
}

impl AnalyticBlock {
    pub fn total_bytes(&self) -> u64 {
        self.operators.iter().map(|o| o.bytes).sum()
    }

    pub fn total_units(&self) -> f64 {
        self.operators.iter().map(|o| o.units).sum()
    }

    pub fn report(&self) -> MemoryReport {
        let mut per_kind = BTreeMap::new();
        for o in &self.operators {
            *per_kind.entry(o.kind.clone()).or_insert(0) += o.bytes;
        }
        MemoryReport::from_parts(per_kind, 0)
    }

    pub fn to_json(&self) -> String {
        to_json_string(self).expect("analytic block is always serializable")
    }
}

fn bytes(bits: u32, elements: u64) -> u64 {
    (u64::from(bits) * elements).div_ceil(8)
}

/// Saved activation bytes of every operator of one block under `scheme`.
pub fn analytic_block(spec: &BlockSpec, scheme: Scheme) -> Result<AnalyticBlock> {
    spec.validate()?;
    let t = spec.batch * spec.tokens;
    let c = spec.hidden;
    let h = spec.mlp_width();
    let unit = bytes(UNIT_BITS, t * c) as f64;
    let act = spec.activation_bits;
    let lin = |elements: u64| if spec.linears_save_input { bytes(act, elements) } else { 0 };
    let ours = scheme == Scheme::Ours;

    let (norm_kind, ms_norm_kind) = match spec.norm_flavor() {
        NormFlavor::Layernorm => ("layernorm", "ms_layernorm"),
        NormFlavor::Rmsnorm => ("rmsnorm", "ms_rmsnorm"),
    };
    let norm = || {
        if !ours {
            (norm_kind, bytes(spec.norm_bits, t * c))
        } else if spec.linears_save_input {
            (ms_norm_kind, bytes(SIGMA_BITS, t))
        } else {
            // Nothing downstream keeps y, so the norm holds it.
            (ms_norm_kind, bytes(spec.norm_bits, t * c) + bytes(SIGMA_BITS, t))
        }
    };
    let (act_plain, act_step) = match spec.activation_kind() {
        ActivationKind::Gelu => ("gelu", "regelu2"),
        ActivationKind::Silu => ("silu", "resilu2"),
    };
    let activation = if ours { (act_step, bytes(CODE_BITS, t * h)) } else { (act_plain, bytes(act, t * h)) };

    let mut ops: Vec<(&str, &str, u64)> = Vec::new();
    let (nk, nb) = norm();
    ops.push(("attn_norm", nk, nb));
    ops.push(("qkv_proj", "linear", lin(t * c)));
    ops.push(("attention", "attention", bytes(act, 4 * t * c) + bytes(LSE_BITS, t * spec.heads)));
    ops.push(("out_proj", "linear", lin(t * c)));
    ops.push(("mlp_norm", nk, nb));
    match spec.gating {
        Gating::None => {
            ops.push(("fc1", "linear", lin(t * c)));
            ops.push(("activation", activation.0, activation.1));
            ops.push(("fc2", "linear", lin(t * h)));
        }
        Gating::Swiglu => {
            ops.push(("gate_up_proj", "linear", lin(t * c)));
            ops.push(("activation", activation.0, activation.1));
            ops.push(("gate_mul", "mul", bytes(act, 2 * t * h)));
            ops.push(("down_proj", "linear", lin(t * h)));
        }
    }
    let operators = ops
        .into_iter()
        .map(|(operator, kind, b)| OperatorUsage { operator: operator.into(), kind: kind.into(), bytes: b, units: b as f64 / unit })
        .collect();
    Ok(AnalyticBlock { spec: spec.clone(), scheme, operators })
}
