use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::approximator::ActivationKind;
use crate::error::{shape_err, Error, Result};
use crate::memledger::{BufferRole, Ledger, LedgerEntry};
use crate::norm::{self, AffineParams, SavedNormState};
use crate::stepgrad::{self, PackedCodes, StepLevels};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, sum_rows, Tensor};

pub type ParamId = usize;

/// Gradients keyed by parameter; holds exactly the trainable parameters in use.
pub type GradSet = BTreeMap<ParamId, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Declared widths used for ledger accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoragePolicy {
    pub activation_bits: u32,
    pub norm_bits: u32,
    pub sigma_bits: u32,
}

impl Default for StoragePolicy {
    fn default() -> Self {
        Self { activation_bits: 16, norm_bits: 32, sigma_bits: 32 }
    }
}

/// Bits declared for loss-side state (kept at full precision).
const LOSS_BITS: u32 = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// `y = x Wᵀ + b`; `x` is kept only when `W` is trainable.
    Linear { w: ParamId, b: ParamId },
    /// Frozen `W, b` plus a trainable low-rank update `x Aᵀ Upᵀ`.
    Lora { w: ParamId, b: ParamId, a: ParamId, up: ParamId },
    /// As `Lora` with `A` frozen; only `x Aᵀ` is kept.
    LoraFa { w: ParamId, b: ParamId, a: ParamId, up: ParamId },
    ActPlain(ActivationKind),
    ActStep(ActivationKind, StepLevels),
    LayerNorm { alpha: ParamId, beta: ParamId },
    MsLayerNorm,
    RmsNorm { alpha: ParamId },
    MsRmsNorm,
    /// Adds activation `a_from` to the running activation.
    Residual { from: usize },
}

impl NodeKind {
    /// Ledger and report name.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::Lora { .. } => "lora",
            Self::LoraFa { .. } => "lora_fa",
            Self::ActPlain(ActivationKind::Gelu) => "gelu",
            Self::ActPlain(ActivationKind::Silu) => "silu",
            Self::ActStep(ActivationKind::Gelu, _) => "regelu2",
            Self::ActStep(ActivationKind::Silu, _) => "resilu2",
            Self::LayerNorm { .. } => "layernorm",
            Self::MsLayerNorm => "ms_layernorm",
            Self::RmsNorm { .. } => "rmsnorm",
            Self::MsRmsNorm => "ms_rmsnorm",
            Self::Residual { .. } => "residual",
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match *self {
            Self::Linear { w, b } => vec![w, b],
            Self::Lora { w, b, a, up } | Self::LoraFa { w, b, a, up } => vec![w, b, a, up],
            Self::LayerNorm { alpha, beta } => vec![alpha, beta],
            Self::RmsNorm { alpha } => vec![alpha],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// Mean of squared errors over all elements.
    Mse,
    /// Mean over rows of `-log softmax(z)[label]`.
    CrossEntropy,
    /// `Σ u ⊙ output` for fixed weights `u`; used for gradient checking.
    Probe(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Values(Tensor),
    Classes(Vec<usize>),
    None,
}

#[derive(Debug)]
enum Saved {
    Nothing,
    Input(Arc<Tensor>),
    LowRank { x: Option<Arc<Tensor>>, ax: Tensor },
    Codes(PackedCodes),
    NormInput(Arc<Tensor>),
    MsNorm(SavedNormState),
}

#[derive(Debug)]
enum LossState {
    Mse { diff: Tensor },
    CrossEntropy { probs: Tensor, labels: Vec<usize> },
    Probe,
}

#[derive(Debug)]
struct Tape {
    saved: Vec<Saved>,
    loss: LossState,
    rows: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: f64,
    pub output: Tensor,
    pub ledger: Ledger,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: GradSet,
    pub input: Tensor,
}

/// A chain of nodes with optional residual skips and a single loss.
///
/// Activations are indexed `a_0 = input`, `a_{i+1} = node_i(a_i)`.
#[derive(Debug)]
pub struct Graph {
    input_dim: usize,
    nodes: Vec<NodeKind>,
    params: Vec<Param>,
    loss: Loss,
    policy: StoragePolicy,
    eps: f64,
    tape: Option<Tape>,
}

impl Clone for Graph {
    /// Clones structure and parameters; saved forward state is not cloned.
    fn clone(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            nodes: self.nodes.clone(),
            params: self.params.clone(),
            loss: self.loss.clone(),
            policy: self.policy,
            eps: self.eps,
            tape: None,
        }
    }
}

/// Incremental graph construction with seeded parameter initialization.
pub struct GraphBuilder {
    input_dim: usize,
    width: usize,
    widths: Vec<usize>,
    nodes: Vec<NodeKind>,
    params: Vec<Param>,
    rng: ChaCha8Rng,
    policy: StoragePolicy,
    eps: f64,
}

impl GraphBuilder {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            width: input_dim,
            widths: vec![input_dim],
            nodes: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            policy: StoragePolicy::default(),
            eps: norm::DEFAULT_EPS,
        }
    }

    pub fn policy(mut self, policy: StoragePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn param(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param { name, value, trainable });
        self.params.len() - 1
    }

    fn gaussian(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::matrix(rows, cols, data).expect("sizes agree")
    }

    fn push(&mut self, node: NodeKind, width: usize) {
        self.nodes.push(node);
        self.width = width;
        self.widths.push(width);
    }

    fn check_positive(&self, what: &str, v: usize) -> Result<()> {
        if v == 0 {
            return Err(Error::Config(format!("{what} must be positive")));
        }
        Ok(())
    }

    /// `W ~ N(0, 1/in)`, `b = 0`.
    pub fn linear(mut self, out: usize, trainable: bool) -> Result<Self> {
        self.check_positive("linear width", out)?;
        let i = self.nodes.len();
        let fan_in = self.width;
        let w = self.gaussian(out, fan_in, (1.0 / fan_in as f64).sqrt());
        let w = self.param(format!("n{i}.weight"), w, trainable);
        let b = self.param(format!("n{i}.bias"), Tensor::zeros(vec![out]), trainable);
        self.push(NodeKind::Linear { w, b }, out);
        Ok(self)
    }

    fn low_rank(&mut self, out: usize, rank: usize) -> Result<[ParamId; 4]> {
        self.check_positive("lora width", out)?;
        self.check_positive("lora rank", rank)?;
        if rank > out.min(self.width) {
            return Err(Error::Config(format!("rank {rank} exceeds min({}, {out})", self.width)));
        }
        let i = self.nodes.len();
        let fan_in = self.width;
        let w = self.gaussian(out, fan_in, (1.0 / fan_in as f64).sqrt());
        let w = self.param(format!("n{i}.weight"), w, false);
        let b = self.param(format!("n{i}.bias"), Tensor::zeros(vec![out]), false);
        let a = self.gaussian(rank, fan_in, (1.0 / fan_in as f64).sqrt());
        let a = self.param(format!("n{i}.lora_a"), a, true);
        let up = self.param(format!("n{i}.lora_b"), Tensor::zeros(vec![out, rank]), true);
        Ok([w, b, a, up])
    }

    /// Frozen `W ~ N(0, 1/in)`, trainable `A ~ N(0, 1/in)` and `Up = 0`.
    pub fn lora(mut self, out: usize, rank: usize) -> Result<Self> {
        let [w, b, a, up] = self.low_rank(out, rank)?;
        self.push(NodeKind::Lora { w, b, a, up }, out);
        Ok(self)
    }

    /// As [`GraphBuilder::lora`] with `A` frozen.
    pub fn lora_fa(mut self, out: usize, rank: usize) -> Result<Self> {
        let [w, b, a, up] = self.low_rank(out, rank)?;
        self.params[a].trainable = false;
        self.push(NodeKind::LoraFa { w, b, a, up }, out);
        Ok(self)
    }

    pub fn act_plain(mut self, kind: ActivationKind) -> Self {
        let w = self.width;
        self.push(NodeKind::ActPlain(kind), w);
        self
    }

    pub fn act_step(mut self, kind: ActivationKind, levels: StepLevels) -> Self {
        let w = self.width;
        self.push(NodeKind::ActStep(kind, levels), w);
        self
    }

    /// LayerNorm with `α = 1`, `β = 0`.
    pub fn layer_norm(mut self, affine_trainable: bool) -> Result<Self> {
        let p = self.width;
        if p < 2 {
            return Err(Error::Config("norms need at least 2 features".into()));
        }
        let i = self.nodes.len();
        let alpha = self.param(format!("n{i}.alpha"), Tensor::new(vec![p], vec![1.0; p])?, affine_trainable);
        let beta = self.param(format!("n{i}.beta"), Tensor::zeros(vec![p]), affine_trainable);
        self.push(NodeKind::LayerNorm { alpha, beta }, p);
        Ok(self)
    }

    /// RMSNorm with `α = 1`.
    pub fn rms_norm(mut self, affine_trainable: bool) -> Result<Self> {
        let p = self.width;
        if p < 2 {
            return Err(Error::Config("norms need at least 2 features".into()));
        }
        let i = self.nodes.len();
        let alpha = self.param(format!("n{i}.alpha"), Tensor::new(vec![p], vec![1.0; p])?, affine_trainable);
        self.push(NodeKind::RmsNorm { alpha }, p);
        Ok(self)
    }

    pub fn ms_layer_norm(mut self) -> Self {
        let w = self.width;
        self.push(NodeKind::MsLayerNorm, w);
        self
    }

    pub fn ms_rms_norm(mut self) -> Self {
        let w = self.width;
        self.push(NodeKind::MsRmsNorm, w);
        self
    }

    /// Adds `a_from`; its width must match the current width.
    pub fn residual(mut self, from: usize) -> Result<Self> {
        let w = self.width;
        match self.widths.get(from) {
            Some(&fw) if fw == w => {}
            Some(&fw) => return Err(Error::Config(format!("residual from a_{from} has width {fw}, expected {w}"))),
            None => return Err(Error::Config(format!("residual source a_{from} does not exist yet"))),
        }
        self.push(NodeKind::Residual { from }, w);
        Ok(self)
    }

    pub fn build(self, loss: Loss) -> Graph {
        Graph {
            input_dim: self.input_dim,
            nodes: self.nodes,
            params: self.params,
            loss,
            policy: self.policy,
            eps: self.eps,
            tape: None,
        }
    }
}

fn row_vector(v: &Tensor) -> &[f64] {
    v.data()
}

fn add_bias(y: &mut Tensor, b: &[f64]) {
    let m = b.len();
    for row in y.data_mut().chunks_mut(m) {
        row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
    }
}

fn vec_tensor(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new(vec![n], v).expect("1-D")
}

fn accumulate(grads: &mut GradSet, id: ParamId, g: Tensor) -> Result<()> {
    match grads.get_mut(&id) {
        Some(existing) => existing.add_assign(&g),
        None => {
            grads.insert(id, g);
            Ok(())
        }
    }
}

impl Graph {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Width of the final activation.
    pub fn output_dim(&self) -> usize {
        self.nodes.iter().fold(self.input_dim, |width, node| match *node {
            NodeKind::Linear { w, .. } | NodeKind::Lora { w, .. } | NodeKind::LoraFa { w, .. } => {
                self.params[w].value.shape()[0]
            }
            _ => width,
        })
    }

    pub fn nodes(&self) -> &[NodeKind] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn loss(&self) -> &Loss {
        &self.loss
    }

    pub fn policy(&self) -> StoragePolicy {
        self.policy
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn set_loss(&mut self, loss: Loss) {
        self.loss = loss;
        self.tape = None;
    }

    /// Replaces a parameter value of the same shape.
    pub fn set_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(id)
            .ok_or_else(|| Error::InvalidParams(format!("no parameter {id}")))?;
        if p.value.shape() != value.shape() {
            return shape_err(format!("parameter {} has shape {:?}, got {:?}", p.name, p.value.shape(), value.shape()));
        }
        p.value = value;
        self.tape = None;
        Ok(())
    }

    pub(crate) fn param_data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.tape = None;
        self.params[id].value.data_mut()
    }

    /// Trainable parameters referenced by some node, ascending.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> =
            self.nodes.iter().flat_map(NodeKind::param_ids).filter(|&id| self.params[id].trainable).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn has_step_activations(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n, NodeKind::ActStep(..)))
    }

    /// The same graph with every step activation replaced by its exact form.
    pub fn exact_twin(&self) -> Graph {
        let mut g = self.clone();
        for n in &mut g.nodes {
            if let NodeKind::ActStep(kind, _) = n {
                *n = NodeKind::ActPlain(*kind);
            }
        }
        g
    }

    /// Converts every LayerNorm/RMSNorm into its memory-sharing variant,
    /// folding the affine into the next node. The next node must be a linear,
    /// LoRA or LoRA-FA layer unless the affine is the identity. LoRA targets
    /// require `β = 0` because the folded bias would depend on trainable weights.
    /// The folded affine parameters are retired (no longer trained).
    pub fn into_memory_sharing(self) -> Result<Graph> {
        self.into_memory_sharing_where(|_| true)
    }

    /// As [`Graph::into_memory_sharing`], for the norm nodes selected by index.
    pub fn into_memory_sharing_where(mut self, select: impl Fn(usize) -> bool) -> Result<Graph> {
        for i in 0..self.nodes.len() {
            if !select(i) {
                continue;
            }
            let (alpha, beta, ms) = match self.nodes[i] {
                NodeKind::LayerNorm { alpha, beta } => (alpha, Some(beta), NodeKind::MsLayerNorm),
                NodeKind::RmsNorm { alpha } => (alpha, None, NodeKind::MsRmsNorm),
                _ => continue,
            };
            let p = self.params[alpha].value.len();
            let affine = AffineParams::new(
                self.params[alpha].value.data().to_vec(),
                beta.map_or(vec![0.0; p], |b| self.params[b].value.data().to_vec()),
            )?;
            let identity = affine.alpha.iter().all(|&v| v == 1.0) && affine.beta.iter().all(|&v| v == 0.0);
            match self.nodes.get(i + 1).cloned() {
                Some(NodeKind::Linear { w, b }) => {
                    let bias = self.params[b].value.data().to_vec();
                    let merged = if beta.is_some() {
                        norm::merge_ln(&self.params[w].value, &bias, &affine)?
                    } else {
                        norm::merge_rms(&self.params[w].value, &bias, &affine)?
                    };
                    self.params[w].value = merged.w_tilde;
                    self.params[b].value = vec_tensor(merged.b_tilde);
                }
                Some(NodeKind::Lora { w, a, .. } | NodeKind::LoraFa { w, a, .. }) if !identity => {
                    if affine.beta.iter().any(|&v| v != 0.0) {
                        return Err(Error::Config(format!(
                            "node {i}: cannot fold a norm bias into a low-rank layer"
                        )));
                    }
                    let zero = vec![0.0; self.params[w].value.dims2()?.0];
                    self.params[w].value = norm::merge_rms(&self.params[w].value, &zero, &affine)?.w_tilde;
                    let zero = vec![0.0; self.params[a].value.dims2()?.0];
                    self.params[a].value = norm::merge_rms(&self.params[a].value, &zero, &affine)?.w_tilde;
                }
                _ if identity => {}
                _ => {
                    return Err(Error::Config(format!(
                        "node {i}: a non-identity norm affine can only be folded into a following linear layer"
                    )))
                }
            }
            self.params[alpha].trainable = false;
            if let Some(b) = beta {
                self.params[b].trainable = false;
            }
            self.nodes[i] = ms;
        }
        self.tape = None;
        Ok(self)
    }

    /// Whether the node keeps its own input activation at activation precision.
    fn keeps_input(&self, node: &NodeKind) -> bool {
        match *node {
            NodeKind::Linear { w, .. } => self.params[w].trainable,
            NodeKind::Lora { .. } | NodeKind::ActPlain(_) => true,
            _ => false,
        }
    }

    fn affine(&self, alpha: ParamId, beta: Option<ParamId>) -> AffineParams {
        let a = self.params[alpha].value.data().to_vec();
        let b = beta.map_or(vec![0.0; a.len()], |b| self.params[b].value.data().to_vec());
        AffineParams { alpha: a, beta: b }
    }

    pub fn forward(&mut self, x: &Tensor, target: &Target) -> Result<ForwardOutput> {
        self.tape = None;
        let (rows, cols) = x.dims2()?;
        if cols != self.input_dim {
            return shape_err(format!("input has {cols} features, graph expects {}", self.input_dim));
        }
        let x = Tensor::matrix(rows, cols, x.data().to_vec())?;
        let pol = self.policy;
        let mut ledger = Ledger::new();
        let mut acts: Vec<Arc<Tensor>> = vec![Arc::new(x)];
        let mut saved = Vec::with_capacity(self.nodes.len());

        for (i, node) in self.nodes.iter().enumerate() {
            let a = Arc::clone(&acts[i]);
            let name = node.name();
            let n_in = a.len() as u64;
            let keyed_input = |ledger: &mut Ledger| {
                ledger.record(LedgerEntry::new(i, name, BufferRole::Input, pol.activation_bits, n_in).shared(i as u64, true));
            };
            let (out, s) = match node {
                NodeKind::Linear { w, b } => {
                    let mut y = matmul_nt(&a, &self.params[*w].value)?;
                    add_bias(&mut y, row_vector(&self.params[*b].value));
                    if self.params[*w].trainable {
                        keyed_input(&mut ledger);
                        (y, Saved::Input(a))
                    } else {
                        (y, Saved::Nothing)
                    }
                }
                NodeKind::Lora { w, b, a: pa, up } | NodeKind::LoraFa { w, b, a: pa, up } => {
                    let mut y = matmul_nt(&a, &self.params[*w].value)?;
                    add_bias(&mut y, row_vector(&self.params[*b].value));
                    let ax = matmul_nt(&a, &self.params[*pa].value)?;
                    y.add_assign(&matmul_nt(&ax, &self.params[*up].value)?)?;
                    let full = matches!(node, NodeKind::Lora { .. });
                    if full {
                        keyed_input(&mut ledger);
                    }
                    ledger.record(LedgerEntry::new(i, name, BufferRole::LowRank, pol.activation_bits, ax.len() as u64));
                    (y, Saved::LowRank { x: full.then_some(a), ax })
                }
                NodeKind::ActPlain(kind) => {
                    let y = stepgrad::plain_forward(*kind, a.data());
                    keyed_input(&mut ledger);
                    (Tensor::new(a.shape().to_vec(), y)?, Saved::Input(a))
                }
                NodeKind::ActStep(kind, levels) => {
                    let enc = stepgrad::forward_encode(*kind, levels, a.data())?;
                    ledger.record(LedgerEntry::new(i, name, BufferRole::Codes, u32::from(enc.codes.bits()), n_in));
                    (Tensor::new(a.shape().to_vec(), enc.output)?, Saved::Codes(enc.codes))
                }
                NodeKind::LayerNorm { alpha, beta } => {
                    let y = norm::ln_forward(&a, &self.affine(*alpha, Some(*beta)), self.eps)?;
                    ledger.record(LedgerEntry::new(i, name, BufferRole::Input, pol.norm_bits, n_in));
                    (y, Saved::NormInput(a))
                }
                NodeKind::RmsNorm { alpha } => {
                    let y = norm::rms_forward(&a, &self.affine(*alpha, None), self.eps)?;
                    ledger.record(LedgerEntry::new(i, name, BufferRole::Input, pol.norm_bits, n_in));
                    (y, Saved::NormInput(a))
                }
                NodeKind::MsLayerNorm | NodeKind::MsRmsNorm => {
                    let (y, mut state) = if matches!(node, NodeKind::MsLayerNorm) {
                        norm::msln_forward(&a, self.eps)?
                    } else {
                        norm::msrms_forward(&a, self.eps)?
                    };
                    let shared = self.nodes.get(i + 1).is_some_and(|next| self.keeps_input(next));
                    state.set_shared(shared);
                    ledger.record(LedgerEntry::new(i, name, BufferRole::Sigma, pol.sigma_bits, rows as u64));
                    let y_entry = if shared {
                        LedgerEntry::new(i, name, BufferRole::Output, pol.activation_bits, n_in).shared(i as u64 + 1, false)
                    } else {
                        LedgerEntry::new(i, name, BufferRole::Output, pol.norm_bits, n_in)
                    };
                    ledger.record(y_entry);
                    acts.push(y);
                    saved.push(Saved::MsNorm(state));
                    continue;
                }
                NodeKind::Residual { from } => {
                    let src = acts.get(*from).ok_or_else(|| Error::State(format!("residual source a_{from} missing")))?;
                    let mut y = (*a).clone();
                    y.add_assign(src)?;
                    (y, Saved::Nothing)
                }
            };
            acts.push(Arc::new(out));
            saved.push(s);
        }

        let out = Arc::clone(acts.last().expect("input is always present"));
        drop(acts);
        let k = self.nodes.len();
        let (loss, state) = self.loss_forward(&out, target)?;
        let state_elems = match &state {
            LossState::Probe => 0,
            _ => out.len() as u64,
        };
        if state_elems > 0 {
            ledger.record(LedgerEntry::new(k, "loss", BufferRole::LossState, LOSS_BITS, state_elems));
        }
        self.tape = Some(Tape { saved, loss: state, rows });
        let output = Arc::try_unwrap(out).unwrap_or_else(|arc| (*arc).clone());
        Ok(ForwardOutput { loss, output, ledger })
    }

    fn loss_forward(&self, out: &Tensor, target: &Target) -> Result<(f64, LossState)> {
        let (rows, cols) = out.dims2()?;
        match (&self.loss, target) {
            (Loss::Mse, Target::Values(t)) => {
                if t.len() != out.len() {
                    return shape_err(format!("target has {} values, output {}", t.len(), out.len()));
                }
                let diff: Vec<f64> = out.data().iter().zip(t.data()).map(|(o, t)| o - t).collect();
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
                Ok((loss, LossState::Mse { diff: Tensor::new(out.shape().to_vec(), diff)? }))
            }
            (Loss::CrossEntropy, Target::Classes(labels)) => {
                if labels.len() != rows {
                    return shape_err(format!("{} labels for {rows} rows", labels.len()));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
                    return Err(Error::InvalidParams(format!("label {bad} out of range for {cols} classes")));
                }
                let mut probs = Vec::with_capacity(out.len());
                let mut loss = 0.0;
                for (row, &label) in out.rows().zip(labels) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    loss += z.ln() + m - row[label];
                    probs.extend(row.iter().map(|v| (v - m).exp() / z));
                }
                let state = LossState::CrossEntropy { probs: Tensor::matrix(rows, cols, probs)?, labels: labels.clone() };
                Ok((loss / rows as f64, state))
            }
            (Loss::Probe(u), _) => {
                if u.shape() != out.shape() {
                    return shape_err(format!("probe weights {:?} vs output {:?}", u.shape(), out.shape()));
                }
                Ok((u.data().iter().zip(out.data()).map(|(a, b)| a * b).sum(), LossState::Probe))
            }
            (Loss::Mse, _) => Err(Error::InvalidParams("mse loss needs a value target".into())),
            (Loss::CrossEntropy, _) => Err(Error::InvalidParams("cross-entropy loss needs class labels".into())),
        }
    }

    pub fn backward(&mut self) -> Result<GradSet> {
        Ok(self.backward_scaled(1.0)?.params)
    }

    /// Reverse sweep with the loss gradient multiplied by `kappa`. Consumes
    /// the saved state of the last forward.
    pub fn backward_scaled(&mut self, kappa: f64) -> Result<Gradients> {
        let tape = self.tape.take().ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        let Tape { saved, loss, rows } = tape;
        let n = self.nodes.len();
        let mut g_acts: Vec<Option<Tensor>> = vec![None; n + 1];
        let top = match (loss, &self.loss) {
            (LossState::Mse { mut diff }, _) => {
                let scale = 2.0 * kappa / diff.len() as f64;
                diff.scale(scale);
                diff
            }
            (LossState::CrossEntropy { mut probs, labels }, _) => {
                let (_, cols) = probs.dims2()?;
                for (r, &l) in labels.iter().enumerate() {
                    probs.data_mut()[r * cols + l] -= 1.0;
                }
                probs.scale(kappa / rows as f64);
                probs
            }
            (LossState::Probe, Loss::Probe(u)) => {
                let mut g = u.clone();
                g.scale(kappa);
                g
            }
            (LossState::Probe, _) => return Err(Error::State("loss changed between forward and backward".into())),
        };
        g_acts[n] = Some(top);

        let mut grads = GradSet::new();
        for (i, s) in saved.into_iter().enumerate().rev() {
            let g = g_acts[i + 1].take().ok_or_else(|| Error::State(format!("no gradient reached a_{}", i + 1)))?;
            let gx = self.node_backward(i, s, g, &mut grads)?;
            for (target, grad) in gx {
                match &mut g_acts[target] {
                    Some(existing) => existing.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        let input = g_acts[0].take().ok_or_else(|| Error::State("no gradient reached the input".into()))?;
        Ok(Gradients { params: grads, input })
    }

    /// Returns gradients for activation indices.
    fn node_backward(&self, i: usize, saved: Saved, g: Tensor, grads: &mut GradSet) -> Result<Vec<(usize, Tensor)>> {
        let trainable = |id: ParamId| self.params[id].trainable;
        let gx = match (&self.nodes[i], saved) {
            (NodeKind::Linear { w, b }, s) => {
                if let Saved::Input(x) = s {
                    if trainable(*w) {
                        accumulate(grads, *w, matmul_tn(&g, &x)?)?;
                    }
                }
                if trainable(*b) {
                    accumulate(grads, *b, vec_tensor(sum_rows(&g)?))?;
                }
                matmul_nn(&g, &self.params[*w].value)?
            }
            (NodeKind::Lora { w, a, up, .. } | NodeKind::LoraFa { w, a, up, .. }, Saved::LowRank { x, ax }) => {
                if trainable(*up) {
                    accumulate(grads, *up, matmul_tn(&g, &ax)?)?;
                }
                let g_ax = matmul_nn(&g, &self.params[*up].value)?;
                if trainable(*a) {
                    let x = x.ok_or_else(|| Error::State(format!("node {i} did not keep its input")))?;
                    accumulate(grads, *a, matmul_tn(&g_ax, &x)?)?;
                }
                let mut gx = matmul_nn(&g, &self.params[*w].value)?;
                gx.add_assign(&matmul_nn(&g_ax, &self.params[*a].value)?)?;
                gx
            }
            (NodeKind::ActPlain(kind), Saved::Input(x)) => {
                let data = x.data().iter().zip(g.data()).map(|(xi, gi)| kind.deriv(*xi) * gi).collect();
                Tensor::new(g.shape().to_vec(), data)?
            }
            (NodeKind::ActStep(_, levels), Saved::Codes(codes)) => {
                Tensor::new(g.shape().to_vec(), stepgrad::backward(&codes, levels, g.data())?)?
            }
            (NodeKind::LayerNorm { alpha, beta }, Saved::NormInput(x)) => {
                let r = norm::ln_backward_oracle(&x, &self.affine(*alpha, Some(*beta)), self.eps, &g)?;
                if trainable(*alpha) {
                    accumulate(grads, *alpha, vec_tensor(r.grad_alpha))?;
                }
                if trainable(*beta) {
                    accumulate(grads, *beta, vec_tensor(r.grad_beta))?;
                }
                r.grad_x
            }
            (NodeKind::RmsNorm { alpha }, Saved::NormInput(x)) => {
                let r = norm::rms_backward_oracle(&x, &self.affine(*alpha, None), self.eps, &g)?;
                if trainable(*alpha) {
                    accumulate(grads, *alpha, vec_tensor(r.grad_alpha))?;
                }
                r.grad_x
            }
            (NodeKind::MsLayerNorm, Saved::MsNorm(state)) => norm::msln_backward(&state, &g)?,
            (NodeKind::MsRmsNorm, Saved::MsNorm(state)) => norm::msrms_backward(&state, &g)?,
            (NodeKind::Residual { from }, Saved::Nothing) => {
                return Ok(vec![(i, g.clone()), (*from, g)]);
            }
            (node, _) => return Err(Error::State(format!("saved state does not match node {i} ({})", node.name()))),
        };
        Ok(vec![(i, gx)])
    }
}
