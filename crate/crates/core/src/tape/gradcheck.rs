//! Central finite-difference validation of every node kind in a graph.
//!
//! Each kind is checked in isolation on random shapes and values against a
//! probe loss `Σ u ⊙ output`; the whole graph is checked through its exact
//! twin with its own loss. Step activations are checked against the
//! piecewise-linear surrogate whose derivative they implement, away from
//! its kinks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::graph::{Graph, GraphBuilder, Loss, NodeKind, Target};
use crate::error::Result;
use crate::stepgrad::{self, StepLevels};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { trials: 50, seed: 0, step: 1e-6, tolerance: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindReport {
    pub kind: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub kinds: Vec<KindReport>,
    pub trainable_params: usize,
    pub passed: bool,
}

/// Whole-graph trials are capped; each costs two forwards per parameter.
const WHOLE_GRAPH_TRIALS: usize = 3;

/// `‖a − f‖ / max(‖a‖, ‖f‖)`, zero when both are negligible.
pub fn rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff = analytic.iter().zip(fd).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(fd));
    if scale < 1e-7 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, gaussian(rng, rows * cols, std)).expect("sizes agree")
}

/// Largest relative error over the input and every trainable parameter.
fn check_once(graph: &mut Graph, x: &Tensor, target: &Target, h: f64) -> Result<f64> {
    graph.forward(x, target)?;
    let analytic = graph.backward_scaled(1.0)?;

    let loss_at = |g: &mut Graph, x: &Tensor| -> Result<f64> { Ok(g.forward(x, target)?.loss) };
    let mut fd = vec![0.0; x.len()];
    let mut xp = x.clone();
    for (j, slot) in fd.iter_mut().enumerate() {
        let orig = xp.data()[j];
        xp.data_mut()[j] = orig + h;
        let up = loss_at(graph, &xp)?;
        xp.data_mut()[j] = orig - h;
        let down = loss_at(graph, &xp)?;
        xp.data_mut()[j] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    let mut worst = rel_error(analytic.input.data(), &fd);

    for (&id, g) in &analytic.params {
        let mut fd = vec![0.0; g.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let orig = graph.param(id).value.data()[j];
            graph.param_data_mut(id)[j] = orig + h;
            let up = loss_at(graph, x)?;
            graph.param_data_mut(id)[j] = orig - h;
            let down = loss_at(graph, x)?;
            graph.param_data_mut(id)[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_error(g.data(), &fd));
    }
    Ok(worst)
}

fn randomize_params(graph: &mut Graph, rng: &mut ChaCha8Rng, std: f64) -> Result<()> {
    for id in 0..graph.params().len() {
        let v = &graph.param(id).value;
        let data = v.data().iter().map(|x| x + std * rng.sample::<f64, _>(StandardNormal)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        graph.set_param(id, t)?;
    }
    Ok(())
}

/// Builds a single-node graph of the same kind with random sizes.
fn isolated(node: &NodeKind, graph: &Graph, rng: &mut ChaCha8Rng) -> Result<(Graph, usize)> {
    let seed = rng.gen();
    let eps = graph.eps();
    let dim = |rng: &mut ChaCha8Rng, lo: usize| rng.gen_range(lo..=8);
    let built = match node {
        NodeKind::Linear { w, .. } => {
            let p = dim(rng, 1);
            let trainable = graph.param(*w).trainable;
            (GraphBuilder::new(p, seed).eps(eps).linear(dim(rng, 1), trainable)?, p)
        }
        NodeKind::Lora { .. } | NodeKind::LoraFa { .. } => {
            let (p, out) = (dim(rng, 2), dim(rng, 2));
            let rank = rng.gen_range(1..=p.min(out));
            let b = GraphBuilder::new(p, seed).eps(eps);
            let b = if matches!(node, NodeKind::Lora { .. }) { b.lora(out, rank)? } else { b.lora_fa(out, rank)? };
            (b, p)
        }
        NodeKind::ActPlain(kind) => {
            let p = dim(rng, 1);
            (GraphBuilder::new(p, seed).act_plain(*kind), p)
        }
        // Centering two features leaves ±1 outputs whose gradient is pure eps noise.
        NodeKind::LayerNorm { .. } => {
            let p = dim(rng, 3);
            (GraphBuilder::new(p, seed).eps(eps).layer_norm(true)?, p)
        }
        NodeKind::RmsNorm { .. } => {
            let p = dim(rng, 2);
            (GraphBuilder::new(p, seed).eps(eps).rms_norm(true)?, p)
        }
        NodeKind::MsLayerNorm => {
            let p = dim(rng, 3);
            (GraphBuilder::new(p, seed).eps(eps).ms_layer_norm(), p)
        }
        NodeKind::MsRmsNorm => {
            let p = dim(rng, 2);
            (GraphBuilder::new(p, seed).eps(eps).ms_rms_norm(), p)
        }
        NodeKind::Residual { .. } => {
            let p = dim(rng, 1);
            (GraphBuilder::new(p, seed).linear(p, true)?.residual(0)?, p)
        }
        NodeKind::ActStep(..) => unreachable!("step activations are checked separately"),
    };
    let (builder, p) = built;
    let mut g = builder.build(Loss::Probe(Tensor::zeros(vec![1, 1])));
    randomize_params(&mut g, rng, 1.0)?;
    Ok((g, p))
}

fn check_isolated(node: &NodeKind, graph: &Graph, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..opts.trials {
        let (mut g, p) = isolated(node, graph, rng)?;
        let rows = rng.gen_range(1..=4);
        let x = random_matrix(rng, rows, p, 1.5);
        let width = g.output_dim();
        g.set_loss(Loss::Probe(random_matrix(rng, rows, width, 1.0)));
        worst = worst.max(check_once(&mut g, &x, &Target::None, opts.step)?);
    }
    Ok(worst)
}

/// `h̃(x) = Σ_j (s_{j+1} − s_j)·max(x − c_j, 0)`, whose derivative is the step.
fn surrogate(levels: &StepLevels, x: f64) -> f64 {
    let s = levels.levels();
    levels.thresholds().iter().enumerate().map(|(j, c)| (s[j + 1] - s[j]) * (x - c).max(0.0)).sum()
}

fn check_step(levels: &StepLevels, kind: crate::approximator::ActivationKind, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..opts.trials {
        let n = rng.gen_range(1..=32);
        let x: Vec<f64> = (0..n)
            .map(|_| loop {
                let v = 2.0 * rng.sample::<f64, _>(StandardNormal);
                if levels.thresholds().iter().all(|c| (v - c).abs() > 1e-4) {
                    break v;
                }
            })
            .collect();
        let u = gaussian(rng, n, 1.0);
        let enc = stepgrad::forward_encode(kind, levels, &x)?;
        let analytic = stepgrad::backward(&enc.codes, levels, &u)?;
        let h = opts.step;
        let fd: Vec<f64> = x
            .iter()
            .zip(&u)
            .map(|(&xi, ui)| ui * (surrogate(levels, xi + h) - surrogate(levels, xi - h)) / (2.0 * h))
            .collect();
        worst = worst.max(rel_error(&analytic, &fd));
    }
    Ok(worst)
}

fn check_whole(graph: &Graph, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..opts.trials.min(WHOLE_GRAPH_TRIALS) {
        let mut g = graph.exact_twin();
        randomize_params(&mut g, rng, 0.3)?;
        let rows = rng.gen_range(1..=3);
        let x = random_matrix(rng, rows, g.input_dim(), 1.0);
        let out_dim = g.output_dim();
        let target = match g.loss() {
            Loss::Mse => Target::Values(random_matrix(rng, rows, out_dim, 1.0)),
            Loss::CrossEntropy => Target::Classes((0..rows).map(|_| rng.gen_range(0..out_dim)).collect()),
            Loss::Probe(_) => {
                g.set_loss(Loss::Probe(random_matrix(rng, rows, out_dim, 1.0)));
                Target::None
            }
        };
        worst = worst.max(check_once(&mut g, &x, &target, opts.step)?);
    }
    Ok(worst)
}

/// Checks every distinct node kind of `graph` and the graph as a whole.
pub fn check_graph(graph: &Graph, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut seen: Vec<String> = Vec::new();
    let mut kinds = Vec::new();
    for node in graph.nodes() {
        let label = match node {
            NodeKind::Linear { w, .. } if !graph.param(*w).trainable => "linear_frozen".to_string(),
            other => other.name().to_string(),
        };
        if seen.contains(&label) {
            continue;
        }
        seen.push(label.clone());
        let err = match node {
            NodeKind::ActStep(kind, levels) => check_step(levels, *kind, opts, &mut rng)?,
            other => check_isolated(other, graph, opts, &mut rng)?,
        };
        kinds.push(KindReport { kind: label, trials: opts.trials, max_rel_error: err, passed: err <= opts.tolerance });
    }
    let err = check_whole(graph, opts, &mut rng)?;
    kinds.push(KindReport {
        kind: "whole_graph".into(),
        trials: opts.trials.min(WHOLE_GRAPH_TRIALS),
        max_rel_error: err,
        passed: err <= opts.tolerance,
    });
    let passed = kinds.iter().all(|k| k.passed);
    Ok(GradcheckReport { kinds, trainable_params: graph.trainable_ids().len(), passed })
}
