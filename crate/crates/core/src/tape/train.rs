use super::data::DataSource;
use super::graph::{GradSet, Graph};
use super::optim::{Optimizer, OptimizerConfig};
use crate::error::{Error, Result};
use crate::fmt::sig17;
use crate::memledger::Ledger;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Record `‖ĝ − g‖/‖g‖` per step when the graph has step activations.
    pub record_gap: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    /// Loss of the batch before the update.
    pub loss: f64,
    pub grad_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    /// Ledger of the first forward pass; every step saves the same buffers.
    pub ledger: Ledger,
}

/// Parameter-level gap between two gradient sets over their common keys;
/// `None` when the reference is zero.
pub fn relative_gap(approx: &GradSet, exact: &GradSet) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (id, g) in exact {
        if let Some(a) = approx.get(id) {
            num += a.data().iter().zip(g.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
        den += g.data().iter().map(|y| y * y).sum::<f64>();
    }
    (den > 0.0).then(|| (num / den).sqrt())
}

/// Runs `steps` optimizer updates on batches `0..steps` of `data`.
pub fn train(graph: &mut Graph, data: &dyn DataSource, opts: &TrainOptions) -> Result<TrainOutcome> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut optimizer = Optimizer::new(opts.optimizer)?;
    let track_gap = opts.record_gap && graph.has_step_activations();
    let mut trace = Vec::with_capacity(opts.steps);
    let mut ledger = None;
    for step in 0..opts.steps {
        let (x, target) = data.batch(step, opts.batch_size);
        let fwd = graph.forward(&x, &target)?;
        if !fwd.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        ledger.get_or_insert(fwd.ledger);
        let grads = graph.backward()?;
        let grad_gap = if track_gap {
            let mut twin = graph.exact_twin();
            twin.forward(&x, &target)?;
            relative_gap(&grads, &twin.backward()?)
        } else {
            None
        };
        optimizer.step(graph, &grads)?;
        trace.push(TraceRecord { step, loss: fwd.loss, grad_gap });
    }
    Ok(TrainOutcome { trace, ledger: ledger.unwrap_or_default() })
}

/// Loss on the task's held-out batch.
pub fn evaluate(graph: &mut Graph, data: &dyn DataSource, size: usize) -> Result<f64> {
    let (x, target) = data.eval_batch(size);
    Ok(graph.forward(&x, &target)?.loss)
}

/// Median of the recorded gaps, if any were recorded.
pub fn median_gap(trace: &[TraceRecord]) -> Option<f64> {
    let mut gaps: Vec<f64> = trace.iter().filter_map(|r| r.grad_gap).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    Some(if n % 2 == 1 { gaps[n / 2] } else { 0.5 * (gaps[n / 2 - 1] + gaps[n / 2]) })
}

/// CSV with header `step,loss,grad_gap`; an absent gap is an empty field.
pub fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::from("step,loss,grad_gap\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.step, sig17(r.loss), r.grad_gap.map(sig17).unwrap_or_default()));
    }
    out
}
