use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use membp_core::approximator::{fit as anneal, CoefficientFile, SaConfig};
use membp_core::fmt::{sig17, to_json_string};
use membp_core::memledger::{analytic_block, AnalyticBlock, BlockSpec, LedgerEntry, MemoryReport};
use membp_core::tape::{self, check_graph, evaluate, median_gap, trace_csv, GradcheckOptions, Graph, ModelConfig, TrainOptions};

use crate::manifest::{write, RunManifest};
use crate::{CliError, FitArgs, GradcheckArgs, MemreportArgs, TrainArgs};

/// Held-out batch size for the final evaluation of `train`.
pub const EVAL_SIZE: usize = 4096;

/// `dir/stem` of `out` followed by `suffix`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

/// Fails fast when `out` cannot be created, before any expensive work.
fn check_out(out: &Path) -> Result<(), CliError> {
    let dir = match out.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    if dir.is_dir() && !out.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("cannot write {}: no such directory or path is a directory", out.display())))
    }
}

pub fn fit(args: &FitArgs) -> Result<String, CliError> {
    check_out(&args.out)?;
    if !(args.epsilon > 0.0 && args.epsilon < 1.0) {
        return Err(CliError::Usage(format!("--epsilon must lie in (0, 1), got {}", args.epsilon)));
    }
    let cfg = SaConfig { restarts: args.restarts, seed: args.seed, epsilon_tail: args.epsilon, ..SaConfig::default() };
    let params = anneal(args.activation, args.bits, args.mode, &cfg)?;
    let file = CoefficientFile::new(args.activation, &params, args.seed);
    write(&args.out, file.to_json())?;
    RunManifest::new("fit", args, args.seed, &[&args.out]).write_beside(&args.out)?;
    Ok(format!(
        "objective_value {}\nconstraint_residual {}\nwrote {}\n",
        sig17(file.objective_value),
        sig17(file.constraint_residual),
        args.out.display()
    ))
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<String, CliError> {
    if let Some(out) = &args.out {
        check_out(out)?;
    }
    let cfg = ModelConfig::read(&args.config)?;
    let graph = cfg.build(None, None, None)?;
    let opts = GradcheckOptions { trials: args.trials, seed: args.seed, ..GradcheckOptions::default() };
    let report = check_graph(&graph, &opts)?;

    let mut text = String::new();
    writeln!(text, "{:<16} {:>7} {:>24}  result", "kind", "trials", "max_rel_error").unwrap();
    for k in &report.kinds {
        let verdict = if k.passed { "pass" } else { "FAIL" };
        writeln!(text, "{:<16} {:>7} {:>24}  {verdict}", k.kind, k.trials, sig17(k.max_rel_error)).unwrap();
    }
    writeln!(text, "trainable parameters: {}", report.trainable_params).unwrap();
    writeln!(text, "tolerance: {:e}", opts.tolerance).unwrap();
    if let Some(out) = &args.out {
        write(out, to_json_string(&report).expect("report is always serializable"))?;
        RunManifest::new("gradcheck", args, args.seed, &[out]).write_beside(out)?;
    }
    if report.passed {
        writeln!(text, "gradcheck passed").unwrap();
        Ok(text)
    } else {
        Err(CliError::Validation(format!("{text}gradcheck failed")))
    }
}

#[derive(Serialize)]
struct LedgerFile<'a> {
    steps: usize,
    final_loss: f64,
    held_out_loss: f64,
    median_grad_gap: Option<f64>,
    entries: &'a [LedgerEntry],
    report: MemoryReport,
}

#[derive(Serialize)]
struct ParamRecord<'a> {
    name: &'a str,
    shape: &'a [usize],
    trainable: bool,
    /// Index of the first value in the flat dump.
    offset: usize,
}

#[derive(Serialize)]
struct ParamsSidecar<'a> {
    dtype: &'static str,
    count: usize,
    params: Vec<ParamRecord<'a>>,
}

/// Flat little-endian `f64` dump of every parameter plus its shape sidecar.
fn dump_params(graph: &Graph) -> (Vec<u8>, String) {
    let mut bytes = Vec::new();
    let mut params = Vec::new();
    let mut offset = 0;
    for p in graph.params() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        params.push(ParamRecord { name: &p.name, shape: p.value.shape(), trainable: p.trainable, offset });
        offset += p.value.len();
    }
    let sidecar = ParamsSidecar { dtype: "f64le", count: offset, params };
    (bytes, to_json_string(&sidecar).expect("sidecar is always serializable"))
}

pub fn train(args: &TrainArgs) -> Result<String, CliError> {
    check_out(&args.out)?;
    let mut cfg = ModelConfig::read(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let steps = args.steps.unwrap_or(cfg.steps);
    let data = cfg.data()?;
    let mut graph = cfg.build(args.activation, args.norm, None)?;
    let opts = TrainOptions { steps, batch_size: cfg.batch_size, optimizer: cfg.optimizer, record_gap: true };
    let outcome = tape::train(&mut graph, data.as_ref(), &opts)?;
    let held_out_loss = evaluate(&mut graph, data.as_ref(), EVAL_SIZE)?;
    let final_loss = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    let gap = median_gap(&outcome.trace);
    let report = outcome.ledger.report();

    let ledger_path = sibling(&args.out, ".ledger.json");
    let params_path = sibling(&args.out, ".params.bin");
    let sidecar_path = sibling(&args.out, ".params.json");
    let ledger = LedgerFile {
        steps,
        final_loss,
        held_out_loss,
        median_grad_gap: gap,
        entries: outcome.ledger.entries(),
        report: report.clone(),
    };
    write(&args.out, trace_csv(&outcome.trace))?;
    write(&ledger_path, to_json_string(&ledger).expect("ledger is always serializable"))?;
    let (bin, sidecar) = dump_params(&graph);
    write(&params_path, bin)?;
    write(&sidecar_path, sidecar)?;
    let outputs = [args.out.as_path(), &ledger_path, &params_path, &sidecar_path];
    RunManifest::new("train", args, cfg.seed, &outputs).write_beside(&args.out)?;

    let mut text = String::new();
    writeln!(text, "steps {steps}").unwrap();
    writeln!(text, "final_loss {}", sig17(final_loss)).unwrap();
    writeln!(text, "held_out_loss {}", sig17(held_out_loss)).unwrap();
    match gap {
        Some(g) => writeln!(text, "median_grad_gap {}", sig17(g)).unwrap(),
        None => writeln!(text, "median_grad_gap n/a").unwrap(),
    }
    text.push_str(&report.to_table());
    Ok(text)
}

#[derive(Serialize)]
struct MemreportFile<'a> {
    #[serde(flatten)]
    block: &'a AnalyticBlock,
    report: MemoryReport,
}

pub fn memreport(args: &MemreportArgs) -> Result<String, CliError> {
    if let Some(out) = &args.out {
        check_out(out)?;
    }
    let spec = BlockSpec::resolve(&args.arch)?;
    let block = analytic_block(&spec, args.scheme)?;
    let report = block.report();
    if let Some(out) = &args.out {
        let file = MemreportFile { block: &block, report: report.clone() };
        write(out, to_json_string(&file).expect("report is always serializable"))?;
        RunManifest::new("memreport", args, 0, &[out]).write_beside(out)?;
    }
    Ok(report.to_table())
}
