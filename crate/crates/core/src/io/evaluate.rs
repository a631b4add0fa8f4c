//! Batch evaluation: run, score, aggregate and write results.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{log_to_string, write_atomic, RunConfig};
use crate::diffusion::{DenoiserModel, ToyDenoiser};
use crate::engine::{run_batch, AgentMode, SimulationLog};
use crate::error::{Error, Result};
use crate::metrics::{pass_rate, success_rate, ClsBreakdown, MetricReport, DEFAULT_CORE_NAMES};
use crate::scene::Scenario;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub planner: String,
    pub agent_mode: String,
    pub scenarios: usize,
    pub mean_cls: f64,
    /// %
    pub success_rate: f64,
    /// %
    pub pass_rate: f64,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub logs: Vec<SimulationLog>,
    pub reports: Vec<MetricReport>,
    pub aggregate: Aggregate,
}

fn snake_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// The denoiser named by the config, when the agent mode needs one.
pub fn load_model(run: &RunConfig) -> Result<Option<Arc<dyn DenoiserModel>>> {
    match (&run.model_path, run.simulation.agent_mode) {
        (Some(p), AgentMode::DiffusionHybrid) => {
            let m: Arc<dyn DenoiserModel> = Arc::new(ToyDenoiser::load(p)?);
            Ok(Some(m))
        }
        (None, AgentMode::DiffusionHybrid) => Err(Error::Config(
            "diffusion_hybrid agents need model_path".into(),
        )),
        _ => Ok(None),
    }
}

pub fn aggregate(reports: &[MetricReport], run: &RunConfig) -> Result<Aggregate> {
    let cls: Vec<ClsBreakdown> = reports.iter().map(|r| r.cls.clone()).collect();
    let run = run.effective();
    Ok(Aggregate {
        planner: snake_name(&run.planner),
        agent_mode: snake_name(&run.simulation.agent_mode),
        scenarios: reports.len(),
        mean_cls: cls.iter().map(|c| c.cls).sum::<f64>() / cls.len().max(1) as f64,
        success_rate: success_rate(&cls)?,
        pass_rate: pass_rate(&cls, &DEFAULT_CORE_NAMES)?,
        seed: run.seed,
        config: run.echo(),
    })
}

/// Runs and scores every scenario on `parallel` threads. Results are in
/// scenario id order and do not depend on the thread count.
pub fn evaluate(
    scenarios: &[Arc<Scenario>],
    run: &RunConfig,
    model: Option<Arc<dyn DenoiserModel>>,
    parallel: usize,
) -> Result<Evaluation> {
    if scenarios.is_empty() {
        return Err(Error::EmptyBatch);
    }
    run.validate()?;
    let eff = run.effective();
    let logs = run_batch(scenarios, eff.planner, &eff.simulation, model, parallel)?;
    let echo = eff.echo();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let reports = pool.install(|| {
        logs.par_iter()
            .map(|log| {
                let sc = scenarios
                    .iter()
                    .find(|s| s.id == log.scenario_id)
                    .expect("log comes from a scenario");
                MetricReport::compute(log, sc, &eff.cls, &eff.realism, echo.clone())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let aggregate = aggregate(&reports, &eff)?;
    Ok(Evaluation {
        logs,
        reports,
        aggregate,
    })
}

/// One row per planner in the CLS / SR / PR layout.
pub fn aggregate_table(rows: &[Aggregate]) -> String {
    let mut out = format!(
        "{:<18} | {:<16} | {:>9} | {:>8} | {:>8} | {:>8}\n",
        "Planner", "Agents", "Scenarios", "CLS", "SR", "PR"
    );
    out.push_str(&format!(
        "{}-|-{}-|-{}-|-{}-|-{}-|-{}\n",
        "-".repeat(18),
        "-".repeat(16),
        "-".repeat(9),
        "-".repeat(8),
        "-".repeat(8),
        "-".repeat(8)
    ));
    for a in rows {
        out.push_str(&format!(
            "{:<18} | {:<16} | {:>9} | {:>8.2} | {:>8.2} | {:>8.2}\n",
            a.planner, a.agent_mode, a.scenarios, a.mean_cls, a.success_rate, a.pass_rate
        ));
    }
    out
}

pub fn report_to_string<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Writes `<id>.log.json` and `<id>.report.json` per scenario, then
/// `aggregate.json` and `summary.txt`.
pub fn write_evaluation(out: &Path, eval: &Evaluation, write_logs: bool) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for (log, report) in eval.logs.iter().zip(&eval.reports) {
        write_run(out, log, report, write_logs)?;
    }
    write_atomic(
        &out.join("aggregate.json"),
        report_to_string(&eval.aggregate)?.as_bytes(),
    )?;
    write_atomic(
        &out.join("summary.txt"),
        aggregate_table(std::slice::from_ref(&eval.aggregate)).as_bytes(),
    )?;
    Ok(())
}

pub fn write_run(
    out: &Path,
    log: &SimulationLog,
    report: &MetricReport,
    write_log: bool,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let id = &log.scenario_id;
    if write_log {
        write_atomic(
            &out.join(format!("{id}.log.json")),
            log_to_string(log)?.as_bytes(),
        )?;
    }
    write_atomic(
        &out.join(format!("{id}.report.json")),
        report_to_string(report)?.as_bytes(),
    )?;
    Ok(())
}
