use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;

use rbench_core::diffusion::{train_toy_denoiser, TrainingConfig};
use rbench_core::engine::SimulationLog;
use rbench_core::io::{
    self, aggregate_table, evaluate, gen_synthetic, load_config_file, load_log, load_model,
    load_scenario, load_scenario_dir, render_svg, report_to_string, save_scenario, write_atomic,
    write_evaluation, RenderOptions, RunConfig, SyntheticKind, SyntheticParams,
};
use rbench_core::metrics::realism_suite;
use rbench_core::scene::{MapModel, Scenario};
use rbench_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "rbench",
    version,
    about = "Closed-loop planner benchmark with reactive agents"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its log and metric report.
    Simulate(SimulateArgs),
    /// Run every scenario in a directory and write reports plus an aggregate.
    Evaluate(EvaluateArgs),
    /// Compare simulated logs against reference logs.
    Metrics(MetricsArgs),
    /// Draw a scenario or a simulation log as SVG.
    Render(RenderArgs),
    /// Write synthetic scenario files.
    GenSynthetic(GenArgs),
    /// Train the toy denoiser on recorded scenarios.
    TrainDenoiser(TrainArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (.json or .toml); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed and REACTIVE_BENCH_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Denoiser file; overrides `model_path` from the config.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Also write an SVG of the simulated run.
    #[arg(long)]
    svg: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Worker threads; overrides `parallel` from the config.
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long = "sim-log", required = true, num_args = 1..)]
    sim_log: Vec<PathBuf>,
    #[arg(long = "ref-log", required = true, num_args = 1..)]
    ref_log: Vec<PathBuf>,
    /// Scenario files providing maps for the off-road rate.
    #[arg(long = "scenario", num_args = 1..)]
    scenarios: Vec<PathBuf>,
    /// Run configuration; only its `realism` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the comparison here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Simulation log to draw instead of the recording.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    from: Option<usize>,
    #[arg(long)]
    to: Option<usize>,
    #[arg(long, default_value_t = 10)]
    stride: usize,
    /// Pixels per meter.
    #[arg(long, default_value_t = 4.0)]
    scale: f64,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scenario family, or `all` to cycle through every family.
    #[arg(long, default_value = "all")]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenarios; seeds run from --seed upward.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Generator parameters (.json or .toml).
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scenarios: PathBuf,
    /// Training configuration (.json or .toml).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed_override(args.seed)?;
    if let Some(m) = &args.model {
        cfg.model_path = Some(m.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = run_config(&args.run)?;
    let scenario = Arc::new(load_scenario(&args.scenario)?);
    let model = load_model(&cfg)?;
    let eval = evaluate(std::slice::from_ref(&scenario), &cfg, model, 1)?;
    let (log, report) = (&eval.logs[0], &eval.reports[0]);
    io::write_run(&args.out, log, report, true)?;
    if args.svg {
        let path = args.out.join(format!("{}.svg", log.scenario_id));
        render_svg(&scenario, Some(log), &RenderOptions::default(), &path)?;
    }
    println!(
        "{}: status {:?}, CLS {:.2}",
        log.scenario_id, log.status, report.cls.cls
    );
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let mut cfg = run_config(&args.run)?;
    if let Some(n) = args.parallel {
        cfg.parallel = n;
    }
    cfg.validate()?;
    let scenarios: Vec<Arc<Scenario>> = load_scenario_dir(&args.scenarios)?
        .into_iter()
        .map(Arc::new)
        .collect();
    let model = load_model(&cfg)?;
    info!(
        "evaluating {} scenarios on {} threads",
        scenarios.len(),
        cfg.parallel
    );
    let eval = evaluate(&scenarios, &cfg, model, cfg.parallel)?;
    write_evaluation(&args.out, &eval, cfg.write_logs)?;
    print!("{}", aggregate_table(std::slice::from_ref(&eval.aggregate)));
    Ok(())
}

fn metrics_cmd(args: &MetricsArgs) -> Result<()> {
    let realism = match &args.config {
        Some(p) => RunConfig::load(p)?.realism,
        None => RunConfig::default().realism,
    };
    let load_all = |paths: &[PathBuf]| -> Result<Vec<SimulationLog>> {
        paths.iter().map(|p| load_log(p)).collect()
    };
    let sim = load_all(&args.sim_log)?;
    let reference = load_all(&args.ref_log)?;
    let scenarios: Vec<Scenario> = args
        .scenarios
        .iter()
        .map(|p| load_scenario(p))
        .collect::<Result<_>>()?;
    let map_for =
        |id: &str| -> Option<&MapModel> { scenarios.iter().find(|s| s.id == id).map(|s| &s.map) };
    let cmp = realism_suite(&sim, &reference, &map_for, &realism)?;
    let text = report_to_string(&cmp)?;
    match &args.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn render_cmd(args: &RenderArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario)?;
    let log = args.log.as_deref().map(load_log).transpose()?;
    let ticks = match (args.from, args.to) {
        (None, None) => None,
        (f, t) => Some((f.unwrap_or(0), t.unwrap_or(usize::MAX))),
    };
    let opts = RenderOptions {
        ticks,
        stride: args.stride,
        scale: args.scale,
    };
    render_svg(&scenario, log.as_ref(), &opts, &args.out)
}

fn gen_cmd(args: &GenArgs) -> Result<()> {
    let params: SyntheticParams = match &args.params {
        Some(p) => load_config_file(p)?,
        None => SyntheticParams::default(),
    };
    params.validate()?;
    let kinds: Vec<SyntheticKind> = if args.kind == "all" {
        SyntheticKind::ALL.to_vec()
    } else {
        vec![args.kind.parse()?]
    };
    if args.count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let scenarios = (0..args.count)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            gen_synthetic(kind, &params, args.seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&args.out)?;
    for s in &scenarios {
        save_scenario(s, &args.out.join(format!("{}.json", s.id)))?;
        println!("{}", s.id);
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainingConfig = match &args.config {
        Some(p) => load_config_file(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let scenarios = load_scenario_dir(&args.scenarios)?;
    let (model, report) = train_toy_denoiser(&scenarios, &cfg)?;
    model.save(&args.out)?;
    println!(
        "steps {}  train loss {:.6}  holdout loss {:.6}  (zero baseline {:.6})",
        report.steps,
        report.final_train_loss,
        report.final_holdout_loss,
        report.zero_baseline_holdout_loss
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::GenSynthetic(a) => gen_cmd(a),
        Command::TrainDenoiser(a) => train_cmd(a),
    }
}

fn exists_or_validation(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )))
    }
}

fn check_inputs(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => exists_or_validation(&a.scenario),
        Command::Evaluate(a) => exists_or_validation(&a.scenarios),
        Command::Render(a) => exists_or_validation(&a.scenario),
        Command::TrainDenoiser(a) => exists_or_validation(&a.scenarios),
        Command::Metrics(a) => a
            .sim_log
            .iter()
            .chain(&a.ref_log)
            .try_for_each(|p| exists_or_validation(p)),
        Command::GenSynthetic(_) => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match check_inputs(&cli).and_then(|()| dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
