//! `attctl`: train, evaluate and exercise attitude controllers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O or transport error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use attctl_core::checkpoint::{Checkpoint, CheckpointError};
use attctl_core::config::{ConfigError, Manifest, RunConfig};
use attctl_core::env::{EnvError, TaskSpec};
use attctl_core::eval::{
    aggregate_envelope, convergence_time, export_results, run_eval_episodes, write_summary_json, ConvergenceReport,
    EvalError,
};
use attctl_core::harness::{
    run_experiment, spawn_tcp_responder, ExperimentPlan, HarnessError, InProcess, LatencyModel, PolicyResponder,
    TcpTransport, Transport,
};
use attctl_core::ppo::{multi_seed_select, TrainError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self { code: EXIT_IO, message: e.to_string() }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        let code = match e {
            EnvError::Dynamics(_) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::InvalidHyperparam { .. } => EXIT_CONFIG,
            TrainError::Env(EnvError::Dynamics(_)) => EXIT_NUMERICAL,
            TrainError::Env(_) => EXIT_CONFIG,
            TrainError::Nn(_) | TrainError::Numerical(_) | TrainError::AllSeedsFailed(_) => EXIT_NUMERICAL,
            TrainError::Checkpoint(_) | TrainError::Io { .. } => EXIT_IO,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let code = match &e {
            EvalError::Incompatible(_) | EvalError::Usage(_) => EXIT_CONFIG,
            EvalError::Env(EnvError::Dynamics(_)) | EvalError::Nn(_) => EXIT_NUMERICAL,
            EvalError::Env(_) => EXIT_CONFIG,
            EvalError::Io { .. } => EXIT_IO,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Plan(_) => EXIT_CONFIG,
            HarnessError::Dynamics(_) => EXIT_NUMERICAL,
            _ => EXIT_IO,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "attctl", version, about = "Reinforcement-learning attitude control for small satellites")]
struct Cli {
    /// Worker threads for seeds, environments and evaluation episodes.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output root.
    #[arg(long, global = true, env = "ATTCTL_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config, or a run manifest to repeat a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task id such as `none-full` or `x-y`, overriding the config.
    #[arg(long)]
    task: Option<String>,
    /// Use a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Full-length schedule (40 epochs, 10 seeds, 10000 evaluation episodes). Takes many hours.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluate with the policy mean (`--deterministic false` samples actions).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LatencyKind {
    Fixed,
    Uniform,
    Replay,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train controllers over the configured seeds and keep the best one.
    Train(RunArgs),
    /// Evaluate a checkpoint and export envelopes and convergence statistics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trace files to write (the envelope always covers every episode).
        #[arg(long, default_value_t = 10)]
        traces: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate (and optionally train) all ten tasks.
    Suite {
        /// Directory holding `<task-id>/best.ckpt`; defaults to the output root.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Train every task first.
        #[arg(long)]
        train: bool,
        /// Print the task ids and exit.
        #[arg(long)]
        list: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run one closed-loop experiment against a checkpoint.
    Loop {
        /// Experiment plan (JSON).
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the plan's latency model.
        #[arg(long, value_enum)]
        latency: Option<LatencyKind>,
        /// Latency for `fixed`, s.
        #[arg(long, default_value_t = 0.5)]
        latency_seconds: f64,
        /// Recorded latencies for `replay`: a JSON array or one value per line.
        #[arg(long)]
        replay_file: Option<PathBuf>,
        /// Seed for `uniform` latencies.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Serve the policy over loopback TCP instead of in-process.
        #[arg(long)]
        tcp: bool,
    },
    /// Describe a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

fn load_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if args.paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(t) = &args.task {
        let task: TaskSpec = t.parse()?;
        cfg = cfg.for_task(&task);
    }
    if let Some(s) = args.seed {
        cfg.run.seeds = vec![s];
    }
    if let Some(e) = args.epochs {
        cfg.ppo.epochs = e;
    }
    if let Some(s) = args.steps_per_epoch {
        cfg.ppo.steps_per_epoch = s;
    }
    if let Some(n) = args.episodes {
        cfg.eval.n_episodes = n;
    }
    if let Some(d) = args.deterministic {
        cfg.eval.deterministic = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_root(cli_out: &Option<PathBuf>, cfg: Option<&RunConfig>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| cfg.and_then(|c| c.run.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Trains the configured task into `dir` and returns the selected checkpoint.
fn train_into(cfg: &RunConfig, dir: &Path, workers: Option<usize>) -> CliResult<Checkpoint> {
    create_dir(dir)?;
    Manifest::new("train", cfg, workers).save(&dir.join("manifest.json"))?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(|e| CliError::io(&config_path, e))?;

    let setup = cfg.train_setup()?;
    info!("training {} on seeds {:?}", setup.task.id(), cfg.run.seeds);
    let sel = multi_seed_select(&setup, &cfg.run.seeds, Some(dir))?;
    sel.best.save(&dir.join("best.ckpt"))?;
    sel.best.save(&dir.join("best.json"))?;
    write_json(
        &dir.join("selection.json"),
        &serde_json::json!({
            "task": setup.task.id(),
            "best_seed": sel.best_seed,
            "mean_best_reward": sel.mean_best_reward,
            "var_best_reward": sel.var_best_reward,
            "seeds": sel.per_seed,
            "best_param_hash": sel.best.param_hash(),
        }),
    )?;
    println!(
        "{}: best seed {} (reward {:.3}; mean {:.3}, variance {:.3}) -> {}",
        setup.task.id(),
        sel.best_seed,
        sel.outcomes.iter().find(|o| o.seed == sel.best_seed).map_or(f64::NAN, |o| o.best_reward()),
        sel.mean_best_reward,
        sel.var_best_reward,
        dir.join("best.ckpt").display()
    );
    Ok(sel.best)
}

fn evaluate_into(cfg: &RunConfig, ckpt: &Checkpoint, dir: &Path, traces: usize) -> CliResult<ConvergenceReport> {
    let target = cfg.eval_target()?;
    if let Some(t) = &ckpt.meta.task {
        if *t != target.task.id() {
            warn!("checkpoint was trained for {t}, evaluating on {}", target.task.id());
        }
    }
    let all = run_eval_episodes(&ckpt.net, &target, &cfg.eval)?;
    let envelope = aggregate_envelope(&all)?;
    let report = convergence_time(&target.task, &all, target.task.threshold())?;
    export_results(dir, &envelope, std::slice::from_ref(&report), &all[..traces.min(all.len())])?;
    println!(
        "{}: {} episodes, settled below {} rad in {:.1}% (mean {} s), first crossing in {:.1}%",
        report.task,
        report.episodes,
        report.accuracy_rad,
        100.0 * report.converged_fraction,
        report.mean_convergence_time_s.map_or("-".into(), |t| format!("{t:.2}")),
        100.0 * report.first_crossing_fraction
    );
    Ok(report)
}

fn cmd_train(cli: &Cli, args: &RunArgs) -> CliResult {
    let cfg = load_config(args)?;
    let dir = out_root(&cli.out, Some(&cfg)).join(cfg.task_spec()?.id());
    train_into(&cfg, &dir, cli.workers).map(|_| ())
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, traces: usize, args: &RunArgs) -> CliResult {
    let cfg = load_config(args)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let dir = out_root(&cli.out, Some(&cfg)).join(cfg.task_spec()?.id()).join("eval");
    create_dir(&dir)?;
    Manifest::new("eval", &cfg, cli.workers).save(&dir.join("manifest.json"))?;
    evaluate_into(&cfg, &ckpt, &dir, traces).map(|_| ())
}

fn cmd_suite(cli: &Cli, checkpoints: Option<&Path>, train: bool, list: bool, args: &RunArgs) -> CliResult {
    if list {
        for t in TaskSpec::suite() {
            println!("{}\tthreshold {} rad\thorizon {} steps", t.id(), t.threshold(), t.default_horizon());
        }
        return Ok(());
    }
    let base = load_config(args)?;
    let root = out_root(&cli.out, Some(&base));
    let ckpt_root = checkpoints.map(Path::to_path_buf).unwrap_or_else(|| root.clone());
    let mut reports = Vec::new();
    for task in TaskSpec::suite() {
        let cfg = base.for_task(&task);
        cfg.validate()?;
        let ckpt = if train {
            train_into(&cfg, &root.join(task.id()), cli.workers)?
        } else {
            Checkpoint::load(&ckpt_root.join(task.id()).join("best.ckpt"))?
        };
        let dir = root.join(task.id()).join("eval");
        reports.push(evaluate_into(&cfg, &ckpt, &dir, 0)?);
    }
    create_dir(&root)?;
    write_summary_json(&root.join("suite-summary.json"), &reports)?;
    println!("suite summary -> {}", root.join("suite-summary.json").display());
    Ok(())
}

fn read_replay(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())));
    }
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse().map_err(|e| CliError::config(format!("{}: `{l}`: {e}", path.display()))))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_loop(
    cli: &Cli,
    plan_path: &Path,
    checkpoint: &Path,
    latency: Option<LatencyKind>,
    latency_seconds: f64,
    replay_file: Option<&Path>,
    seed: u64,
    tcp: bool,
) -> CliResult {
    let text = fs::read_to_string(plan_path).map_err(|e| CliError::io(plan_path, e))?;
    let mut plan: ExperimentPlan =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", plan_path.display())))?;
    match latency {
        Some(LatencyKind::Fixed) => plan.latency = LatencyModel::Fixed { seconds: latency_seconds },
        Some(LatencyKind::Uniform) => plan.latency = LatencyModel::Uniform { lo: 0.5, hi: 1.0, seed },
        Some(LatencyKind::Replay) => {
            let path = replay_file.ok_or_else(|| CliError::config("--latency replay needs --replay-file"))?;
            plan.latency = LatencyModel::Replay { samples: read_replay(path)? };
        }
        None => {}
    }
    plan.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let params = attctl_core::SatelliteParams::default();
    let responder = PolicyResponder::new(ckpt.net, params);

    let result = if tcp {
        let (addr, handle) = spawn_tcp_responder(responder)?;
        let mut transport = TcpTransport::connect(addr, Duration::from_secs_f64(plan.response_timeout_s))?;
        let r = run_experiment(&plan, &mut transport as &mut dyn Transport, &params);
        drop(transport);
        if let Err(e) = handle.join().expect("responder thread") {
            warn!("responder ended with: {e}");
        }
        r?
    } else {
        run_experiment(&plan, &mut InProcess { responder }, &params)?
    };

    let dir = out_root(&cli.out, None).join("loop");
    create_dir(&dir)?;
    attctl_core::eval::write_trace_csv(&dir.join("trace.csv"), &result.trace, 0)?;
    write_json(&dir.join("result.json"), &serde_json::to_value(&result).expect("result serializes"))?;
    println!(
        "verdict {:?} after {:.1} s ({} cycles), final error {:.5} rad",
        result.verdict,
        result.trace.time.last().copied().unwrap_or(0.0),
        result.trace.len() - 1,
        result.trace.error.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(d) = &result.diagnostic {
        println!("diagnostic: {d}");
    }
    println!("trace -> {}", dir.join("trace.csv").display());
    Ok(())
}

fn cmd_inspect(path: &Path, json: bool) -> CliResult {
    let ckpt = Checkpoint::load(path)?;
    let arch = ckpt.net.architecture();
    let info = serde_json::json!({
        "path": path.display().to_string(),
        "format_version": attctl_core::checkpoint::FORMAT_VERSION,
        "obs_dim": arch.obs_dim,
        "act_dim": arch.act_dim,
        "hidden": arch.hidden,
        "activation": arch.activation.tag(),
        "actor_layers": arch.actor_shapes(),
        "critic_layers": arch.critic_shapes(),
        "param_count": ckpt.net.param_count(),
        "log_std": ckpt.net.log_std(),
        "task": ckpt.meta.task,
        "config_hash": ckpt.meta.config_hash,
        "param_hash": ckpt.param_hash(),
    });
    if json {
        println!("{}", serde_json::to_string_pretty(&info).expect("serializes"));
        return Ok(());
    }
    println!("checkpoint      {}", path.display());
    println!("format version  {}", attctl_core::checkpoint::FORMAT_VERSION);
    println!("task            {}", ckpt.meta.task.as_deref().unwrap_or("-"));
    println!("activation      {}", arch.activation.tag());
    let fmt = |s: Vec<(usize, usize)>| s.iter().map(|(i, o)| format!("{i}x{o}")).collect::<Vec<_>>().join(" -> ");
    println!("actor layers    {}", fmt(arch.actor_shapes()));
    println!("critic layers   {}", fmt(arch.critic_shapes()));
    println!("log std         {:?}", ckpt.net.log_std());
    println!("parameters      {}", ckpt.net.param_count());
    println!("config hash     {}", ckpt.meta.config_hash.as_deref().unwrap_or("-"));
    println!("param hash      {}", ckpt.param_hash());
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::config("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    match &cli.command {
        Command::Train(args) => cmd_train(cli, args),
        Command::Eval { checkpoint, traces, run } => cmd_eval(cli, checkpoint, *traces, run),
        Command::Suite { checkpoints, train, list, run } => cmd_suite(cli, checkpoints.as_deref(), *train, *list, run),
        Command::Loop { plan, checkpoint, latency, latency_seconds, replay_file, seed, tcp } => cmd_loop(
            cli,
            plan,
            checkpoint,
            *latency,
            *latency_seconds,
            replay_file.as_deref(),
            *seed,
            *tcp,
        ),
        Command::Inspect { checkpoint, json } => cmd_inspect(checkpoint, *json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
