//! Command-line front end: parse a model file, run the distributed planner,
//! and emit a JSON report.
//!
//! Exit codes: 0 success, 1 internal failure, 2 unreadable or unparseable
//! model, 3 validation violations, 4 the planner did not converge, 5 the
//! command needs the flattened joint MDP and it exceeds the oracle cap.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hfmdp::action::{compute_q, simulate_episode, Episode};
use hfmdp::generate::{joint_alpha, random_state};
use hfmdp::model::{RelevanceWeights, SubsystemTree};
use hfmdp::modelfile::parse_model;
use hfmdp::oracle::{centralized_factored_lp, exact_bellman_lp};
use hfmdp::planner::{run_planner, PlanResult, PlannerConfig, PlannerError, Schedule};
use hfmdp::report::{
    ConfigSection, EpisodesSection, OracleSection, PlanSection, Report, TimingSection,
    ValidationSection,
};
use hfmdp::validate::{build_equivalent_mdp, validate};

#[derive(Parser)]
#[command(name = "hfmdp", version, about = "Distributed planner for subsystem-tree MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file against the structural rules and report violations.
    Validate {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Run the distributed planner and report values, messages, and flows.
    Plan {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Plan, then roll out greedy-policy episodes on the joint MDP.
    Execute {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        plan: PlanArgs,
        /// Steps per episode.
        #[arg(long, default_value_t = 20)]
        horizon: usize,
        /// Number of episodes, each from a fresh uniformly drawn start state.
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// State-action pair budget for flattening the joint MDP.
        #[arg(long, default_value_t = hfmdp::oracle::EXACT_LP_CAP)]
        oracle_cap: usize,
    },
    /// Plan, then solve the coupled LP and the exact joint LP and report the
    /// per-quantity deltas.
    Compare {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        plan: PlanArgs,
        /// State-action pair budget for the exact joint solve.
        #[arg(long, default_value_t = hfmdp::oracle::EXACT_LP_CAP)]
        oracle_cap: usize,
    },
}

#[derive(Args)]
struct IoArgs {
    /// Model file to load.
    #[arg(long)]
    model: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Seed for the random sweep schedule (and episode draws).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordination schedule: sync, leaves-first, or random.
    #[arg(long, default_value = "sync", value_parser = Schedule::from_str)]
    schedule: Schedule,
    /// Round cap for the coordination loop.
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Convergence tolerance on message changes.
    #[arg(long)]
    tol: Option<f64>,
    /// Box half-width for message variables; derived from rewards when absent.
    #[arg(long)]
    message_bound: Option<f64>,
    /// Share solved artifacts between subsystems of the same class.
    #[arg(long, default_value = "off", value_parser = ["on", "off"])]
    reuse: String,
    /// Include wall-clock timing in the report. Timed reports are not
    /// byte-reproducible across runs.
    #[arg(long)]
    timing: bool,
}

impl PlanArgs {
    fn config(&self) -> PlannerConfig {
        let defaults = PlannerConfig::default();
        PlannerConfig {
            schedule: self.schedule,
            seed: self.seed,
            max_rounds: self.max_iters,
            tol: self.tol.unwrap_or(defaults.tol),
            message_bound: self.message_bound,
            reuse: self.reuse == "on",
        }
    }
}

/// A failure with its exit code and a message for stderr.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn parse(message: impl Into<String>) -> Failure {
        Failure { code: 2, message: message.into() }
    }

    fn validation(message: impl Into<String>) -> Failure {
        Failure { code: 3, message: message.into() }
    }

    fn nonconvergence(message: impl Into<String>) -> Failure {
        Failure { code: 4, message: message.into() }
    }

    fn oracle_cap(message: impl Into<String>) -> Failure {
        Failure { code: 5, message: message.into() }
    }

    fn other(message: impl Into<String>) -> Failure {
        Failure { code: 1, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hfmdp: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate { io } => cmd_validate(&io),
        Command::Plan { io, plan } => cmd_plan(&io, &plan),
        Command::Execute { io, plan, horizon, episodes, oracle_cap } => {
            cmd_execute(&io, &plan, horizon, episodes, oracle_cap)
        }
        Command::Compare { io, plan, oracle_cap } => cmd_compare(&io, &plan, oracle_cap),
    }
}

fn load(path: &Path) -> Result<(SubsystemTree, RelevanceWeights), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::parse(format!("{}: {}", path.display(), e)))?;
    let parsed = parse_model(&text)
        .map_err(|e| Failure::parse(format!("{}: {}", path.display(), e)))?;
    Ok((parsed.tree, parsed.weights))
}

fn emit(report: &Report, out: Option<&Path>) -> Result<(), Failure> {
    let text = report.render();
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Failure::other(format!("{}: {}", path.display(), e))),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn cmd_validate(io: &IoArgs) -> Result<(), Failure> {
    let (tree, weights) = load(&io.model)?;
    let vreport = validate(&tree, Some(&weights));
    let report = Report::new(
        "validate",
        &io.model.display().to_string(),
        ValidationSection::from_report(&vreport),
    );
    emit(&report, io.out.as_deref())?;
    if vreport.is_valid() {
        Ok(())
    } else {
        Err(Failure::validation(format!(
            "{} violation(s); see the report",
            vreport.violations.len()
        )))
    }
}

/// Validate, plan, and build the common report skeleton shared by the plan,
/// execute, and compare commands.
fn plan_with_report(
    command: &str,
    io: &IoArgs,
    args: &PlanArgs,
) -> Result<(SubsystemTree, RelevanceWeights, PlanResult, Report, Instant), Failure> {
    let (tree, weights) = load(&io.model)?;
    let vreport = validate(&tree, Some(&weights));
    let validation = ValidationSection::from_report(&vreport);
    let model_name = io.model.display().to_string();
    if !vreport.is_valid() {
        // Still emit the report so the violations are machine-readable.
        let report = Report::new(command, &model_name, validation);
        emit(&report, io.out.as_deref())?;
        return Err(Failure::validation(format!(
            "{} violation(s); see the report",
            vreport.violations.len()
        )));
    }

    let config = args.config();
    let started = Instant::now();
    let result = run_planner(&tree, &weights, &config).map_err(|e| match e {
        PlannerError::NonConvergence { .. } | PlannerError::ActiveBoundsAtFixpoint { .. } => {
            Failure::nonconvergence(e.to_string())
        }
        other => Failure::other(other.to_string()),
    })?;
    log_trace(&tree, &result);

    let mut report = Report::new(command, &model_name, validation);
    report.config = Some(ConfigSection::from_planner(&config));
    report.plan = Some(PlanSection::from_result(&tree, &result));
    Ok((tree, weights, result, report, started))
}

fn finish(
    mut report: Report,
    io: &IoArgs,
    args: &PlanArgs,
    started: Instant,
    oracle_ms: Option<u64>,
) -> Result<(), Failure> {
    if args.timing {
        report.timing = Some(TimingSection {
            total_ms: started.elapsed().as_millis() as u64,
            plan_ms: None,
            oracle_ms,
        });
    }
    emit(&report, io.out.as_deref())
}

fn cmd_plan(io: &IoArgs, args: &PlanArgs) -> Result<(), Failure> {
    let (_, _, _, report, started) = plan_with_report("plan", io, args)?;
    finish(report, io, args, started, None)
}

fn cmd_execute(
    io: &IoArgs,
    args: &PlanArgs,
    horizon: usize,
    episodes: usize,
    oracle_cap: usize,
) -> Result<(), Failure> {
    let (tree, _, result, mut report, started) = plan_with_report("execute", io, args)?;
    let qs = compute_q(&tree, &result.v).map_err(|e| Failure::other(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut runs: Vec<Episode> = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let start = random_state(&mut rng, &tree);
        let sim_seed: u64 = rng.gen();
        let episode = simulate_episode(&tree, &qs, &start, horizon, sim_seed, oracle_cap)
            .map_err(|e| {
                let over_cap = matches!(
                    e,
                    hfmdp::action::ActionError::Flatten(
                        hfmdp::validate::FlattenError::TooLarge { .. }
                    )
                );
                if over_cap {
                    Failure::oracle_cap(e.to_string())
                } else {
                    Failure::other(e.to_string())
                }
            })?;
        runs.push(episode);
    }
    report.episodes = Some(EpisodesSection::build(horizon, &runs));
    finish(report, io, args, started, None)
}

fn cmd_compare(io: &IoArgs, args: &PlanArgs, oracle_cap: usize) -> Result<(), Failure> {
    let (tree, weights, result, mut report, started) = plan_with_report("compare", io, args)?;

    let oracle_started = Instant::now();
    let centralized = centralized_factored_lp(&tree, &weights, result.message_bound)
        .map_err(|e| Failure::other(format!("coupled LP oracle: {}", e)))?;

    let mdp = build_equivalent_mdp(&tree, oracle_cap).map_err(|e| {
        if matches!(e, hfmdp::validate::FlattenError::TooLarge { .. }) {
            Failure::oracle_cap(e.to_string())
        } else {
            Failure::other(e.to_string())
        }
    })?;
    let alpha = joint_alpha(&tree, &weights);
    let exact = exact_bellman_lp(&mdp, &alpha, oracle_cap).map_err(|e| {
        if matches!(e, hfmdp::oracle::OracleError::TooLarge { .. }) {
            Failure::oracle_cap(e.to_string())
        } else {
            Failure::other(format!("exact oracle: {}", e))
        }
    })?;
    let oracle_ms = oracle_started.elapsed().as_millis() as u64;

    report.oracle = Some(OracleSection::build(&result, &centralized, Some(&exact), None));
    finish(report, io, args, started, Some(oracle_ms))
}

/// Per-round progress on stderr, gated by HFMDP_LOG (info or trace).
fn log_trace(tree: &SubsystemTree, result: &PlanResult) {
    let level = std::env::var("HFMDP_LOG").unwrap_or_default();
    if level != "info" && level != "trace" {
        return;
    }
    for rec in &result.trace {
        eprintln!(
            "round {:>3}: bound {:>10.3} rows+{:<3} max-delta {:.3e}",
            rec.round, rec.message_bound, rec.rows_added, rec.max_message_delta
        );
        if level == "trace" {
            for run in &rec.message_lp_runs {
                eprintln!(
                    "    message lp {}: objective {:.6} bounded {} row-added {}",
                    tree.subsystems[run.subsystem].name,
                    run.objective,
                    run.bounded,
                    run.subtree_row_added
                );
            }
            for &j in &rec.standalone_runs {
                eprintln!("    standalone {}", tree.subsystems[j].name);
            }
        }
    }
    eprintln!(
        "converged: rounds {} objective {:.9} standalone {} message-lps {}",
        result.rounds, result.objective, result.standalone_solves, result.message_lp_solves
    );
}
