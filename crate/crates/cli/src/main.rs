//! Command-line front end: simulate scenarios, sweep parameters, calibrate
//! detector thresholds, and pick monitored events from recorded traces.
//!
//! Reports go to stdout as CSV; `--out-dir` redirects them to files. Set
//! `LEASHSIM_LOG=debug` for per-epoch loop tracing on stderr. Exit codes:
//! 0 on success, 1 on semantic or runtime errors, 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use leashsim::engine::{self, RunOutput};
use leashsim::event_select::{rank_events, select_events, ScoreMatrix};
use leashsim::leash::{calibrate_thresholds, HPC_REGISTERS};
use leashsim::report;
use leashsim::scenario::{LeashMode, Scenario, ThreadKind};
use leashsim::trace::{epoch_matrices, load_trace_csv, EventTraceMatrix, TraceLabel};

#[derive(Parser)]
#[command(
    name = "leashsim",
    version,
    about = "Deterministic fair-share scheduler simulator with a reactive throttling loop"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Write report CSVs into this directory instead of stdout.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Replace the scenario's RNG seed.
    #[arg(long, global = true, value_name = "SEED")]
    seed_override: Option<u64>,
    /// Force the mitigation loop on or off, overriding the scenario.
    #[arg(long, global = true, value_name = "on|off", value_parser = parse_leash)]
    leash: Option<LeashMode>,
    /// Unflag on default weight alone, allowing flag oscillation.
    #[arg(long, global = true)]
    strict_alg1: bool,
    /// Actuate on threat-index deltas instead of the absolute index.
    #[arg(long, global = true)]
    incremental_actuator: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and report per-thread results.
    Run {
        scenario: PathBuf,
        /// Print the per-epoch timeline instead of the summary.
        #[arg(long)]
        timeline: bool,
    },
    /// Simulate a scenario with replacement traces behind its replay threads.
    Replay {
        scenario: PathBuf,
        /// Replace a replay thread's trace file, as NAME=PATH. Repeatable.
        #[arg(long = "trace", value_name = "NAME=PATH", required = true, value_parser = parse_named_path)]
        traces: Vec<(String, PathBuf)>,
        /// Print the per-epoch timeline instead of the summary.
        #[arg(long)]
        timeline: bool,
    },
    /// Sweep channel bandwidth over receiver share or sensor buffer capacity.
    Sweep(SweepArgs),
    /// Compare static and adaptive supervisor response on one scenario.
    ComparePolicies { scenario: PathBuf },
    /// Derive per-event violation thresholds from benign trace recordings.
    Calibrate {
        /// Benign trace CSV. Repeatable.
        #[arg(long = "trace", value_name = "PATH", required = true)]
        traces: Vec<PathBuf>,
        /// Standard deviations above the benign mean.
        #[arg(long, default_value_t = 3.0)]
        k: f64,
        /// Context switches per epoch when collapsing traces.
        #[arg(long = "buffer-n", default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
        buffer_n: u64,
    },
    /// Score every recorded event against every recorded attack.
    RankEvents(CorpusArgs),
    /// Pick a register-constrained event set covering the attack corpus.
    SelectEvents {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Hardware counter registers available to the detector.
        #[arg(long, default_value_t = HPC_REGISTERS as u64, value_parser = clap::value_parser!(u64).range(1..))]
        num_registers: u64,
        /// Minimum score for an event to count as covering an attack.
        #[arg(long, default_value_t = 0.5)]
        min_score: f64,
    },
}

#[derive(Args)]
#[command(group(ArgGroup::new("axis").required(true).multiple(false)))]
struct SweepArgs {
    scenario: PathBuf,
    /// Receiver CPU shares to sweep, comma separated.
    #[arg(long, value_name = "LIST", value_delimiter = ',', group = "axis")]
    shares: Vec<f64>,
    /// Sensor buffer capacities to sweep, comma separated.
    #[arg(long = "buffer-n", value_name = "LIST", value_delimiter = ',', group = "axis", value_parser = clap::value_parser!(u64).range(1..))]
    buffer_n: Vec<u64>,
}

#[derive(Args)]
struct CorpusArgs {
    /// Benign trace CSV; give at least two. Repeatable.
    #[arg(long = "benign", value_name = "PATH", required = true)]
    benign: Vec<PathBuf>,
    /// Attack trace CSV as NAME=PATH. Repeatable.
    #[arg(long = "attack", value_name = "NAME=PATH", required = true, value_parser = parse_named_path)]
    attacks: Vec<(String, PathBuf)>,
    /// Context switches per epoch when collapsing traces.
    #[arg(long = "buffer-n", default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    buffer_n: u64,
}

fn parse_leash(s: &str) -> Result<LeashMode, String> {
    match s {
        "on" => Ok(LeashMode::On),
        "off" => Ok(LeashMode::Off),
        other => Err(format!("expected on or off, got {other}")),
    }
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=PATH, got {s}")),
    }
}

/// Where reports land: files under `--out-dir`, stdout otherwise.
struct Sink {
    out_dir: Option<PathBuf>,
}

impl Sink {
    fn to_files(&self) -> bool {
        self.out_dir.is_some()
    }

    fn emit(&self, filename: &str, content: &str) -> Result<()> {
        match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join(filename);
                fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
                log::info!("wrote {}", path.display());
                Ok(())
            }
            None => {
                print!("{content}");
                Ok(())
            }
        }
    }
}

fn load_scenario(path: &Path, g: &GlobalArgs) -> Result<(Scenario, Option<PathBuf>)> {
    let mut s = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = g.seed_override {
        s.seed = seed;
    }
    if let Some(mode) = g.leash {
        s.modes.leash = mode;
    }
    if g.strict_alg1 {
        s.modes.strict_alg1 = true;
    }
    if g.incremental_actuator {
        s.modes.incremental_actuator = true;
    }
    Ok((s, path.parent().map(Path::to_path_buf)))
}

fn report_run(out: &RunOutput, timeline: bool, sink: &Sink) -> Result<()> {
    if sink.to_files() {
        sink.emit("timeline.csv", &report::render_timeline_csv(out))?;
        sink.emit("summary.csv", &report::render_summary_csv(out))?;
    } else if timeline {
        sink.emit("timeline.csv", &report::render_timeline_csv(out))?;
    } else {
        sink.emit("summary.csv", &report::render_summary_csv(out))?;
    }
    if let Some(ch) = &out.channel {
        log::info!(
            "channel: {:.6} bit/s at error rate {:.6} ({} of {} bits landed)",
            ch.bandwidth_bps,
            ch.error_rate,
            ch.correct_bits,
            ch.transmitted_bits
        );
    }
    Ok(())
}

/// Load a trace corpus as labeled epoch matrices plus the shared event list.
fn load_corpus(
    args: &CorpusArgs,
) -> Result<(Vec<String>, Vec<EventTraceMatrix>, Vec<EventTraceMatrix>)> {
    let epoch_len = args.buffer_n as usize;
    let mut benign = Vec::new();
    for path in &args.benign {
        let table = load_trace_csv(path).with_context(|| format!("loading {}", path.display()))?;
        benign.extend(epoch_matrices(&table, epoch_len, TraceLabel::Benign));
    }
    ensure!(
        benign.len() >= 2,
        "event scoring needs at least two benign recordings, got {}",
        benign.len()
    );

    let mut attacks = Vec::new();
    for (name, path) in &args.attacks {
        let table = load_trace_csv(path).with_context(|| format!("loading {}", path.display()))?;
        let mut matrices = epoch_matrices(&table, epoch_len, TraceLabel::Attack(name.clone()));
        ensure!(
            matrices.len() == 1,
            "attack trace {name} records {} threads; expected exactly one",
            matrices.len()
        );
        attacks.push(matrices.remove(0));
    }
    Ok((benign[0].events.clone(), benign, attacks))
}

fn score_corpus(args: &CorpusArgs) -> Result<ScoreMatrix> {
    let (events, benign, attacks) = load_corpus(args)?;
    let mut rankings = Vec::with_capacity(attacks.len());
    for attack in &attacks {
        rankings.push(rank_events(&benign, attack)?);
    }
    Ok(ScoreMatrix::from_rankings(&events, &rankings)?)
}

fn dispatch(cli: Cli) -> Result<()> {
    let sink = Sink {
        out_dir: cli.global.out_dir.clone(),
    };
    match &cli.command {
        Command::Run { scenario, timeline } => {
            let (s, base) = load_scenario(scenario, &cli.global)?;
            let out = engine::run_at(&s, base.as_deref())?;
            report_run(&out, *timeline, &sink)
        }
        Command::Replay {
            scenario,
            traces,
            timeline,
        } => {
            let (mut s, base) = load_scenario(scenario, &cli.global)?;
            for (name, path) in traces {
                let spec = s
                    .threads
                    .get_mut(name)
                    .with_context(|| format!("scenario has no thread named {name}"))?;
                ensure!(
                    spec.kind == Some(ThreadKind::TraceReplay),
                    "thread {name} is not a trace_replay thread"
                );
                // Resolve against the invoking directory, not the scenario's.
                let abs = fs::canonicalize(path)
                    .with_context(|| format!("trace file {}", path.display()))?;
                spec.path = Some(abs.display().to_string());
            }
            let out = engine::run_at(&s, base.as_deref())?;
            report_run(&out, *timeline, &sink)
        }
        Command::Sweep(args) => {
            let (s, base) = load_scenario(&args.scenario, &cli.global)?;
            if !args.shares.is_empty() {
                let spec = s
                    .covert
                    .as_ref()
                    .context("share sweep needs a covert scenario to measure bandwidth")?;
                let rows = engine::sweep_share(spec, &args.shares)?;
                sink.emit("share_sweep.csv", &report::render_share_sweep_csv(&rows))
            } else {
                let ns: Vec<usize> = args.buffer_n.iter().map(|n| *n as usize).collect();
                let rows = engine::sweep_n(&s, &ns, base.as_deref())?;
                sink.emit("n_sweep.csv", &report::render_n_sweep_csv(&rows))
            }
        }
        Command::ComparePolicies { scenario } => {
            let (s, base) = load_scenario(scenario, &cli.global)?;
            let rows = engine::compare_policies(&s, base.as_deref())?;
            sink.emit("policies.csv", &report::render_policy_csv(&rows))
        }
        Command::Calibrate {
            traces,
            k,
            buffer_n,
        } => {
            ensure!(
                k.is_finite() && *k >= 0.0,
                "k must be finite and non-negative"
            );
            let mut matrices = Vec::new();
            for path in traces {
                let table =
                    load_trace_csv(path).with_context(|| format!("loading {}", path.display()))?;
                matrices.extend(epoch_matrices(
                    &table,
                    *buffer_n as usize,
                    TraceLabel::Benign,
                ));
            }
            let Some(first) = matrices.first() else {
                bail!("calibration needs at least one recorded thread");
            };
            let events = first.events.clone();
            let taus = calibrate_thresholds(&matrices, *k)?;
            sink.emit(
                "thresholds.csv",
                &report::render_thresholds_csv(&events, &taus),
            )
        }
        Command::RankEvents(corpus) => {
            let matrix = score_corpus(corpus)?;
            sink.emit("scores.csv", &report::render_scores_csv(&matrix))
        }
        Command::SelectEvents {
            corpus,
            num_registers,
            min_score,
        } => {
            let matrix = score_corpus(corpus)?;
            let selection = select_events(&matrix, *num_registers as usize, *min_score)?;
            for name in &selection.uncovered {
                log::warn!("attack {name} is not covered by the selected events");
            }
            sink.emit("selection.csv", &report::render_selection_csv(&selection))
        }
    }
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter("LEASHSIM_LOG")).init();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
