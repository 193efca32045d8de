use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nnshrink_core::net::{evaluate_output, parse_network, serialize_network, Network};
use nnshrink_core::pipeline::{simplify, Mode, PipelineConfig, SimplifyReport, Timings};
use nnshrink_core::prop::{tighten, InputBox};
use nnshrink_core::slice::{
    family_evaluate, linearization_report, slice_and_simplify, NetworkFamily, SlicePlan,
};
use nnshrink_core::verify::{queries_from_json, solve, verdict_to_json, Verdict};

const EXIT_SAT: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;
const EXIT_UNKNOWN: u8 = 4;

/// Provable simplification of piecewise-linear networks.
///
/// Exit codes: 0 success (or UNSAT for `verify`), 1 SAT, 2 input error,
/// 3 internal error, 4 UNKNOWN. Set NNSHRINK_LOG for log output.
#[derive(Parser)]
#[command(name = "nnshrink", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simplify a network over a box.
    Simplify(SimplifyArgs),
    /// Slice the box and simplify every cell.
    Slice(SliceArgs),
    /// Evaluate a network or a family at one input.
    Eval(EvalArgs),
    /// Run a verification query.
    Verify(VerifyArgs),
    /// Compute per-neuron bounds.
    Bounds(BoundsArgs),
    /// Summarise a simplify report or a family directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Respres,
    Relaxed,
    Full,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long = "box")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "exact")]
    mode: ModeArg,
    /// Output error budget for relaxed and full modes.
    #[arg(long)]
    eps: Option<f64>,
    /// Winner margin for respres and full modes.
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    /// Verifier nodes per query.
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
    /// Bound-tightening leaves per neuron.
    #[arg(long, default_value_t = 64)]
    bound_budget: usize,
    #[arg(long, default_value_t = 100_000)]
    sim_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leave wall-clock timings out of reports.
    #[arg(long)]
    no_timings: bool,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let need_eps = || {
            self.eps
                .context("--eps is required for relaxed and full modes")
        };
        let mode = match self.mode {
            ModeArg::Exact => Mode::Exact,
            ModeArg::Respres => Mode::ResultPreserving { delta: self.delta },
            ModeArg::Relaxed => Mode::Relaxed { e_t: need_eps()? },
            ModeArg::Full => Mode::Full {
                delta: self.delta,
                e_t: need_eps()?,
            },
        };
        Ok(PipelineConfig {
            bound_budget: self.bound_budget,
            sim_samples: self.sim_samples,
            verify_budget: self.budget,
            mode,
            seed: self.seed,
            threads: None,
            ..PipelineConfig::default()
        })
    }

    fn load(&self) -> Result<(Network, InputBox)> {
        let net = load_network(&self.net)?;
        let input = load_box(&self.input)?;
        input.check_network(&net)?;
        Ok((net, input))
    }
}

#[derive(Args)]
struct SimplifyArgs {
    #[command(flatten)]
    common: PipelineArgs,
    /// Where to write the simplified network.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SliceArgs {
    #[command(flatten)]
    common: PipelineArgs,
    /// Split counts per dimension, e.g. `2,2,4`.
    #[arg(long)]
    splits: String,
    /// Simplify only this many evenly spaced cells.
    #[arg(long)]
    sample: Option<usize>,
    /// Family directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "family", required_unless_present = "family")]
    net: Option<PathBuf>,
    #[arg(long)]
    family: Option<PathBuf>,
    /// Reject inputs outside this box.
    #[arg(long = "box")]
    input_box: Option<PathBuf>,
    /// Comma-separated input vector.
    #[arg(long, allow_hyphen_values = true)]
    input: String,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    query: PathBuf,
    /// Network for queries that do not embed one.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Box for queries that do not embed one.
    #[arg(long = "box")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long = "box")]
    input: PathBuf,
    #[arg(long, default_value_t = 64)]
    budget: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A report file from `simplify`, or a family directory from `slice`.
    path: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_network(path: &Path) -> Result<Network> {
    parse_network(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn load_box(path: &Path) -> Result<InputBox> {
    InputBox::from_json(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {s:?} in input {text:?}"))
        })
        .collect()
}

fn finish_report(report: &mut SimplifyReport, no_timings: bool) {
    if no_timings {
        report.timings = Timings::default();
    }
}

fn cmd_simplify(args: &SimplifyArgs) -> Result<u8> {
    let config = args.common.config()?;
    let (net, input) = args.common.load()?;
    let (out, mut report) = simplify(&net, &input, &config)?;
    finish_report(&mut report, args.common.no_timings);
    if let Some(p) = &args.out {
        write(p, &serialize_network(&out))?;
    }
    if let Some(p) = &args.report {
        write(p, &report.to_json())?;
    }
    let c = &report.counts;
    println!(
        "hidden neurons {} -> {} (removed {}, unknown {}), activations {} -> {}, error bound {}",
        report.size_before.hidden,
        report.size_after.hidden,
        c.removed,
        c.unknown,
        report.size_before.activations,
        report.size_after.activations,
        report.ledger.headline
    );
    Ok(0)
}

fn cmd_slice(args: &SliceArgs) -> Result<u8> {
    let config = args.common.config()?;
    let plan = SlicePlan::parse(&args.splits)?;
    let (net, input) = args.common.load()?;
    let sample: Option<Vec<usize>> = match args.sample {
        None => None,
        Some(k) => {
            let n = plan.count();
            if k == 0 || k > n {
                bail!(nnshrink_core::Error::Input(format!(
                    "--sample must be between 1 and {n}, got {k}"
                )));
            }
            Some((0..k).map(|i| i * n / k).collect())
        }
    };
    let mut family = slice_and_simplify(&net, &input, &plan, &config, sample.as_deref())?;
    for e in &mut family.entries {
        if let Some(r) = &mut e.report {
            finish_report(r, args.common.no_timings);
        }
    }
    family
        .save(&args.out)
        .with_context(|| format!("writing family to {}", args.out.display()))?;
    let lin = linearization_report(&family);
    write(
        &args.out.join("linearization.json"),
        &serde_json::to_string_pretty(&lin)?,
    )?;
    println!(
        "{} cells ({} simplified), mean removed {:.1}%, fully linear {}",
        family.entries.len(),
        lin.entries.iter().filter(|e| e.simplified).count(),
        100.0 * lin.mean_removed,
        lin.fully_linear
    );
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<u8> {
    let x = parse_vector(&args.input)?;
    if let Some(p) = &args.input_box {
        let b = load_box(p)?;
        if !b.contains(&x) {
            bail!(nnshrink_core::Error::Input(format!(
                "input {x:?} is outside the box"
            )));
        }
    }
    let y = match (&args.net, &args.family) {
        (Some(p), _) => evaluate_output(&load_network(p)?, &x)?,
        (None, Some(dir)) => family_evaluate(&NetworkFamily::load(dir)?, &x)?,
        (None, None) => unreachable!("clap requires one of --net and --family"),
    };
    println!("{}", serde_json::to_string(&y)?);
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<u8> {
    let text = read(&args.query)?;
    let net = args.net.as_deref().map(load_network).transpose()?;
    let input = args.input.as_deref().map(load_box).transpose()?;
    let queries = queries_from_json(&text, net.as_ref(), input.as_ref())
        .with_context(|| format!("in {}", args.query.display()))?;
    let mut nodes = 0;
    let mut frontier = Vec::new();
    let mut unknown = false;
    for q in &queries {
        let v = solve(q, args.budget);
        log::info!("{}: {} after {} nodes", q.label, v.status(), v.nodes());
        nodes += v.nodes();
        match v {
            Verdict::Sat { witness, .. } => {
                let v = Verdict::Sat { witness, nodes };
                println!("{}", verdict_to_json(&v));
                return Ok(EXIT_SAT);
            }
            Verdict::Unknown { frontier: f, .. } => {
                unknown = true;
                frontier.extend(f);
            }
            Verdict::Unsat { .. } => {}
        }
    }
    let (v, code) = if unknown {
        (Verdict::Unknown { nodes, frontier }, EXIT_UNKNOWN)
    } else {
        (Verdict::Unsat { nodes }, 0)
    };
    println!("{}", verdict_to_json(&v));
    Ok(code)
}

fn cmd_bounds(args: &BoundsArgs) -> Result<u8> {
    let net = load_network(&args.net)?;
    let input = load_box(&args.input)?;
    let b = tighten(&net, &input, args.budget.max(1))?;
    let text = b.to_json();
    match &args.out {
        Some(p) => write(p, &text)?,
        None => println!("{text}"),
    }
    Ok(0)
}

fn cmd_report(args: &ReportArgs) -> Result<u8> {
    if args.path.is_dir() {
        let family = NetworkFamily::load(&args.path)
            .with_context(|| format!("loading family {}", args.path.display()))?;
        println!(
            "{}",
            serde_json::to_string_pretty(&linearization_report(&family))?
        );
    } else {
        let report: SimplifyReport = serde_json::from_str(&read(&args.path)?)
            .with_context(|| format!("in {}", args.path.display()))?;
        let summary = serde_json::json!({
            "mode": report.mode,
            "counts": report.counts,
            "size_before": report.size_before,
            "size_after": report.size_after,
            "error_bound": report.ledger.headline,
            "phase_fraction": report.phase_fraction(),
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<nnshrink_core::Error>() {
            return if e.is_input_error() {
                EXIT_INPUT
            } else {
                EXIT_INTERNAL
            };
        }
    }
    EXIT_INPUT
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("NNSHRINK_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_INPUT);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(EXIT_INTERNAL);
        }
    }
    let result = match &cli.command {
        Command::Simplify(a) => cmd_simplify(a),
        Command::Slice(a) => cmd_slice(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
