use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use framesync::adversaries::AdversarySpec;
use framesync::harness::{
    self, auto_size, replay, report, ConfigError, ExperimentConfig, Sizing, Summary,
};
use framesync::quantum_link::{ted_accuracy_bound, ted_success_bound};

const DEFAULT_OUT: &str = "framesync-out";

#[derive(Parser)]
#[command(name = "framesync", version, about = "Byzantine reference-frame agreement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write trials.jsonl, summary.json and report.csv.
    Run(RunArgs),
    /// Qubit sizing and success bounds.
    Calc(CalcArgs),
    /// Recompute outcomes from an exported transcript and compare.
    Verify(VerifyArgs),
    /// Cartesian sweep over comma-separated parameter lists.
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write transcript.jsonl.
    #[arg(long)]
    transcript: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    n: Option<u64>,
    /// Run-level success target for auto-sizing n.
    #[arg(long)]
    q_target: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    adversary: Option<String>,
    /// Equivocator cluster angle, radians.
    #[arg(long)]
    angle: Option<f64>,
    /// Rusher shift, radians.
    #[arg(long)]
    shift: Option<f64>,
}

#[derive(Args)]
struct CalcArgs {
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    t: usize,
    /// Consistency target 30δ; sets δ = eta/30.
    #[arg(long, conflicts_with = "delta")]
    eta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Run-level success target.
    #[arg(long, default_value_t = 0.99, conflicts_with = "n")]
    target: f64,
    /// Report bounds for this n instead of sizing.
    #[arg(long)]
    n: Option<u64>,
    #[arg(long, value_enum, default_value = "theorem")]
    sizing: SizingArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SizingArg {
    Theorem,
    Conservative,
}

impl From<SizingArg> for Sizing {
    fn from(s: SizingArg) -> Self {
        match s {
            SizingArg::Theorem => Sizing::Theorem,
            SizingArg::Conservative => Sizing::Conservative,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    /// Directory written by `run --transcript`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    t: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    n: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    adversary: Vec<String>,
}

/// Failure that maps to a specific exit code.
enum Outcome {
    Pass,
    Threshold,
}

fn base_config(common: &Common, m: Option<usize>, t: Option<usize>, delta: Option<f64>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let (Some(m), Some(delta)) = (m, delta) else {
                bail!("without --config, pass at least --m and --delta");
            };
            let mut c = ExperimentConfig::new(m, t.unwrap_or((m.max(1) - 1) / 3), delta, 0);
            c.n = None;
            c
        }
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(trials) = common.trials {
        cfg.trials = trials;
    }
    if common.transcript {
        cfg.output.transcript = true;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = Some(out.clone());
    }
    Ok(cfg)
}

/// Pretty JSON to stdout; a closed pipe is not an error.
fn emit(value: serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let written = serde_json::to_writer_pretty(&mut out, &value)
        .map_err(std::io::Error::from)
        .and_then(|()| writeln!(out));
    match written {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn run_one(cfg: &ExperimentConfig, dir: &Path, jobs: Option<usize>) -> Result<Summary> {
    let exp = cfg.resolve()?;
    let result = harness::run_experiment(&exp, jobs)?;
    harness::write_outputs(&result, dir).with_context(|| format!("writing {}", dir.display()))?;
    Ok(result.summary)
}

fn run(args: RunArgs) -> Result<Outcome> {
    let mut cfg = base_config(&args.common, args.m, args.t, args.delta)?;
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if let Some(t) = args.t {
        cfg.t = t;
    }
    if let Some(delta) = args.delta {
        cfg.delta = delta;
    }
    match (args.n, args.q_target) {
        (Some(n), None) => (cfg.n, cfg.q_target) = (Some(n), None),
        (None, Some(q)) => (cfg.n, cfg.q_target) = (None, Some(q)),
        (Some(_), Some(_)) => bail!(ConfigError::Sizing),
        (None, None) => {}
    }
    if let Some(eps) = args.epsilon {
        cfg.epsilon = eps;
    }
    if let Some(name) = args.adversary {
        cfg.adversary.name = name;
    }
    if args.angle.is_some() {
        cfg.adversary.angle = args.angle;
    }
    if args.shift.is_some() {
        cfg.adversary.shift = args.shift;
    }
    let summary = run_one(&cfg, &out_dir(&cfg), args.common.jobs)?;
    emit(serde_json::to_value(&summary)?)?;
    Ok(if summary.pass { Outcome::Pass } else { Outcome::Threshold })
}

fn calc(args: CalcArgs) -> Result<Outcome> {
    let delta = match (args.eta, args.delta) {
        (Some(eta), None) => eta / 30.0,
        (None, Some(d)) => d,
        _ => bail!("pass one of --eta or --delta"),
    };
    if delta.is_nan() || delta <= 0.0 {
        bail!("delta must be positive");
    }
    if !(0.0..=1.0).contains(&args.epsilon) {
        bail!("epsilon must lie in [0, 1]");
    }
    let sizing: Sizing = args.sizing.into();
    let exponent = sizing.exponent(args.m, args.t);
    let n = match args.n {
        Some(n) => n,
        None => {
            if !(args.target > 0.0 && args.target < 1.0) {
                bail!(ConfigError::Target(args.target));
            }
            auto_size(delta, args.target, exponent)
        }
    };
    let q = ted_success_bound(n, delta);
    let out = serde_json::json!({
        "m": args.m,
        "t": args.t,
        "delta": delta,
        "eta": 30.0 * delta,
        "epsilon": args.epsilon,
        "delta_eff": ted_accuracy_bound(delta, args.epsilon),
        "sizing": sizing,
        "exponent": exponent,
        "target": args.n.is_none().then_some(args.target),
        "n": n,
        "q_succ": q,
        "run_bound": q.powf(exponent as f64),
    });
    emit(out)?;
    Ok(Outcome::Pass)
}

fn verify(args: VerifyArgs) -> Result<Outcome> {
    let report = replay::verify_dir(&args.out)?;
    emit(serde_json::to_value(&report)?)?;
    Ok(if report.ok() { Outcome::Pass } else { Outcome::Threshold })
}

fn sweep(args: SweepArgs) -> Result<Outcome> {
    let base = base_config(&args.common, args.m.first().copied(), args.t.first().copied(), args.delta.first().copied())?;
    fn axis<T: Clone>(given: &[T], default: T) -> Vec<T> {
        if given.is_empty() { vec![default] } else { given.to_vec() }
    }
    let ms = axis(&args.m, base.m);
    let deltas = axis(&args.delta, base.delta);
    let epsilons = axis(&args.epsilon, base.epsilon);
    let adversaries = axis(&args.adversary, base.adversary.name.clone());
    let ns: Vec<Option<u64>> = if args.n.is_empty() { vec![base.n] } else { args.n.iter().map(|&n| Some(n)).collect() };

    // resolve everything first so a bad combination fails before any trial
    let mut configs = Vec::new();
    for &m in &ms {
        let ts = axis(&args.t, if args.m.is_empty() { base.t } else { (m.max(1) - 1) / 3 });
        for &t in &ts {
            for &n in &ns {
                for &delta in &deltas {
                    for &epsilon in &epsilons {
                        for name in &adversaries {
                            let mut cfg = base.clone();
                            (cfg.m, cfg.t, cfg.delta, cfg.epsilon) = (m, t, delta, epsilon);
                            if n.is_some() {
                                (cfg.n, cfg.q_target) = (n, None);
                            }
                            if *name != cfg.adversary.name {
                                cfg.adversary = AdversarySpec::named(name).into();
                            }
                            cfg.resolve()?;
                            configs.push(cfg);
                        }
                    }
                }
            }
        }
    }

    let root = out_dir(&base);
    let mut summaries = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let dir = root.join(format!("{i:03}"));
        let summary = run_one(cfg, &dir, args.common.jobs)?;
        eprintln!(
            "[{i:03}] m={} t={} n={} eps={} {}: violation_rate={:.4} pass={}",
            summary.m, summary.t, summary.n, summary.epsilon, summary.adversary.label(), summary.violation_rate, summary.pass
        );
        summaries.push(summary);
    }
    std::fs::create_dir_all(&root)?;
    report::emit_report(&summaries, std::fs::File::create(root.join(harness::REPORT_FILE))?)?;
    Ok(if summaries.iter().all(|s| s.pass) { Outcome::Pass } else { Outcome::Threshold })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Calc(a) => calc(a),
        Command::Verify(a) => verify(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Threshold) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
