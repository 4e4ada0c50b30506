use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use hybridmoe_core::cost::{
    cost_report, fit_profile, measure_samples, samples_from_csv, samples_to_csv, PREDICTION_HEADER,
};
use hybridmoe_core::moe::{max_relative_error, random_inputs, reference_forward, run_schedule, CapacityPolicy};
use hybridmoe_core::sweep::sweep;
use hybridmoe_core::timing::{geometric_sizes, schedule_times_for, verify_inequalities, Timer};
use hybridmoe_core::{CostMode, CostProfile, Error, ExpertWeights, RunConfig, ScheduleKind, SweepGrid};

const TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "hybridmoe",
    version,
    about = "MoE schedule simulator, cost model and selector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit alpha-beta parameters from timing samples
    Fit {
        /// CSV with columns collective,group,elements,seconds
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Price all schedules and pick S1 or S2
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        alg1_literal: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the schedules on simulated ranks and compare with the reference
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = ScheduleArg::All)]
        schedule: ScheduleArg,
        #[arg(long, env = "PARM_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Perturb the weights the schedules see (test hook)
        #[arg(long, hide = true)]
        corrupt_weights: bool,
    },
    /// Check the communication inequalities under simulated timings
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated element counts, or `2^a..2^b`
        #[arg(long, default_value = "2^10..2^24")]
        sizes: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Price a grid of configurations with one profile
    Sweep {
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Produce timing samples from the simulator for the config's cluster
    Measure {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "2^12..2^34")]
        sizes: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Baseline,
    S1,
    S2,
    All,
}

/// Failure that maps to exit status 1 rather than an input error.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<CheckFailed>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn parse_sizes(spec: &str) -> anyhow::Result<Vec<u64>> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let exp = |s: &str| -> anyhow::Result<u32> {
            let e = s
                .trim()
                .strip_prefix("2^")
                .ok_or_else(|| anyhow!("range bounds must look like 2^N, got `{s}`"))?;
            Ok(e.parse()?)
        };
        let (lo, hi) = (exp(a)?, exp(b)?);
        if lo > hi || hi > 62 {
            return Err(anyhow!("bad size range `{spec}`"));
        }
        return Ok(geometric_sizes(lo, hi));
    }
    let sizes = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| anyhow!("size `{s}` is not an integer"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if sizes.is_empty() {
        return Err(anyhow!("no sizes given"));
    }
    Ok(sizes)
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Fit { input, out } => {
            let samples = samples_from_csv(&read(&input)?).with_context(|| format!("parsing {}", input.display()))?;
            let profile = fit_profile(&samples)?;
            emit(out.as_deref(), &profile.to_csv())
        }
        Command::Predict {
            config,
            profile,
            alg1_literal,
            out,
        } => {
            let cfg = load_config(&config)?;
            let prof =
                CostProfile::from_csv(&read(&profile)?).with_context(|| format!("parsing {}", profile.display()))?;
            let mode = if alg1_literal {
                CostMode::Alg1Literal
            } else {
                CostMode::Standard
            };
            let report = cost_report(&cfg.moe, &cfg.layout, &prof, mode)?;
            let id = config.file_stem().and_then(|s| s.to_str()).unwrap_or("config");
            emit(
                out.as_deref(),
                &format!("{PREDICTION_HEADER}\n{}\n", report.csv_row(id)),
            )
        }
        Command::Simulate {
            config,
            schedule,
            seed,
            out,
            corrupt_weights,
        } => simulate(&config, schedule, seed, out.as_deref(), corrupt_weights),
        Command::Verify { config, sizes, out } => {
            let cfg = load_config(&config)?;
            let sizes = parse_sizes(&sizes)?;
            let report = verify_inequalities(&cfg.cluster, &cfg.layout, &sizes)?;
            emit(out.as_deref(), &report.to_csv())?;
            if let Some(why) = &report.skipped {
                eprintln!("note: overlap_gain not checked: {why}");
            }
            let bad = report.violations();
            if bad > 0 {
                return Err(CheckFailed(format!("{bad} of {} inequality checks failed", report.rows.len())).into());
            }
            Ok(())
        }
        Command::Sweep { grid, profile, out } => {
            let grid = match grid {
                Some(p) => SweepGrid::load(&p).with_context(|| format!("loading grid {}", p.display()))?,
                None => SweepGrid::default(),
            };
            let prof =
                CostProfile::from_csv(&read(&profile)?).with_context(|| format!("parsing {}", profile.display()))?;
            let res = sweep(&grid, &prof)?;
            emit(out.as_deref(), &res.to_csv())?;
            let s = &res.summary;
            let summary = format!(
                "rows={} skipped={} mean_speedup={:.4} min_speedup={:.4} max_speedup={:.4} fraction_above_4x={:.4}\n",
                s.rows, s.skipped, s.mean_speedup, s.min_speedup, s.max_speedup, s.fraction_above_4
            );
            if out.is_some() {
                print!("{summary}");
            } else {
                eprint!("{summary}");
            }
            Ok(())
        }
        Command::Measure { config, sizes, out } => {
            let cfg = load_config(&config)?;
            let sizes = parse_sizes(&sizes)?;
            let timer = Timer::new(&cfg.layout, &cfg.cluster)?;
            let samples = measure_samples(&timer, &sizes)?;
            emit(out.as_deref(), &samples_to_csv(&samples))
        }
    }
}

fn simulate(
    config: &Path,
    schedule: ScheduleArg,
    seed: Option<u64>,
    out: Option<&Path>,
    corrupt: bool,
) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let kinds: Vec<ScheduleKind> = match schedule {
        ScheduleArg::Baseline => vec![ScheduleKind::Baseline],
        ScheduleArg::S1 => vec![ScheduleKind::S1],
        ScheduleArg::S2 => vec![ScheduleKind::S2],
        ScheduleArg::All => ScheduleKind::ALL.to_vec(),
    };
    let weights = ExpertWeights::random(&cfg.moe, seed);
    let inputs = random_inputs(&cfg.moe, &cfg.layout, seed.wrapping_add(1));
    let policy = CapacityPolicy::for_mp(&cfg.moe, cfg.layout.mp());
    let oracle = inputs
        .iter()
        .map(|x| reference_forward(&cfg.moe, &weights, x.view(), policy))
        .collect::<Result<Vec<_>, Error>>()?;

    let mut used = weights.clone();
    if corrupt {
        for w in &mut used.w1 {
            w.mapv_inplace(|v| v * 1.5 + 0.01);
        }
    }

    let mut text = String::from("schedule,max_rel_error,dropped_match,status\n");
    let mut traces = String::new();
    let mut failed = Vec::new();
    for kind in kinds {
        let run = run_schedule(kind, &cfg.moe, &cfg.layout, &used, &inputs)?;
        let err = run
            .outputs
            .iter()
            .enumerate()
            .map(|(r, y)| max_relative_error(y, &oracle[r / cfg.layout.mp()].output))
            .fold(0.0f64, f64::max);
        let dropped_ok = run.dropped.iter().zip(&oracle).all(|(d, o)| *d == o.dropped);
        let pass = err <= TOLERANCE && dropped_ok;
        if !pass {
            failed.push(kind.as_str());
        }
        writeln!(
            text,
            "{kind},{err:e},{dropped_ok},{}",
            if pass { "PASS" } else { "FAIL" }
        )?;
        writeln!(traces, "# trace {kind}: ffn_macs={}", run.ffn_macs)?;
        for rec in run.trace.records() {
            writeln!(traces, "#   {rec}")?;
        }
    }
    let timing = schedule_times_for(&cfg.moe, &cfg.layout, &cfg.cluster)?;
    writeln!(
        traces,
        "# simulated seconds: t_B={} t_D={} t_D1={} t_D2={}",
        timing.t_b, timing.t_d, timing.t_d1, timing.t_d2
    )?;
    text.push_str(&traces);
    emit(out, &text)?;
    if !failed.is_empty() {
        return Err(CheckFailed(format!(
            "schedule(s) {} differ from the reference beyond {TOLERANCE:e}",
            failed.join(", ")
        ))
        .into());
    }
    Ok(())
}
