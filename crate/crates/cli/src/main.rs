//! `ckplan`: command-line front end for the checkpoint-interval planner.
//!
//! Subcommands wire failure traces, application profiles and rescheduling
//! policies into the analytic model, the interval search and the trace-driven
//! simulator. All randomness sits behind `--seed` (default 42, echoed in
//! output metadata), so every artifact is reproducible bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use ckplan_core::chain::{
    build_chain, eliminate_states, stationary, threshold_score, uwt, DeltaPolicy,
};
use ckplan_core::policy::{build_rp, PolicyKind, RpVector};
use ckplan_core::profile::{load_profile, AppProfile};
use ckplan_core::search::{recommend_interval, sweep_csv, Recommendation, SearchOptions};
use ckplan_core::sim::{model_efficiency, simulate, timeline_csv};
use ckplan_core::trace::{
    estimate_rates, parse_trace, sample_segment, serialize_trace, synth_trace,
    ExecutionSegment, FailureTrace,
};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(
    name = "ckplan",
    version,
    about = "Checkpoint-interval planning for malleable applications on failure-prone clusters"
)]
struct Cli {
    /// Size of the worker thread pool (default: all cores). Outputs are
    /// independent of this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate per-processor failure/repair rates from trace history
    Rates {
        /// Failure trace CSV
        #[arg(long)]
        trace: PathBuf,
        /// Use only history before this time (seconds)
        #[arg(long, value_name = "SECONDS")]
        at: f64,
        /// Output path (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic exponential failure trace
    SynthTrace {
        /// Number of processors
        #[arg(long)]
        n: usize,
        /// Per-processor failure rate (1/seconds)
        #[arg(long)]
        lambda: f64,
        /// Per-processor repair rate (1/seconds)
        #[arg(long)]
        theta: f64,
        /// Trace length (seconds)
        #[arg(long, value_name = "SECONDS")]
        horizon: f64,
        /// RNG seed
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Output path (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a rescheduling policy vector
    Policy {
        /// Policy kind: greedy, pb or ab
        #[arg(long)]
        kind: String,
        /// Number of processors the policy covers
        #[arg(long)]
        n: usize,
        /// Application profile JSON (required for pb)
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Failure trace CSV (required for ab)
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Subset-sampling trials for ab
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// RNG seed
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Output path (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recommend a checkpoint interval from the analytic model
    Recommend {
        #[command(flatten)]
        rates: RateSource,
        #[command(flatten)]
        model: ModelInputs,
        #[command(flatten)]
        search: SearchFlags,
        /// Output path for the recommendation JSON; the sweep CSV lands next
        /// to it as `<out>.sweep.csv` (default: JSON to stdout, no CSV)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay one execution segment against a trace
    Simulate {
        /// Failure trace CSV
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        model: ModelInputs,
        /// Checkpoint interval (seconds)
        #[arg(long, value_name = "SECONDS")]
        interval: f64,
        /// Segment start (seconds)
        #[arg(long, value_name = "SECONDS")]
        start: f64,
        /// Segment duration (seconds)
        #[arg(long, value_name = "SECONDS")]
        dur: f64,
        /// Output path for the report JSON; the timeline CSV lands next to it
        /// as `<out>.timeline.csv` (default: JSON to stdout, no CSV)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Model efficiency over random execution segments
    Efficiency {
        /// Failure trace CSV
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        model: ModelInputs,
        /// Number of random segments
        #[arg(long)]
        segments: usize,
        /// Minimum segment duration (seconds)
        #[arg(long, value_name = "SECONDS")]
        dur_min: f64,
        /// Maximum segment duration (seconds)
        #[arg(long, value_name = "SECONDS")]
        dur_max: f64,
        /// Fixed failure rate (1/seconds); default: estimated per segment
        /// from history before the segment start
        #[arg(long)]
        lambda: Option<f64>,
        /// Fixed repair rate (1/seconds); default: estimated per segment
        #[arg(long)]
        theta: Option<f64>,
        /// Candidate intervals, comma-separated seconds (default: each
        /// segment's model sweep)
        #[arg(long, value_name = "S,S,...")]
        grid: Option<String>,
        /// RNG seed for segment placement
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[command(flatten)]
        search: SearchFlags,
        /// Output path (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a grid of elimination thresholds at one interval
    CalibrateThres {
        #[command(flatten)]
        rates: RateSource,
        #[command(flatten)]
        model: ModelInputs,
        /// Checkpoint interval to evaluate at (seconds)
        #[arg(long, value_name = "SECONDS")]
        interval: f64,
        /// Thresholds to score, comma-separated (default: a decade sweep
        /// around 0.0006)
        #[arg(long, value_name = "T,T,...")]
        grid: Option<String>,
        /// Recovery-cost representative: mean_in or max_in
        #[arg(long, default_value = "mean_in")]
        delta_policy: String,
        /// Output path (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure/repair rates, either explicit or estimated from a trace.
#[derive(Args)]
struct RateSource {
    /// Failure trace CSV to estimate rates from (with --at)
    #[arg(long, conflicts_with_all = ["lambda", "theta"])]
    trace: Option<PathBuf>,
    /// Use only trace history before this time (seconds)
    #[arg(long, value_name = "SECONDS", requires = "trace")]
    at: Option<f64>,
    /// Explicit per-processor failure rate (1/seconds)
    #[arg(long, requires = "theta")]
    lambda: Option<f64>,
    /// Explicit per-processor repair rate (1/seconds)
    #[arg(long, requires = "lambda")]
    theta: Option<f64>,
}

/// The application profile and rescheduling policy every model run needs.
#[derive(Args)]
struct ModelInputs {
    /// Application profile JSON
    #[arg(long)]
    profile: PathBuf,
    /// Rescheduling policy vector JSON
    #[arg(long)]
    rp: PathBuf,
}

#[derive(Args)]
struct SearchFlags {
    /// Smallest interval probed (seconds)
    #[arg(long, value_name = "SECONDS", default_value_t = 300.0)]
    i_min: f64,
    /// State-elimination threshold
    #[arg(long, default_value_t = 0.0006)]
    thres: f64,
    /// Near-optimal band width as a fraction of the best UWT
    #[arg(long, default_value_t = 0.08)]
    band_pct: f64,
    /// Recovery-cost representative: mean_in or max_in
    #[arg(long, default_value = "mean_in")]
    delta_policy: String,
}

impl SearchFlags {
    fn options(&self) -> Result<SearchOptions, ckplan_core::Error> {
        Ok(SearchOptions {
            i_min: self.i_min,
            thres: self.thres,
            band_pct: self.band_pct,
            delta_policy: DeltaPolicy::from_str(&self.delta_policy)?,
            ..Default::default()
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
        {
            eprintln!("{}", json!({ "error": e.to_string() }));
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<(), ckplan_core::Error> {
    match cmd {
        Command::Rates { trace, at, out } => {
            let trace = load_trace(&trace)?;
            let rates = estimate_rates(&trace, at)?;
            emit(out.as_deref(), &pretty(&serde_json::to_value(rates)?))
        }
        Command::SynthTrace { n, lambda, theta, horizon, seed, out } => {
            if n == 0 || !(lambda > 0.0) || !(theta > 0.0) || !(horizon > 0.0) {
                return Err(ckplan_core::Error::InvalidArg(
                    "n, lambda, theta and horizon must be positive".into(),
                ));
            }
            let trace = synth_trace(n, lambda, theta, horizon, seed);
            emit(out.as_deref(), &serialize_trace(&trace))
        }
        Command::Policy { kind, n, profile, trace, trials, seed, out } => {
            let kind = PolicyKind::from_str(&kind)?;
            let profile = profile.map(|p| load_profile_file(&p)).transpose()?;
            let trace = trace.map(|p| load_trace(&p)).transpose()?;
            let rp = build_rp(kind, n, profile.as_ref(), trace.as_ref(), trials, seed)?;
            emit(out.as_deref(), &pretty(&serde_json::to_value(&rp)?))
        }
        Command::Recommend { rates, model, search, out } => {
            let (lambda, theta) = rates.resolve()?;
            let (profile, rp) = model.load()?;
            let opts = search.options()?;
            let rec = recommend_interval(rp.n, &rp, &profile, lambda, theta, &opts)?;
            let doc = recommendation_json(&rec, rp.n, lambda, theta, &opts);
            emit(out.as_deref(), &pretty(&doc))?;
            if let Some(out) = &out {
                fs::write(sibling(out, "sweep.csv"), sweep_csv(&rec))
                    .map_err(io_err)?;
            }
            Ok(())
        }
        Command::Simulate { trace, model, interval, start, dur, out } => {
            let trace = load_trace(&trace)?;
            let (profile, rp) = model.load()?;
            let report =
                simulate(&trace, ExecutionSegment { start, dur }, &profile, &rp, interval)?;
            emit(out.as_deref(), &pretty(&serde_json::to_value(&report)?))?;
            if let Some(out) = &out {
                fs::write(sibling(out, "timeline.csv"), timeline_csv(&report))
                    .map_err(io_err)?;
            }
            Ok(())
        }
        Command::Efficiency {
            trace,
            model,
            segments,
            dur_min,
            dur_max,
            lambda,
            theta,
            grid,
            seed,
            search,
            out,
        } => {
            let trace = load_trace(&trace)?;
            let (profile, rp) = model.load()?;
            let opts = search.options()?;
            let grid = grid.map(|g| parse_grid(&g)).transpose()?;
            let doc = efficiency_run(
                &trace, &profile, &rp, segments, dur_min, dur_max, lambda, theta,
                grid.as_deref(), seed, &opts,
            )?;
            emit(out.as_deref(), &pretty(&doc))
        }
        Command::CalibrateThres { rates, model, interval, grid, delta_policy, out } => {
            let (lambda, theta) = rates.resolve()?;
            let (profile, rp) = model.load()?;
            let delta_policy = DeltaPolicy::from_str(&delta_policy)?;
            let grid = match grid {
                Some(g) => parse_grid(&g)?,
                None => vec![0.0001, 0.0002, 0.0004, 0.0006, 0.001, 0.002, 0.005, 0.01],
            };
            let csv =
                calibrate(&profile, &rp, lambda, theta, interval, &grid, delta_policy)?;
            emit(out.as_deref(), &csv)
        }
    }
}

impl RateSource {
    fn resolve(&self) -> Result<(f64, f64), ckplan_core::Error> {
        match (&self.trace, self.lambda, self.theta) {
            (Some(path), None, None) => {
                let trace = load_trace(path)?;
                let at = self.at.unwrap_or(trace.horizon);
                let r = estimate_rates(&trace, at)?;
                Ok((r.lambda, r.theta))
            }
            (None, Some(lambda), Some(theta)) if lambda > 0.0 && theta > 0.0 => {
                Ok((lambda, theta))
            }
            (None, Some(_), Some(_)) => Err(ckplan_core::Error::InvalidArg(
                "lambda and theta must be positive".into(),
            )),
            _ => Err(ckplan_core::Error::InvalidArg(
                "provide either --trace (with optional --at) or both --lambda and --theta"
                    .into(),
            )),
        }
    }
}

impl ModelInputs {
    fn load(&self) -> Result<(AppProfile, RpVector), ckplan_core::Error> {
        let profile = load_profile_file(&self.profile)?;
        let rp: RpVector =
            serde_json::from_str(&fs::read_to_string(&self.rp).map_err(io_err)?)?;
        rp.validate()?;
        if profile.n_max < rp.n {
            return Err(ckplan_core::Error::InvalidArg(format!(
                "profile covers {} processors, rp needs {}",
                profile.n_max, rp.n
            )));
        }
        Ok((profile, rp))
    }
}

/// Recommendation wire format: interval plus (interval, uwt) pair lists.
fn recommendation_json(
    rec: &Recommendation,
    n: usize,
    lambda: f64,
    theta: f64,
    opts: &SearchOptions,
) -> serde_json::Value {
    let pairs = |points: &[ckplan_core::search::SweepPoint]| -> Vec<[f64; 2]> {
        points.iter().map(|p| [p.interval, p.uwt]).collect()
    };
    json!({
        "i_model_s": rec.i_model,
        "band": pairs(&rec.band),
        "sweep": pairs(&rec.sweep),
        "meta": {
            "n": n,
            "lambda": lambda,
            "theta": theta,
            "i_min_s": opts.i_min,
            "thres": rec.thres_used,
            "band_pct": opts.band_pct,
            "delta_policy": rec.delta_policy.to_string(),
            "elims": rec.elims,
            "capped": rec.capped,
            "seed": DEFAULT_SEED,
        },
    })
}

/// Samples segments, recommends per segment from history-local rates, and
/// scores the recommendation against the per-segment empirical best.
#[allow(clippy::too_many_arguments)]
fn efficiency_run(
    trace: &FailureTrace,
    profile: &AppProfile,
    rp: &RpVector,
    segments: usize,
    dur_min: f64,
    dur_max: f64,
    lambda: Option<f64>,
    theta: Option<f64>,
    grid: Option<&[f64]>,
    seed: u64,
    opts: &SearchOptions,
) -> Result<serde_json::Value, ckplan_core::Error> {
    if segments == 0 {
        return Err(ckplan_core::Error::InvalidArg("segments must be >= 1".into()));
    }
    if !(0.0 < dur_min && dur_min <= dur_max && dur_max <= trace.horizon) {
        return Err(ckplan_core::Error::InvalidArg(
            "need 0 < dur-min <= dur-max <= horizon".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_segment = Vec::with_capacity(segments);
    let mut pds = Vec::with_capacity(segments);
    for _ in 0..segments {
        let segment = sample_segment(trace, dur_min, dur_max, &mut rng);
        // rates from history before the segment starts, like an online user
        // would have them; whole-trace rates when the prefix is still empty
        let (l, t) = match (lambda, theta) {
            (Some(l), Some(t)) => (l, t),
            _ => {
                let r = estimate_rates(trace, segment.start)
                    .or_else(|_| estimate_rates(trace, trace.horizon))?;
                (r.lambda, r.theta)
            }
        };
        let rec = recommend_interval(rp.n, rp, profile, l, t, opts)?;
        let candidates: Vec<f64> = match grid {
            Some(g) => g.to_vec(),
            None => rec.sweep.iter().map(|p| p.interval).collect(),
        };
        let report =
            model_efficiency(trace, &[segment], profile, rp, &rec, &candidates)?;
        let s = report.per_segment[0];
        pds.push(s.pd);
        per_segment.push(json!({
            "start_s": segment.start,
            "dur_s": segment.dur,
            "lambda": l,
            "theta": t,
            "i_model_s": rec.i_model,
            "i_sim_s": s.i_sim,
            "uw_model": s.uw_model,
            "uw_highest": s.uw_highest,
            "pd": s.pd,
            "efficiency": s.efficiency,
        }));
    }
    let mean_pd = pds.iter().sum::<f64>() / pds.len() as f64;
    Ok(json!({
        "per_segment": per_segment,
        "mean_pd": mean_pd,
        "min_pd": pds.iter().copied().fold(f64::INFINITY, f64::min),
        "max_pd": pds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "mean_efficiency": 100.0 - mean_pd,
        "meta": {
            "n": rp.n,
            "segments": segments,
            "dur_min_s": dur_min,
            "dur_max_s": dur_max,
            "i_min_s": opts.i_min,
            "thres": opts.thres,
            "band_pct": opts.band_pct,
            "delta_policy": opts.delta_policy.to_string(),
            "seed": seed,
        },
    }))
}

/// Threshold-calibration table with the documented score weights.
fn calibrate(
    profile: &AppProfile,
    rp: &RpVector,
    lambda: f64,
    theta: f64,
    interval: f64,
    grid: &[f64],
    delta_policy: DeltaPolicy,
) -> Result<String, ckplan_core::Error> {
    const ALPHA: f64 = 0.7;
    const BETA: f64 = 0.3;
    let full = build_chain(rp.n, rp, profile, lambda, theta, interval, delta_policy)?;
    let full_uwt = uwt(&full, &stationary(&full)?)?;
    let up_count = full.space.up_count();
    let mut thresholds = grid.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = String::from("thres,threserror,elims_fraction,score\n");
    for &thres in &thresholds {
        let reduced = eliminate_states(&full, thres)?;
        let reduced_uwt = uwt(&reduced, &stationary(&reduced)?)?;
        let threserror = (full_uwt - reduced_uwt).abs() / full_uwt;
        let score = threshold_score(
            full_uwt, reduced_uwt, reduced.elims, up_count, ALPHA, BETA,
        )?;
        out.push_str(&format!(
            "{},{},{},{}\n",
            thres,
            threserror,
            reduced.elims as f64 / up_count as f64,
            score
        ));
    }
    Ok(out)
}

fn load_trace(path: &Path) -> Result<FailureTrace, ckplan_core::Error> {
    parse_trace(&fs::read_to_string(path).map_err(io_err)?)
}

fn load_profile_file(path: &Path) -> Result<AppProfile, ckplan_core::Error> {
    load_profile(&fs::read_to_string(path).map_err(io_err)?)
}

fn parse_grid(s: &str) -> Result<Vec<f64>, ckplan_core::Error> {
    s.split(',')
        .map(|p| {
            p.trim().parse::<f64>().map_err(|e| {
                ckplan_core::Error::InvalidArg(format!("bad grid entry `{p}`: {e}"))
            })
        })
        .collect()
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// `out.json` -> `out.json.<suffix>`: companion artifact next to the main one.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

fn emit(out: Option<&Path>, content: &str) -> Result<(), ckplan_core::Error> {
    match out {
        Some(path) => fs::write(path, content).map_err(io_err),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn io_err(e: std::io::Error) -> ckplan_core::Error {
    ckplan_core::Error::InvalidArg(e.to_string())
}
