use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rsam_core::clock::Timestamp;
use rsam_core::embed::DEFAULT_DIM;
use rsam_core::recall::{
    FixtureLiveSource, HttpLiveSource, LiveSource, MapLiveSource, RecallConfig, DEFAULT_TOD_WINDOW_S,
};
use rsam_core::sim::bench::{run_bench, BenchConfig};
use rsam_core::sim::{cmd_query, cmd_replay, cmd_stats, open_bank, QueryArgs, ReplayOptions, SimError};

#[derive(Parser)]
#[command(name = "rsam", version, about = "Proactive spatiotemporal memory recall simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a JSONL trace into a bank, printing recalls and session stats.
    Replay {
        trace: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[command(flatten)]
        recall: RecallArgs,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Fetch live responses over HTTP.
        #[arg(long, conflicts_with = "fixtures")]
        live: bool,
        /// Serve live responses from `<dir>/<hash>.txt` files.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Rank the memories matching a context.
    Query {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        #[arg(long, default_value_t = 10.0)]
        acc_m: f64,
        /// Unix seconds; defaults to now.
        #[arg(long)]
        ts: Option<i64>,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        tz_min: i32,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        activity: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        radius_m: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_TOD_WINDOW_S)]
        tod_window_s: u32,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
    },
    /// Benchmark hybrid retrieval against a brute-force scan.
    Bench {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 150.0)]
        radius_m: f64,
        #[arg(long, default_value_t = DEFAULT_TOD_WINDOW_S)]
        tod_window_s: u32,
        /// Print only the deterministic part of the report.
        #[arg(long)]
        no_timing: bool,
    },
    /// Print statistics folded from a bank's event log.
    Stats {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
    },
    /// Stop a memory from ever resurfacing.
    Dismiss {
        #[arg(long)]
        bank: PathBuf,
        id: u64,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
    },
    /// Change how often a memory may resurface.
    SetInterval {
        #[arg(long)]
        bank: PathBuf,
        id: u64,
        days: f64,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
    },
}

#[derive(Args)]
struct RecallArgs {
    /// Fixed retrieval radius; by default twice the GPS accuracy, at least 50 m.
    #[arg(long)]
    radius_m: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TOD_WINDOW_S)]
    tod_window_s: u32,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0.8)]
    semantic_threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    interval_days: f64,
}

impl RecallArgs {
    fn config(&self) -> RecallConfig {
        RecallConfig {
            radius_m: self.radius_m,
            tod_window_s: self.tod_window_s,
            k: self.k,
            semantic_threshold: self.semantic_threshold,
            default_interval_days: self.interval_days,
            ..RecallConfig::default()
        }
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), SimError> {
    match cli.command {
        Command::Replay { trace, bank, recall, dim, seed, live, fixtures } => {
            let source: Box<dyn LiveSource> = match (live, fixtures) {
                (true, _) => Box::new(HttpLiveSource::new()),
                (false, Some(dir)) => Box::new(FixtureLiveSource::new(dir)),
                (false, None) => Box::new(MapLiveSource::new()),
            };
            let opts = ReplayOptions { config: recall.config(), dim, seed };
            cmd_replay(&trace, &bank, &opts, source.as_ref(), out)?;
        }
        Command::Query { bank, lat, lon, acc_m, ts, tz_min, scene, activity, k, radius_m, tod_window_s, dim } => {
            let bank = open_bank(&bank, dim)?;
            let epoch_s = ts.unwrap_or_else(|| now_utc().epoch_s());
            let args = QueryArgs { lat, lon, acc_m, epoch_s, tz_min, scene, activity, k, radius_m, tod_window_s };
            cmd_query(&bank, &args, out)?;
        }
        Command::Bench { n, dim, seed, queries, k, radius_m, tod_window_s, no_timing } => {
            let cfg = BenchConfig { n, dim, seed, queries, k, radius_m, tod_window_s, ..BenchConfig::default() };
            let report = run_bench(&cfg)?;
            write!(out, "{}", report.render(!no_timing))?;
        }
        Command::Stats { bank, dim } => {
            cmd_stats(&open_bank(&bank, dim)?, out)?;
        }
        Command::Dismiss { bank, id, dim } => {
            open_bank(&bank, dim)?.dismiss(id)?;
            writeln!(out, "dismissed id={id}")?;
        }
        Command::SetInterval { bank, id, days, dim } => {
            open_bank(&bank, dim)?.set_interval(id, days)?;
            writeln!(out, "interval id={id} days={days}")?;
        }
    }
    Ok(())
}

fn now_utc() -> Timestamp {
    let secs =
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0);
    Timestamp::utc(secs)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
