//! Trace replay, ad-hoc queries, log statistics and the index benchmark.
//!
//! Output is line oriented so runs can be diffed byte for byte:
//! one `RECALL id=.. referent=.. score=..` line per resurfacing, then the
//! session statistics as a single JSON object.

pub mod bench;
pub mod trace;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::clock::Timestamp;
use crate::embed::{EmbeddingProvider, HashingEmbedder};
use crate::geo::GeoPoint;
use crate::recall::{proactive_step, LiveSource, RecallConfig};
use crate::store::{Event, MemoryBank, NewMemory, ResponseSource, SpatialActivityProfile, StoreError};

pub use trace::{parse_trace, TraceFrame};

/// Response stored when a live query has no canned answer and the fetch fails.
pub const UNAVAILABLE_RESPONSE: &str = "[live content unavailable]";
pub const UNTAGGED: &str = "untagged";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl SimError {
    /// Process exit code: 2 parse, 3 persistence, 4 missing bank, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Parse { .. } => 2,
            SimError::Store(StoreError::MissingBank(_)) => 4,
            SimError::Store(
                StoreError::PersistenceFailure(_)
                | StoreError::CorruptLog { .. }
                | StoreError::CorruptManifest(_)
                | StoreError::VersionMismatch { .. }
                | StoreError::DimensionMismatch { .. },
            ) => 3,
            SimError::Io(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UseCaseStats {
    pub queries: u64,
    pub recalls: u64,
}

/// Counts for one replay session.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SessionStats {
    pub frames: u64,
    pub queries: u64,
    pub recalls: u64,
    pub proactive_ratio: f64,
    pub per_use_case: BTreeMap<String, UseCaseStats>,
}

fn ratio(recalls: u64, queries: u64) -> f64 {
    if recalls + queries == 0 {
        0.0
    } else {
        recalls as f64 / (recalls + queries) as f64
    }
}

/// Counts folded from a bank's event log.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BankStats {
    pub memories: u64,
    pub live: u64,
    pub queries: u64,
    pub recalls: u64,
    pub refreshed_recalls: u64,
    pub updates: u64,
    pub interval_changes: u64,
    pub proactive_ratio: f64,
    pub dismissed: Vec<u64>,
    pub per_use_case: BTreeMap<String, UseCaseStats>,
}

pub fn bank_stats(events: &[Event]) -> BankStats {
    let mut s = BankStats::default();
    let mut tag_of: BTreeMap<u64, String> = BTreeMap::new();
    for ev in events {
        match ev {
            Event::Add { id, use_case, .. } => {
                s.memories += 1;
                s.queries += 1;
                let tag = use_case.clone().unwrap_or_else(|| UNTAGGED.to_string());
                s.per_use_case.entry(tag.clone()).or_default().queries += 1;
                tag_of.insert(*id, tag);
            }
            Event::Dismiss { id } => s.dismissed.push(*id),
            Event::Update { .. } => s.updates += 1,
            Event::Recall { id, refreshed, .. } => {
                s.recalls += 1;
                s.refreshed_recalls += u64::from(*refreshed);
                let tag = tag_of.get(id).cloned().unwrap_or_else(|| UNTAGGED.to_string());
                s.per_use_case.entry(tag).or_default().recalls += 1;
            }
            Event::SetInterval { .. } => s.interval_changes += 1,
        }
    }
    s.dismissed.sort_unstable();
    s.live = s.memories - s.dismissed.len() as u64;
    s.proactive_ratio = ratio(s.recalls, s.queries);
    s
}

/// Formats a logfmt value, quoting only when needed.
pub fn logfmt_value(s: &str) -> String {
    if !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '"' || c == '=') {
        s.to_string()
    } else {
        serde_json::to_string(s).expect("string serializes")
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub config: RecallConfig,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self { config: RecallConfig::default(), dim: crate::embed::DEFAULT_DIM, seed: 42 }
    }
}

/// Feeds `frames` through the bank in order: queries become memories, and
/// every frame is checked for proactive recalls.
pub fn replay_frames(
    frames: &[TraceFrame],
    bank: &mut MemoryBank,
    cfg: &RecallConfig,
    live: &dyn LiveSource,
    out: &mut dyn Write,
) -> Result<SessionStats, SimError> {
    cfg.validate()?;
    let mut stats = SessionStats::default();
    for frame in frames {
        stats.frames += 1;
        let obs = &frame.observation;
        if let Some(q) = &frame.query {
            let response = match (&q.response, &q.source) {
                (Some(r), _) => r.clone(),
                (None, ResponseSource::LiveFeed(url)) => {
                    live.fetch(url, &q.text).unwrap_or_else(|_| UNAVAILABLE_RESPONSE.to_string())
                }
                (None, ResponseSource::StaticKnowledge) => UNAVAILABLE_RESPONSE.to_string(),
            };
            let profile = SpatialActivityProfile::build(
                obs.geo,
                obs.ts,
                obs.scene_text.clone(),
                obs.activity_text.clone(),
                bank.provider(),
            )
            .map_err(|e| SimError::Parse { line: frame.line, reason: e.to_string() })?;
            let mut mem = NewMemory::new(q.referent.clone(), q.text.clone(), response, q.source.clone(), profile)
                .interval_days(cfg.default_interval_days);
            if let Some(tag) = &frame.use_case {
                mem = mem.use_case(tag.clone());
            }
            bank.add_memory(mem)?;
            stats.queries += 1;
            let tag = frame.use_case.clone().unwrap_or_else(|| UNTAGGED.to_string());
            stats.per_use_case.entry(tag).or_default().queries += 1;
        }
        for ev in proactive_step(bank, obs, cfg, live)? {
            let m = bank.get(ev.rsam_id).expect("recalled memory exists");
            writeln!(
                out,
                "RECALL id={} referent={} score={:.4}",
                ev.rsam_id,
                logfmt_value(&m.referent_label),
                ev.scores.combined
            )?;
            stats.recalls += 1;
            let tag = m.use_case.clone().unwrap_or_else(|| UNTAGGED.to_string());
            stats.per_use_case.entry(tag).or_default().recalls += 1;
        }
    }
    stats.proactive_ratio = ratio(stats.recalls, stats.queries);
    Ok(stats)
}

/// Replays the trace file into the bank directory (created if absent) and
/// writes the recall stream plus final statistics to `out`.
pub fn cmd_replay(
    trace_path: &Path,
    bank_dir: &Path,
    opts: &ReplayOptions,
    live: &dyn LiveSource,
    out: &mut dyn Write,
) -> Result<SessionStats, SimError> {
    opts.config.validate()?;
    let file = File::open(trace_path)
        .map_err(|e| SimError::Parse { line: 0, reason: format!("{}: {e}", trace_path.display()) })?;
    let frames = parse_trace(BufReader::new(file))?;
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(opts.dim));
    let mut bank = MemoryBank::open_or_create(bank_dir, provider, opts.seed)?;
    let stats = replay_frames(&frames, &mut bank, &opts.config, live, out)?;
    bank.save(bank_dir)?;
    writeln!(out, "{}", serde_json::to_string(&stats).expect("stats serialize"))?;
    Ok(stats)
}

/// Arguments for [`cmd_query`].
#[derive(Debug, Clone)]
pub struct QueryArgs {
    pub lat: f64,
    pub lon: f64,
    pub acc_m: f64,
    pub epoch_s: i64,
    pub tz_min: i32,
    pub scene: String,
    pub activity: String,
    pub k: usize,
    pub radius_m: Option<f64>,
    pub tod_window_s: u32,
}

pub fn open_bank(bank_dir: &Path, dim: usize) -> Result<MemoryBank, SimError> {
    if !bank_dir.join(crate::store::MANIFEST_FILE).exists() {
        return Err(StoreError::MissingBank(bank_dir.to_path_buf()).into());
    }
    Ok(MemoryBank::load(bank_dir, Arc::new(HashingEmbedder::new(dim)))?)
}

/// Prints ranked matches for a context, or `no matches`.
pub fn cmd_query(bank: &MemoryBank, args: &QueryArgs, out: &mut dyn Write) -> Result<usize, SimError> {
    let geo = GeoPoint::new(args.lat, args.lon, args.acc_m).map_err(StoreError::from)?;
    let ts = Timestamp::new(args.epoch_s, args.tz_min).map_err(StoreError::from)?;
    let profile = SpatialActivityProfile::build(geo, ts, args.scene.clone(), args.activity.clone(), bank.provider())?;
    let radius = args.radius_m.unwrap_or_else(|| (2.0 * args.acc_m).max(crate::recall::MIN_RADIUS_M));
    let rows = bank.candidate_retrieve(&profile, args.k, radius, args.tod_window_s)?;
    if rows.is_empty() {
        writeln!(out, "no matches")?;
    }
    for (rank, (m, d)) in rows.iter().enumerate() {
        writeln!(out, "{} id={} referent={} distance={:.6}", rank + 1, m.id, logfmt_value(&m.referent_label), d)?;
    }
    Ok(rows.len())
}

pub fn cmd_stats(bank: &MemoryBank, out: &mut dyn Write) -> Result<BankStats, SimError> {
    let stats = bank_stats(bank.events());
    writeln!(out, "{}", serde_json::to_string(&stats).expect("stats serialize"))?;
    Ok(stats)
}
