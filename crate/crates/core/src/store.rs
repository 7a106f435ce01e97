//! The memory bank: RSAM records, the hybrid R-tree + HNSW index, and the
//! append-only event log that is the bank's single source of truth.
//!
//! On disk a bank is a directory holding `bank.manifest` (key=value lines)
//! and `bank.log` (one JSON event per line). Embeddings are never written;
//! loading replays the log and re-embeds every profile with the supplied
//! provider, so provider determinism is part of the format.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{circular_diff_s, TimeOfDay, Timestamp, HALF_DAY_S, SECONDS_PER_DAY};
use crate::embed::{cosine_distance, EmbedError, Embedding, EmbeddingProvider};
use crate::geo::{bounding_half_widths, haversine_m, GeoPoint};
use crate::hnsw::{HnswError, HnswIndex, HnswParams};
use crate::rtree::{RTreeError, RTreeIndex, SpatioTemporalKey, StBox};
use crate::ValueError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "bank.manifest";
pub const LOG_FILE: &str = "bank.log";

/// Candidate sets at or below this size are ranked exactly instead of via HNSW.
pub const EXACT_RANK_CUTOFF: usize = 256;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown memory id {0}")]
    UnknownId(u64),
    #[error("memory {0} is already dismissed")]
    AlreadyDismissed(u64),
    #[error("memory {0} is dismissed")]
    Dismissed(u64),
    #[error("recall interval must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("{0} must not be empty")]
    EmptyText(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("index failure: {0}")]
    IndexFailure(String),
    #[error("persistence failure: {0}")]
    PersistenceFailure(#[from] std::io::Error),
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("unsupported bank format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("bank dimension {bank} does not match provider dimension {provider}")]
    DimensionMismatch { bank: usize, provider: usize },
    #[error("no bank at {0}")]
    MissingBank(PathBuf),
}

impl From<RTreeError> for StoreError {
    fn from(e: RTreeError) -> Self {
        StoreError::IndexFailure(e.to_string())
    }
}

impl From<HnswError> for StoreError {
    fn from(e: HnswError) -> Self {
        StoreError::IndexFailure(e.to_string())
    }
}

/// Where a memory's response came from. Live sources are re-fetched on recall.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseSource {
    StaticKnowledge,
    LiveFeed(String),
}

impl fmt::Display for ResponseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResponseSource::StaticKnowledge => f.write_str("static"),
            ResponseSource::LiveFeed(url) => write!(f, "live:{url}"),
        }
    }
}

impl std::str::FromStr for ResponseSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(ResponseSource::StaticKnowledge),
            _ => match s.strip_prefix("live:") {
                Some(url) if !url.is_empty() => Ok(ResponseSource::LiveFeed(url.to_string())),
                _ => Err(format!("unknown response source {s:?}")),
            },
        }
    }
}

/// The user's context at one moment: place, time, scene and activity, plus
/// the embedding of `scene | activity`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialActivityProfile {
    pub geo: GeoPoint,
    pub ts: Timestamp,
    pub scene_text: String,
    pub activity_text: String,
    pub descriptor: Embedding,
}

impl SpatialActivityProfile {
    pub fn descriptor_text(scene: &str, activity: &str) -> String {
        format!("{scene} | {activity}")
    }

    pub fn build(
        geo: GeoPoint,
        ts: Timestamp,
        scene_text: impl Into<String>,
        activity_text: impl Into<String>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, StoreError> {
        let (scene_text, activity_text) = (scene_text.into(), activity_text.into());
        check_text("scene text", &scene_text)?;
        check_text("activity text", &activity_text)?;
        let descriptor = provider.embed(&Self::descriptor_text(&scene_text, &activity_text))?;
        Ok(Self { geo, ts, scene_text, activity_text, descriptor })
    }

    /// Uses an externally computed descriptor. Banks built this way are not
    /// reproducible from their log unless the provider would return the same
    /// vector for the texts.
    pub fn with_descriptor(
        geo: GeoPoint,
        ts: Timestamp,
        scene_text: impl Into<String>,
        activity_text: impl Into<String>,
        descriptor: Embedding,
    ) -> Result<Self, StoreError> {
        let (scene_text, activity_text) = (scene_text.into(), activity_text.into());
        check_text("scene text", &scene_text)?;
        check_text("activity text", &activity_text)?;
        Ok(Self { geo, ts, scene_text, activity_text, descriptor })
    }

    pub fn time_of_day(&self) -> TimeOfDay {
        self.ts.time_of_day()
    }
}

fn check_text(field: &'static str, s: &str) -> Result<(), StoreError> {
    if s.trim().is_empty() {
        Err(StoreError::EmptyText(field))
    } else {
        Ok(())
    }
}

/// A referent-anchored spatiotemporal activity memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rsam {
    pub id: u64,
    pub referent_label: String,
    pub query_text: String,
    pub response_text: String,
    pub response_source: ResponseSource,
    pub profile: SpatialActivityProfile,
    pub created_at: Timestamp,
    pub last_recalled_at: Option<Timestamp>,
    pub recall_interval_days: f64,
    pub dismissed: bool,
    pub use_case: Option<String>,
}

/// Input for [`MemoryBank::add_memory`].
#[derive(Debug, Clone)]
pub struct NewMemory {
    pub referent_label: String,
    pub query_text: String,
    pub response_text: String,
    pub response_source: ResponseSource,
    pub profile: SpatialActivityProfile,
    pub interval_days: Option<f64>,
    pub use_case: Option<String>,
}

impl NewMemory {
    pub fn new(
        referent_label: impl Into<String>,
        query_text: impl Into<String>,
        response_text: impl Into<String>,
        response_source: ResponseSource,
        profile: SpatialActivityProfile,
    ) -> Self {
        Self {
            referent_label: referent_label.into(),
            query_text: query_text.into(),
            response_text: response_text.into(),
            response_source,
            profile,
            interval_days: None,
            use_case: None,
        }
    }

    pub fn interval_days(mut self, days: f64) -> Self {
        self.interval_days = Some(days);
        self
    }

    pub fn use_case(mut self, tag: impl Into<String>) -> Self {
        self.use_case = Some(tag.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub lat: f64,
    pub lon: f64,
    pub acc_m: f64,
    pub epoch_s: i64,
    pub tz_min: i32,
    pub scene: String,
    pub activity: String,
}

impl From<&SpatialActivityProfile> for ProfileRecord {
    fn from(p: &SpatialActivityProfile) -> Self {
        Self {
            lat: p.geo.lat(),
            lon: p.geo.lon(),
            acc_m: p.geo.accuracy_m(),
            epoch_s: p.ts.epoch_s(),
            tz_min: p.ts.tz_offset_min(),
            scene: p.scene_text.clone(),
            activity: p.activity_text.clone(),
        }
    }
}

/// One line of `bank.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Event {
    Add {
        id: u64,
        referent: String,
        query: String,
        response: String,
        source: String,
        profile: ProfileRecord,
        interval_days: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        use_case: Option<String>,
    },
    Dismiss {
        id: u64,
    },
    Update {
        id: u64,
        response: String,
    },
    Recall {
        id: u64,
        epoch_s: i64,
        tz_min: i32,
        score: f64,
        refreshed: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        response: Option<String>,
    },
    SetInterval {
        id: u64,
        days: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankManifest {
    pub version: u32,
    pub dim: usize,
    pub hnsw_seed: u64,
    pub created: String,
}

impl BankManifest {
    fn render(&self) -> String {
        format!("version={}\ndim={}\nhnsw_seed={}\ncreated={}\n", self.version, self.dim, self.hnsw_seed, self.created)
    }

    fn parse(text: &str) -> Result<Self, StoreError> {
        let mut fields = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| StoreError::CorruptManifest(format!("expected key=value, got {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| StoreError::CorruptManifest(format!("missing {k}")));
        let bad = |k: &str| StoreError::CorruptManifest(format!("bad {k}"));
        let version: u32 = get("version")?.parse().map_err(|_| bad("version"))?;
        if version != FORMAT_VERSION {
            return Err(StoreError::VersionMismatch { found: version });
        }
        Ok(Self {
            version,
            dim: get("dim")?.parse().map_err(|_| bad("dim"))?,
            hnsw_seed: get("hnsw_seed")?.parse().map_err(|_| bad("hnsw_seed"))?,
            created: get("created")?.to_string(),
        })
    }
}

/// Parameters for hybrid retrieval around a context.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalQuery<'a> {
    pub geo: &'a GeoPoint,
    pub tod: TimeOfDay,
    pub descriptor: &'a Embedding,
    pub k: usize,
    pub radius_m: f64,
    pub tod_window_s: u32,
}

impl RetrievalQuery<'_> {
    fn validate(&self) -> Result<(), StoreError> {
        if self.k == 0 {
            return Err(StoreError::InvalidArgument("k must be positive".into()));
        }
        if !(self.radius_m > 0.0) || !self.radius_m.is_finite() {
            return Err(StoreError::InvalidArgument(format!("radius {} must be positive", self.radius_m)));
        }
        if self.tod_window_s == 0 || i64::from(self.tod_window_s) > HALF_DAY_S {
            return Err(StoreError::InvalidArgument(format!("time window {} outside (0, 43200]", self.tod_window_s)));
        }
        Ok(())
    }

    /// Coarse box around the query; a superset of the haversine disk.
    pub fn coarse_box(&self) -> StBox {
        let (dlat, dlon) = bounding_half_widths(self.geo, self.radius_m);
        let (lat_lo, lat_hi) = ((self.geo.lat() - dlat).max(-90.0), (self.geo.lat() + dlat).min(90.0));
        // near the poles every longitude is within reach
        let (lon_lo, lon_hi) = if dlon >= 180.0 || lat_lo <= -90.0 || lat_hi >= 90.0 {
            (-180.0, 180.0)
        } else {
            ((self.geo.lon() - dlon).max(-180.0), (self.geo.lon() + dlon).min(180.0))
        };
        let t = i64::from(self.tod.seconds());
        let w = i64::from(self.tod_window_s);
        let (tod_lo, tod_hi) = if 2 * w >= SECONDS_PER_DAY {
            (0.0, (SECONDS_PER_DAY - 1) as f64)
        } else {
            ((t - w).rem_euclid(SECONDS_PER_DAY) as f64, (t + w).rem_euclid(SECONDS_PER_DAY) as f64)
        };
        StBox { lat_lo, lat_hi, lon_lo, lon_hi, tod_lo, tod_hi }
    }

    /// Exact spatiotemporal membership test.
    pub fn admits(&self, p: &SpatialActivityProfile) -> bool {
        haversine_m(self.geo, &p.geo) <= self.radius_m
            && circular_diff_s(self.tod, p.time_of_day()) <= self.tod_window_s
    }
}

struct LogSink {
    file: File,
}

impl LogSink {
    fn append(&mut self, ev: &Event) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(ev).map_err(std::io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

pub struct MemoryBank {
    manifest: BankManifest,
    memories: BTreeMap<u64, Rsam>,
    rtree: RTreeIndex,
    hnsw: HnswIndex,
    provider: Arc<dyn EmbeddingProvider>,
    events: Vec<Event>,
    sink: Option<LogSink>,
    next_id: u64,
    default_interval_days: f64,
}

impl fmt::Debug for MemoryBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryBank")
            .field("manifest", &self.manifest)
            .field("memories", &self.memories.len())
            .field("live", &self.live_count())
            .field("events", &self.events.len())
            .field("persistent", &self.sink.is_some())
            .finish()
    }
}

impl MemoryBank {
    /// An in-memory bank. Use [`MemoryBank::create`] or [`MemoryBank::save`] to persist.
    pub fn new(provider: Arc<dyn EmbeddingProvider>, hnsw_seed: u64) -> Self {
        let dim = provider.dim();
        let manifest = BankManifest {
            version: FORMAT_VERSION,
            dim,
            hnsw_seed,
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        Self::from_manifest(manifest, provider)
    }

    fn from_manifest(manifest: BankManifest, provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            rtree: RTreeIndex::new(),
            hnsw: HnswIndex::new(manifest.dim, HnswParams::with_seed(manifest.hnsw_seed)),
            manifest,
            memories: BTreeMap::new(),
            provider,
            events: Vec::new(),
            sink: None,
            next_id: 1,
            default_interval_days: 1.0,
        }
    }

    /// Creates a new bank directory and attaches its log for appending.
    pub fn create(
        dir: impl AsRef<Path>,
        provider: Arc<dyn EmbeddingProvider>,
        hnsw_seed: u64,
    ) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        if dir.join(MANIFEST_FILE).exists() {
            return Err(StoreError::InvalidArgument(format!("bank already exists at {}", dir.display())));
        }
        let mut bank = Self::new(provider, hnsw_seed);
        bank.save(dir)?;
        bank.attach(dir)?;
        Ok(bank)
    }

    /// Loads when `dir` holds a bank, creates one otherwise.
    pub fn open_or_create(
        dir: impl AsRef<Path>,
        provider: Arc<dyn EmbeddingProvider>,
        hnsw_seed: u64,
    ) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        if dir.join(MANIFEST_FILE).exists() {
            Self::load(dir, provider)
        } else {
            Self::create(dir, provider, hnsw_seed)
        }
    }

    /// Writes the manifest and the complete event log into `dir`, replacing
    /// any previous contents.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), StoreError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), self.manifest.render())?;
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).map_err(std::io::Error::other)?);
            out.push('\n');
        }
        fs::write(dir.join(LOG_FILE), out)?;
        Ok(())
    }

    /// Replays `dir`'s log into a fresh bank; later mutations append to it.
    pub fn load(dir: impl AsRef<Path>, provider: Arc<dyn EmbeddingProvider>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(StoreError::MissingBank(dir.to_path_buf()));
        }
        let manifest = BankManifest::parse(&fs::read_to_string(manifest_path)?)?;
        if manifest.dim != provider.dim() {
            return Err(StoreError::DimensionMismatch { bank: manifest.dim, provider: provider.dim() });
        }
        let mut bank = Self::from_manifest(manifest, provider);
        let log_path = dir.join(LOG_FILE);
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path)?);
            for (i, line) in reader.lines().enumerate() {
                let line_no = i + 1;
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |reason: String| StoreError::CorruptLog { line: line_no, reason };
                let ev: Event = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                bank.apply(ev).map_err(|e| match e {
                    e @ StoreError::PersistenceFailure(_) => e,
                    other => corrupt(other.to_string()),
                })?;
            }
        }
        bank.attach(dir)?;
        Ok(bank)
    }

    fn attach(&mut self, dir: &Path) -> Result<(), StoreError> {
        let file = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        self.sink = Some(LogSink { file });
        Ok(())
    }

    pub fn manifest(&self) -> &BankManifest {
        &self.manifest
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    pub fn provider_handle(&self) -> Arc<dyn EmbeddingProvider> {
        Arc::clone(&self.provider)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn get(&self, id: u64) -> Option<&Rsam> {
        self.memories.get(&id)
    }

    /// All memories including dismissed ones, ascending by id.
    pub fn memories(&self) -> impl Iterator<Item = &Rsam> {
        self.memories.values()
    }

    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    pub fn live_count(&self) -> usize {
        self.memories.values().filter(|m| !m.dismissed).count()
    }

    pub fn rtree(&self) -> &RTreeIndex {
        &self.rtree
    }

    pub fn hnsw(&self) -> &HnswIndex {
        &self.hnsw
    }

    pub fn default_interval_days(&self) -> f64 {
        self.default_interval_days
    }

    /// Interval assigned to memories added without an explicit one.
    pub fn set_default_interval_days(&mut self, days: f64) -> Result<(), StoreError> {
        if !(days > 0.0) || !days.is_finite() {
            return Err(StoreError::NonPositiveInterval(days));
        }
        self.default_interval_days = days;
        Ok(())
    }

    /// Validates, logs, then applies `ev`.
    fn commit(&mut self, ev: Event) -> Result<(), StoreError> {
        if let Some(sink) = self.sink.as_mut() {
            sink.append(&ev)?;
        }
        self.apply(ev)
    }

    fn apply(&mut self, ev: Event) -> Result<(), StoreError> {
        match &ev {
            Event::Add { id, referent, query, response, source, profile, interval_days, use_case } => {
                if self.memories.contains_key(id) {
                    return Err(StoreError::IndexFailure(format!("duplicate id {id}")));
                }
                let source: ResponseSource = source.parse().map_err(StoreError::InvalidArgument)?;
                let profile = SpatialActivityProfile::build(
                    GeoPoint::new(profile.lat, profile.lon, profile.acc_m)?,
                    Timestamp::new(profile.epoch_s, profile.tz_min)?,
                    profile.scene.clone(),
                    profile.activity.clone(),
                    self.provider.as_ref(),
                )?;
                let rsam = Rsam {
                    id: *id,
                    referent_label: referent.clone(),
                    query_text: query.clone(),
                    response_text: response.clone(),
                    response_source: source,
                    created_at: profile.ts,
                    profile,
                    last_recalled_at: None,
                    recall_interval_days: *interval_days,
                    dismissed: false,
                    use_case: use_case.clone(),
                };
                self.index(rsam)?;
            }
            Event::Dismiss { id } => {
                self.live_mut(*id)?;
                self.rtree.remove(*id)?;
                self.hnsw.remove(*id)?;
                self.memories.get_mut(id).unwrap().dismissed = true;
            }
            Event::Update { id, response } => {
                check_text("response", response)?;
                self.live_mut(*id)?.response_text = response.clone();
            }
            Event::Recall { id, epoch_s, tz_min, response, .. } => {
                let ts = Timestamp::new(*epoch_s, *tz_min)?;
                let m = self.live_mut(*id)?;
                if ts < m.created_at {
                    return Err(StoreError::InvalidArgument(format!("recall of {id} precedes its creation")));
                }
                m.last_recalled_at = Some(ts);
                if let Some(r) = response {
                    m.response_text = r.clone();
                }
            }
            Event::SetInterval { id, days } => {
                if !(*days > 0.0) || !days.is_finite() {
                    return Err(StoreError::NonPositiveInterval(*days));
                }
                self.live_mut(*id)?.recall_interval_days = *days;
            }
        }
        self.events.push(ev);
        Ok(())
    }

    fn index(&mut self, rsam: Rsam) -> Result<(), StoreError> {
        let p = &rsam.profile;
        if p.descriptor.dim() != self.manifest.dim {
            return Err(StoreError::DimensionMismatch { bank: self.manifest.dim, provider: p.descriptor.dim() });
        }
        let key = SpatioTemporalKey::new(p.geo.lat(), p.geo.lon(), f64::from(p.time_of_day().seconds()))?;
        self.rtree.insert(key, rsam.id)?;
        if let Err(e) = self.hnsw.insert(rsam.id, &p.descriptor) {
            self.rtree.remove(rsam.id)?;
            return Err(e.into());
        }
        self.next_id = self.next_id.max(rsam.id + 1);
        self.memories.insert(rsam.id, rsam);
        Ok(())
    }

    fn live_mut(&mut self, id: u64) -> Result<&mut Rsam, StoreError> {
        match self.memories.get_mut(&id) {
            None => Err(StoreError::UnknownId(id)),
            Some(m) if m.dismissed => Err(StoreError::Dismissed(id)),
            Some(m) => Ok(m),
        }
    }

    fn require_live(&self, id: u64) -> Result<&Rsam, StoreError> {
        match self.memories.get(&id) {
            None => Err(StoreError::UnknownId(id)),
            Some(m) if m.dismissed => Err(StoreError::Dismissed(id)),
            Some(m) => Ok(m),
        }
    }

    pub fn add_memory(&mut self, mem: NewMemory) -> Result<u64, StoreError> {
        check_text("referent label", &mem.referent_label)?;
        check_text("query text", &mem.query_text)?;
        check_text("response text", &mem.response_text)?;
        let interval_days = mem.interval_days.unwrap_or(self.default_interval_days);
        if !(interval_days > 0.0) || !interval_days.is_finite() {
            return Err(StoreError::NonPositiveInterval(interval_days));
        }
        if mem.profile.descriptor.dim() != self.manifest.dim {
            return Err(StoreError::DimensionMismatch {
                bank: self.manifest.dim,
                provider: mem.profile.descriptor.dim(),
            });
        }
        let id = self.next_id;
        let ev = Event::Add {
            id,
            referent: mem.referent_label.clone(),
            query: mem.query_text.clone(),
            response: mem.response_text.clone(),
            source: mem.response_source.to_string(),
            profile: ProfileRecord::from(&mem.profile),
            interval_days,
            use_case: mem.use_case.clone(),
        };
        if let Some(sink) = self.sink.as_mut() {
            sink.append(&ev)?;
        }
        // index the caller's descriptor directly instead of re-embedding
        self.index(Rsam {
            id,
            referent_label: mem.referent_label,
            query_text: mem.query_text,
            response_text: mem.response_text,
            response_source: mem.response_source,
            created_at: mem.profile.ts,
            profile: mem.profile,
            last_recalled_at: None,
            recall_interval_days: interval_days,
            dismissed: false,
            use_case: mem.use_case,
        })?;
        self.events.push(ev);
        Ok(id)
    }

    /// Permanently removes a memory from retrieval.
    pub fn dismiss(&mut self, id: u64) -> Result<(), StoreError> {
        match self.memories.get(&id) {
            None => return Err(StoreError::UnknownId(id)),
            Some(m) if m.dismissed => return Err(StoreError::AlreadyDismissed(id)),
            Some(_) => {}
        }
        self.commit(Event::Dismiss { id })
    }

    pub fn update_response(&mut self, id: u64, response: impl Into<String>) -> Result<(), StoreError> {
        let response = response.into();
        self.require_live(id)?;
        check_text("response", &response)?;
        self.commit(Event::Update { id, response })
    }

    pub fn set_interval(&mut self, id: u64, days: f64) -> Result<(), StoreError> {
        self.require_live(id)?;
        if !(days > 0.0) || !days.is_finite() {
            return Err(StoreError::NonPositiveInterval(days));
        }
        self.commit(Event::SetInterval { id, days })
    }

    /// Logs a resurfacing at `ts`; a refreshed response replaces the stored one.
    pub fn record_recall(
        &mut self,
        id: u64,
        ts: Timestamp,
        score: f64,
        refreshed_response: Option<String>,
    ) -> Result<(), StoreError> {
        let m = self.require_live(id)?;
        if ts < m.created_at {
            return Err(StoreError::InvalidArgument(format!("recall of {id} precedes its creation")));
        }
        if let Some(r) = &refreshed_response {
            check_text("response", r)?;
        }
        self.commit(Event::Recall {
            id,
            epoch_s: ts.epoch_s(),
            tz_min: ts.tz_offset_min(),
            score,
            refreshed: refreshed_response.is_some(),
            response: refreshed_response,
        })
    }

    pub fn candidate_retrieve(
        &self,
        profile: &SpatialActivityProfile,
        k: usize,
        radius_m: f64,
        tod_window_s: u32,
    ) -> Result<Vec<(&Rsam, f32)>, StoreError> {
        self.retrieve(&RetrievalQuery {
            geo: &profile.geo,
            tod: profile.time_of_day(),
            descriptor: &profile.descriptor,
            k,
            radius_m,
            tod_window_s,
        })
    }

    /// Coarse R-tree filter, exact spatiotemporal check, then semantic
    /// ranking: exact below [`EXACT_RANK_CUTOFF`] candidates, HNSW above.
    pub fn retrieve(&self, q: &RetrievalQuery<'_>) -> Result<Vec<(&Rsam, f32)>, StoreError> {
        q.validate()?;
        if q.descriptor.dim() != self.manifest.dim {
            return Err(StoreError::DimensionMismatch { bank: self.manifest.dim, provider: q.descriptor.dim() });
        }
        if self.rtree.is_empty() {
            return Ok(Vec::new());
        }
        let candidates: Vec<&Rsam> = self
            .rtree
            .range(&q.coarse_box())?
            .into_iter()
            .filter_map(|id| self.memories.get(&id))
            .filter(|m| !m.dismissed && q.admits(&m.profile))
            .collect();

        let exact = |m: &Rsam| cosine_distance(q.descriptor.as_slice(), m.profile.descriptor.as_slice());
        let mut ranked: Vec<(&Rsam, f32)> = if candidates.len() <= EXACT_RANK_CUTOFF {
            candidates.iter().map(|&m| (m, exact(m))).collect()
        } else {
            let ef = self.hnsw.params().ef_search.max(4 * q.k);
            let allowed: HashSet<u64> = candidates.iter().map(|m| m.id).collect();
            let mut hits: Vec<(&Rsam, f32)> = self
                .hnsw
                .search(q.descriptor, ef, ef)?
                .into_iter()
                .filter(|(id, _)| allowed.contains(id))
                .map(|(id, d)| (&self.memories[&id], d))
                .collect();
            if hits.len() < q.k {
                let seen: HashSet<u64> = hits.iter().map(|(m, _)| m.id).collect();
                hits.extend(candidates.iter().filter(|m| !seen.contains(&m.id)).map(|&m| (m, exact(m))));
            }
            hits
        };
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
        ranked.truncate(q.k);
        Ok(ranked)
    }

    /// R-tree size, HNSW live size and non-dismissed count agree, and every
    /// live memory is in both indices.
    pub fn check_consistency(&self) -> Result<(), String> {
        let live = self.live_count();
        if self.rtree.len() != live || self.hnsw.len() != live {
            return Err(format!("rtree {} / hnsw {} / live {live}", self.rtree.len(), self.hnsw.len()));
        }
        for m in self.memories.values() {
            let indexed = (self.rtree.contains(m.id), self.hnsw.contains(m.id));
            if m.dismissed && indexed != (false, false) {
                return Err(format!("dismissed {} still indexed", m.id));
            }
            if !m.dismissed && indexed != (true, true) {
                return Err(format!("live {} missing from an index", m.id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashingEmbedder;

    fn provider() -> Arc<dyn EmbeddingProvider> {
        Arc::new(HashingEmbedder::default())
    }

    fn profile(
        bank: &MemoryBank,
        lat: f64,
        lon: f64,
        epoch_s: i64,
        scene: &str,
        activity: &str,
    ) -> SpatialActivityProfile {
        SpatialActivityProfile::build(
            GeoPoint::new(lat, lon, 5.0).unwrap(),
            Timestamp::utc(epoch_s),
            scene,
            activity,
            bank.provider(),
        )
        .unwrap()
    }

    fn add(bank: &mut MemoryBank, p: SpatialActivityProfile) -> u64 {
        bank.add_memory(NewMemory::new("door", "weather today?", "sunny", ResponseSource::StaticKnowledge, p)).unwrap()
    }

    #[test]
    fn add_to_empty_bank() {
        let mut bank = MemoryBank::new(provider(), 42);
        let p = profile(&bank, 40.0, -73.0, 28_200, "house entrance", "preparing to commute");
        let id = add(&mut bank, p);
        assert_eq!(bank.len(), 1);
        assert!(bank.rtree().contains(id) && bank.hnsw().contains(id));
        bank.check_consistency().unwrap();
    }

    #[test]
    fn identical_adds_get_distinct_ids() {
        let mut bank = MemoryBank::new(provider(), 42);
        let p = profile(&bank, 40.0, -73.0, 28_200, "house entrance", "preparing to commute");
        let a = add(&mut bank, p.clone());
        let b = add(&mut bank, p);
        assert_ne!(a, b);
        assert_eq!(bank.len(), 2);
    }

    #[test]
    fn empty_texts_rejected() {
        let mut bank = MemoryBank::new(provider(), 42);
        let p = profile(&bank, 40.0, -73.0, 0, "kitchen", "cooking");
        let err = bank.add_memory(NewMemory::new(" ", "q?", "a", ResponseSource::StaticKnowledge, p)).unwrap_err();
        assert!(matches!(err, StoreError::EmptyText(_)));
        assert!(SpatialActivityProfile::build(
            GeoPoint::new(0.0, 0.0, 0.0).unwrap(),
            Timestamp::utc(0),
            "",
            "x",
            bank.provider()
        )
        .is_err());
    }

    #[test]
    fn retrieve_empty_and_exact() {
        let mut bank = MemoryBank::new(provider(), 42);
        let p = profile(&bank, 40.0, -73.0, 28_200, "house entrance", "preparing to commute");
        assert!(bank.candidate_retrieve(&p, 5, 50.0, 5400).unwrap().is_empty());
        let id = add(&mut bank, p.clone());
        let got = bank.candidate_retrieve(&p, 5, 50.0, 5400).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0.id, id);
        assert!(got[0].1.abs() < 1e-6);
    }

    #[test]
    fn retrieve_respects_radius_and_window() {
        let mut bank = MemoryBank::new(provider(), 42);
        let base = profile(&bank, 40.0, -73.0, 28_200, "office desk", "reading papers");
        add(&mut bank, base.clone());
        // ~111 m north
        let north = profile(&bank, 40.001, -73.0, 28_200, "office desk", "reading papers");
        assert!(bank.candidate_retrieve(&north, 5, 100.0, 5400).unwrap().is_empty());
        assert_eq!(bank.candidate_retrieve(&north, 5, 120.0, 5400).unwrap().len(), 1);
        // two hours later
        let later = profile(&bank, 40.0, -73.0, 28_200 + 7200, "office desk", "reading papers");
        assert!(bank.candidate_retrieve(&later, 5, 50.0, 5400).unwrap().is_empty());
        assert_eq!(bank.candidate_retrieve(&later, 5, 50.0, 7200).unwrap().len(), 1);
    }

    #[test]
    fn window_wraps_midnight() {
        let mut bank = MemoryBank::new(provider(), 42);
        let late = profile(&bank, 10.0, 10.0, 86_000, "bedroom", "going to sleep");
        let id = add(&mut bank, late);
        let early = profile(&bank, 10.0, 10.0, 86_400 + 600, "bedroom", "going to sleep");
        let got = bank.candidate_retrieve(&early, 5, 50.0, 1200).unwrap();
        assert_eq!(got.iter().map(|(m, _)| m.id).collect::<Vec<_>>(), vec![id]);
    }

    #[test]
    fn bad_retrieval_arguments() {
        let bank = MemoryBank::new(provider(), 42);
        let p = profile(&bank, 0.0, 0.0, 0, "kitchen", "cooking");
        assert!(bank.candidate_retrieve(&p, 0, 50.0, 10).is_err());
        assert!(bank.candidate_retrieve(&p, 1, 0.0, 10).is_err());
        assert!(bank.candidate_retrieve(&p, 1, 50.0, 0).is_err());
        assert!(bank.candidate_retrieve(&p, 1, 50.0, 43_201).is_err());
    }

    #[test]
    fn dismiss_excludes_and_is_checked() {
        let mut bank = MemoryBank::new(provider(), 42);
        let p = profile(&bank, 1.0, 1.0, 100, "garage", "fixing the bike");
        let id = add(&mut bank, p.clone());
        bank.dismiss(id).unwrap();
        assert!(bank.candidate_retrieve(&p, 5, 50.0, 5400).unwrap().is_empty());
        assert!(matches!(bank.dismiss(id), Err(StoreError::AlreadyDismissed(_))));
        assert!(matches!(bank.dismiss(99), Err(StoreError::UnknownId(99))));
        assert!(matches!(bank.update_response(id, "x"), Err(StoreError::Dismissed(_))));
        assert!(matches!(bank.set_interval(id, 2.0), Err(StoreError::Dismissed(_))));
        bank.check_consistency().unwrap();
    }

    #[test]
    fn update_keeps_rank() {
        let mut bank = MemoryBank::new(provider(), 42);
        let p = profile(&bank, 1.0, 1.0, 100, "garage", "fixing the bike");
        let a = add(&mut bank, p.clone());
        let q = profile(&bank, 1.0, 1.0, 100, "garage", "fixing the car");
        add(&mut bank, q.clone());
        let before: Vec<(u64, f32)> =
            bank.candidate_retrieve(&q, 5, 50.0, 600).unwrap().iter().map(|(m, d)| (m.id, *d)).collect();
        bank.update_response(a, "new steps").unwrap();
        assert_eq!(bank.get(a).unwrap().response_text, "new steps");
        let after: Vec<(u64, f32)> =
            bank.candidate_retrieve(&q, 5, 50.0, 600).unwrap().iter().map(|(m, d)| (m.id, *d)).collect();
        assert_eq!(before, after);
        assert!(matches!(bank.update_response(77, "x"), Err(StoreError::UnknownId(77))));
    }

    #[test]
    fn interval_validation() {
        let mut bank = MemoryBank::new(provider(), 42);
        let p = profile(&bank, 1.0, 1.0, 100, "garage", "fixing the bike");
        let id = add(&mut bank, p);
        assert!(matches!(bank.set_interval(id, 0.0), Err(StoreError::NonPositiveInterval(_))));
        assert!(matches!(bank.set_interval(id, -1.0), Err(StoreError::NonPositiveInterval(_))));
        bank.set_interval(id, 2.5).unwrap();
        assert_eq!(bank.get(id).unwrap().recall_interval_days, 2.5);
    }

    #[test]
    fn response_source_text_form() {
        assert_eq!("static".parse::<ResponseSource>().unwrap(), ResponseSource::StaticKnowledge);
        assert_eq!(
            "live:https://x.test/w".parse::<ResponseSource>().unwrap(),
            ResponseSource::LiveFeed("https://x.test/w".into())
        );
        assert!("live:".parse::<ResponseSource>().is_err());
        assert!("web".parse::<ResponseSource>().is_err());
        assert_eq!(ResponseSource::LiveFeed("u".into()).to_string(), "live:u");
    }

    #[test]
    fn manifest_round_trip_and_version() {
        let m = BankManifest { version: 1, dim: 64, hnsw_seed: 7, created: "2026-01-01T00:00:00Z".into() };
        assert_eq!(BankManifest::parse(&m.render()).unwrap(), m);
        let v2 = m.render().replace("version=1", "version=2");
        assert!(matches!(BankManifest::parse(&v2), Err(StoreError::VersionMismatch { found: 2 })));
        assert!(matches!(BankManifest::parse("dim=3"), Err(StoreError::CorruptManifest(_))));
    }

    #[test]
    fn save_load_empty() {
        let dir = tempfile::tempdir().unwrap();
        let bank = MemoryBank::new(provider(), 9);
        bank.save(dir.path()).unwrap();
        let loaded = MemoryBank::load(dir.path(), provider()).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.manifest().hnsw_seed, 9);
    }

    #[test]
    fn sequential_updates_replay_to_final_text() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = MemoryBank::create(dir.path(), provider(), 1).unwrap();
        let p = profile(&bank, 1.0, 1.0, 100, "toolbox", "maintenance");
        let id = add(&mut bank, p);
        for text in ["v1", "v2", "v3"] {
            bank.update_response(id, text).unwrap();
        }
        drop(bank);
        let loaded = MemoryBank::load(dir.path(), provider()).unwrap();
        assert_eq!(loaded.get(id).unwrap().response_text, "v3");
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(MemoryBank::load(dir.path(), provider()), Err(StoreError::MissingBank(_))));
        let mut bank = MemoryBank::create(dir.path(), provider(), 1).unwrap();
        let p = profile(&bank, 1.0, 1.0, 100, "toolbox", "maintenance");
        add(&mut bank, p);
        drop(bank);
        let other: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(32));
        assert!(matches!(
            MemoryBank::load(dir.path(), other),
            Err(StoreError::DimensionMismatch { bank: 64, provider: 32 })
        ));
        let log = dir.path().join(LOG_FILE);
        let mut text = fs::read_to_string(&log).unwrap();
        text.push_str("{\"ev\":\"DISMISS\",\"id\":1}\n{\"ev\":\"UPDATE\",\"id\":1,\"response\":\"x\"}\n");
        fs::write(&log, text).unwrap();
        // line 3 updates a dismissed memory
        match MemoryBank::load(dir.path(), provider()) {
            Err(StoreError::CorruptLog { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn append_is_write_ahead() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = MemoryBank::create(dir.path(), provider(), 1).unwrap();
        let p = profile(&bank, 1.0, 1.0, 100, "toolbox", "maintenance");
        add(&mut bank, p);
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"ev\":\"ADD\",\"id\":1,"));
        assert!(text.contains("\"profile\":{\"lat\":1.0,\"lon\":1.0,\"acc_m\":5.0,\"epoch_s\":100,\"tz_min\":0"));
    }
}
