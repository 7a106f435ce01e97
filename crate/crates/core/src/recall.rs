//! Proactive resurfacing: sequential context gates, equal-weight scoring,
//! per-memory recall intervals and live-content refresh.

use std::cell::OnceCell;
use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::clock::{circular_diff_s, Timestamp, SECONDS_PER_DAY};
use crate::embed::{cosine, fnv1a64, Embedding, EmbeddingProvider};
use crate::geo::{haversine_m, GeoPoint};
use crate::store::{MemoryBank, ResponseSource, RetrievalQuery, Rsam, SpatialActivityProfile, StoreError};

pub const DEFAULT_TOD_WINDOW_S: u32 = 5_400;
pub const MIN_RADIUS_M: f64 = 50.0;
pub const LIVE_FETCH_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
}

impl Detection {
    pub fn new(label: impl Into<String>, confidence: f64) -> Self {
        Self { label: label.into(), confidence }
    }
}

/// A user-initiated query attached to a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameQuery {
    pub referent_label: String,
    pub query_text: String,
}

/// One lifelog tick.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub ts: Timestamp,
    pub geo: GeoPoint,
    pub detections: Vec<Detection>,
    pub scene_text: String,
    pub activity_text: String,
    pub query: Option<FrameQuery>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateScores {
    pub geo_m: f64,
    pub tod_s: u32,
    pub referent_sim: f64,
    pub semantic_sim: f64,
    pub combined: f64,
}

/// Mean of the three normalized dimension scores.
pub fn combined_score(geo_score: f64, tod_score: f64, sem_score: f64) -> f64 {
    (geo_score + tod_score + sem_score) / 3.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallEvent {
    pub rsam_id: u64,
    pub ts: Timestamp,
    pub scores: GateScores,
    pub refreshed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallConfig {
    /// Fixed retrieval radius; `None` derives it from the frame's GPS accuracy.
    pub radius_m: Option<f64>,
    pub tod_window_s: u32,
    pub referent_conf_threshold: f64,
    pub referent_sim_threshold: f64,
    pub semantic_threshold: f64,
    pub k: usize,
    pub default_interval_days: f64,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            radius_m: None,
            tod_window_s: DEFAULT_TOD_WINDOW_S,
            referent_conf_threshold: 0.5,
            referent_sim_threshold: 0.8,
            semantic_threshold: 0.8,
            k: 5,
            default_interval_days: 1.0,
        }
    }
}

impl RecallConfig {
    /// `max(2 * accuracy, 50 m)` unless a radius is pinned.
    pub fn radius_for(&self, geo: &GeoPoint) -> f64 {
        self.radius_m.unwrap_or_else(|| (2.0 * geo.accuracy_m()).max(MIN_RADIUS_M))
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::InvalidArgument(m));
        if let Some(r) = self.radius_m {
            if !(r > 0.0) || !r.is_finite() {
                return bad(format!("radius {r} must be positive"));
            }
        }
        if self.tod_window_s == 0 || self.tod_window_s > 43_200 {
            return bad(format!("time window {} outside (0, 43200]", self.tod_window_s));
        }
        if !(0.0..=1.0).contains(&self.referent_conf_threshold) {
            return bad(format!("confidence threshold {} outside [0, 1]", self.referent_conf_threshold));
        }
        if !(0.0..=1.0).contains(&self.referent_sim_threshold) {
            return bad(format!("referent threshold {} outside [0, 1]", self.referent_sim_threshold));
        }
        if !(-1.0..=1.0).contains(&self.semantic_threshold) {
            return bad(format!("semantic threshold {} outside [-1, 1]", self.semantic_threshold));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(self.default_interval_days > 0.0) || !self.default_interval_days.is_finite() {
            return Err(StoreError::NonPositiveInterval(self.default_interval_days));
        }
        Ok(())
    }
}

/// A frame plus lazily computed embeddings, so gates that never run never
/// pay for an embedding call.
pub struct FrameContext<'a> {
    frame: &'a FrameObservation,
    provider: &'a dyn EmbeddingProvider,
    descriptor: OnceCell<Option<Embedding>>,
    labels: OnceCell<Vec<Option<Embedding>>>,
}

impl<'a> FrameContext<'a> {
    pub fn new(frame: &'a FrameObservation, provider: &'a dyn EmbeddingProvider) -> Self {
        Self { frame, provider, descriptor: OnceCell::new(), labels: OnceCell::new() }
    }

    pub fn frame(&self) -> &FrameObservation {
        self.frame
    }

    /// Embedding of `scene | activity`; `None` when the texts cannot be embedded.
    pub fn descriptor(&self) -> Option<&Embedding> {
        self.descriptor
            .get_or_init(|| {
                let text = SpatialActivityProfile::descriptor_text(&self.frame.scene_text, &self.frame.activity_text);
                self.provider.embed(&text).ok()
            })
            .as_ref()
    }

    fn label_embeddings(&self) -> &[Option<Embedding>] {
        self.labels.get_or_init(|| self.frame.detections.iter().map(|d| self.provider.embed(&d.label).ok()).collect())
    }

    /// Runs the three gates in order and stops at the first failure.
    pub fn verify(&self, rsam: &Rsam, cfg: &RecallConfig) -> Option<GateScores> {
        let frame = self.frame;
        let radius = cfg.radius_for(&frame.geo);

        // spatiotemporal proximity
        let geo_m = haversine_m(&frame.geo, &rsam.profile.geo);
        let tod_s = circular_diff_s(frame.ts.time_of_day(), rsam.profile.time_of_day());
        if geo_m > radius || tod_s > cfg.tod_window_s {
            return None;
        }

        // referent presence
        let confident: Vec<usize> = frame
            .detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.confidence >= cfg.referent_conf_threshold)
            .map(|(i, _)| i)
            .collect();
        if confident.is_empty() {
            return None;
        }
        let wanted = rsam.referent_label.trim().to_lowercase();
        let exact = confident.iter().any(|&i| frame.detections[i].label.trim().to_lowercase() == wanted);
        let referent_sim = if exact {
            1.0
        } else {
            let referent = self.provider.embed(&rsam.referent_label).ok()?;
            let labels = self.label_embeddings();
            confident
                .iter()
                .filter_map(|&i| labels[i].as_ref())
                .filter_map(|e| cosine(e, &referent).ok())
                .fold(f64::NEG_INFINITY, |best, s| best.max(f64::from(s)))
        };
        if !(referent_sim >= cfg.referent_sim_threshold) {
            return None;
        }

        // activity semantics
        let semantic_sim = f64::from(cosine(self.descriptor()?, &rsam.profile.descriptor).ok()?);
        if semantic_sim < cfg.semantic_threshold {
            return None;
        }

        let geo_score = (1.0 - geo_m / radius).max(0.0);
        let tod_score = (1.0 - f64::from(tod_s) / f64::from(cfg.tod_window_s)).max(0.0);
        Some(GateScores {
            geo_m,
            tod_s,
            referent_sim: referent_sim.clamp(0.0, 1.0),
            semantic_sim,
            combined: combined_score(geo_score, tod_score, semantic_sim.max(0.0)),
        })
    }
}

pub fn verify_gates(
    rsam: &Rsam,
    frame: &FrameObservation,
    cfg: &RecallConfig,
    provider: &dyn EmbeddingProvider,
) -> Option<GateScores> {
    FrameContext::new(frame, provider).verify(rsam, cfg)
}

/// Whether enough time has passed since the last resurfacing.
pub fn is_due(rsam: &Rsam, now: Timestamp) -> bool {
    if rsam.dismissed {
        return false;
    }
    match rsam.last_recalled_at {
        None => true,
        Some(last) => now.seconds_since(last) as f64 >= rsam.recall_interval_days * SECONDS_PER_DAY as f64,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiveError {
    #[error("live source unavailable: {0}")]
    Unavailable(String),
    #[error("no live content for {0}")]
    NotFound(String),
}

/// Fetches fresh content for a live-feed memory.
pub trait LiveSource: Send + Sync {
    fn fetch(&self, url: &str, query_text: &str) -> Result<String, LiveError>;
}

/// Reads canned content from `<dir>/<fnv1a64(url) as 16 hex digits>.txt`.
#[derive(Debug, Clone, Default)]
pub struct FixtureLiveSource {
    dir: Option<PathBuf>,
}

impl FixtureLiveSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    /// A source with no fixtures; every fetch fails.
    pub fn empty() -> Self {
        Self { dir: None }
    }

    pub fn fixture_name(url: &str) -> String {
        format!("{:016x}.txt", fnv1a64(url.as_bytes()))
    }
}

impl LiveSource for FixtureLiveSource {
    fn fetch(&self, url: &str, _query_text: &str) -> Result<String, LiveError> {
        let dir = self.dir.as_ref().ok_or_else(|| LiveError::NotFound(url.to_string()))?;
        let text = std::fs::read_to_string(dir.join(Self::fixture_name(url)))
            .map_err(|_| LiveError::NotFound(url.to_string()))?;
        let text = text.trim_end();
        if text.is_empty() {
            return Err(LiveError::NotFound(url.to_string()));
        }
        Ok(text.to_string())
    }
}

/// In-memory canned responses keyed by url.
#[derive(Debug, Clone, Default)]
pub struct MapLiveSource {
    pages: HashMap<String, String>,
}

impl MapLiveSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, url: impl Into<String>, body: impl Into<String>) -> Self {
        self.pages.insert(url.into(), body.into());
        self
    }
}

impl LiveSource for MapLiveSource {
    fn fetch(&self, url: &str, _query_text: &str) -> Result<String, LiveError> {
        self.pages.get(url).cloned().ok_or_else(|| LiveError::NotFound(url.to_string()))
    }
}

/// `GET <url>?q=<query>` with a fixed timeout; the body is the content.
pub struct HttpLiveSource {
    agent: ureq::Agent,
}

impl HttpLiveSource {
    pub fn new() -> Self {
        Self::with_timeout(LIVE_FETCH_TIMEOUT)
    }

    pub fn with_timeout(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { agent }
    }
}

impl Default for HttpLiveSource {
    fn default() -> Self {
        Self::new()
    }
}

impl LiveSource for HttpLiveSource {
    fn fetch(&self, url: &str, query_text: &str) -> Result<String, LiveError> {
        let unavailable = |e: ureq::Error| LiveError::Unavailable(e.to_string());
        let mut resp = self.agent.get(url).query("q", query_text).call().map_err(unavailable)?;
        let body = resp.body_mut().read_to_string().map_err(unavailable)?;
        if body.trim().is_empty() {
            return Err(LiveError::NotFound(url.to_string()));
        }
        Ok(body)
    }
}

/// Matches one frame against the bank and resurfaces every memory that
/// passes all gates and is due. Memories created at this very frame are not
/// resurfaced by it.
pub fn proactive_step(
    bank: &mut MemoryBank,
    frame: &FrameObservation,
    cfg: &RecallConfig,
    live: &dyn LiveSource,
) -> Result<Vec<RecallEvent>, StoreError> {
    if bank.live_count() == 0 {
        return Ok(Vec::new());
    }
    let provider = bank.provider_handle();
    let ctx = FrameContext::new(frame, provider.as_ref());
    let Some(descriptor) = ctx.descriptor() else {
        return Ok(Vec::new());
    };

    struct Survivor {
        id: u64,
        scores: GateScores,
        fetch: Option<(String, String)>,
    }

    let survivors: Vec<Survivor> = bank
        .retrieve(&RetrievalQuery {
            geo: &frame.geo,
            tod: frame.ts.time_of_day(),
            descriptor,
            k: cfg.k,
            radius_m: cfg.radius_for(&frame.geo),
            tod_window_s: cfg.tod_window_s,
        })?
        .into_iter()
        .filter(|(m, _)| m.created_at < frame.ts && is_due(m, frame.ts))
        .filter_map(|(m, _)| {
            let scores = ctx.verify(m, cfg)?;
            let fetch = match &m.response_source {
                ResponseSource::LiveFeed(url) => Some((url.clone(), m.query_text.clone())),
                ResponseSource::StaticKnowledge => None,
            };
            Some(Survivor { id: m.id, scores, fetch })
        })
        .collect();

    let refreshed: Vec<Option<String>> = std::thread::scope(|s| {
        let handles: Vec<_> = survivors
            .iter()
            .map(|sv| sv.fetch.as_ref().map(|(url, q)| s.spawn(move || live.fetch(url, q).ok())))
            .collect();
        handles
            .into_iter()
            .map(|h| h.and_then(|h| h.join().ok().flatten()))
            .map(|r| r.filter(|t| !t.trim().is_empty()))
            .collect()
    });

    let mut events = Vec::with_capacity(survivors.len());
    for (sv, content) in survivors.into_iter().zip(refreshed) {
        let was_refreshed = content.is_some();
        bank.record_recall(sv.id, frame.ts, sv.scores.combined, content)?;
        events.push(RecallEvent { rsam_id: sv.id, ts: frame.ts, scores: sv.scores, refreshed: was_refreshed });
    }
    events.sort_by(|a, b| b.scores.combined.total_cmp(&a.scores.combined).then(a.rsam_id.cmp(&b.rsam_id)));
    Ok(events)
}
