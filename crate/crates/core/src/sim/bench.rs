//! Synthetic benchmark comparing hybrid retrieval against a brute-force scan.
//!
//! Memories sit uniformly in a 1 km box with uniform time of day, and their
//! descriptors are drawn around a handful of random cluster centers.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::clock::{circular_diff_s, Timestamp};
use crate::embed::{cosine_distance, Embedding, EmbeddingProvider, HashingEmbedder};
use crate::geo::{haversine_m, GeoPoint, METERS_PER_DEGREE};
use crate::store::{
    MemoryBank, NewMemory, ResponseSource, RetrievalQuery, Rsam, SpatialActivityProfile, StoreError, EXACT_RANK_CUTOFF,
};

use super::SimError;

/// South-west corner of the synthetic area.
const ORIGIN: (f64, f64) = (47.6, -122.35);
const BOX_M: f64 = 1_000.0;
/// UTC midnight, so `BASE_EPOCH + tod` spans one UTC day.
const BASE_EPOCH: i64 = 1_700_000_000 - 1_700_000_000 % 86_400;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub k: usize,
    pub queries: usize,
    pub radius_m: f64,
    pub tod_window_s: u32,
    pub clusters: usize,
    /// Spread of descriptors around their cluster center, per coordinate
    /// before normalization.
    pub spread: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            dim: crate::embed::DEFAULT_DIM,
            seed: 42,
            k: 5,
            queries: 100,
            radius_m: 150.0,
            tod_window_s: crate::recall::DEFAULT_TOD_WINDOW_S,
            clusters: 16,
            spread: 0.15,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidArgument(m.to_string()));
        if self.n < 100 {
            return bad("bench needs n >= 100");
        }
        if self.dim == 0 || self.k == 0 || self.queries == 0 || self.clusters == 0 {
            return bad("dim, k, queries and clusters must be positive");
        }
        if !(self.radius_m > 0.0) || !(self.spread >= 0.0) {
            return bad("radius must be positive and spread non-negative");
        }
        if self.tod_window_s == 0 || self.tod_window_s > 43_200 {
            return bad("time window outside (0, 43200]");
        }
        Ok(())
    }
}

/// A retrieval probe: position, time and descriptor.
#[derive(Debug, Clone)]
pub struct Probe {
    pub profile: SpatialActivityProfile,
}

pub struct Workload {
    pub memories: Vec<SpatialActivityProfile>,
    pub probes: Vec<Probe>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn around(rng: &mut ChaCha8Rng, center: &[f64], spread: f64) -> Embedding {
    loop {
        let v: Vec<f32> = center
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                (c + spread * z) as f32
            })
            .collect();
        if let Ok(e) = Embedding::new(v) {
            return e;
        }
    }
}

fn random_profile(rng: &mut ChaCha8Rng, centers: &[Vec<f64>], spread: f64) -> SpatialActivityProfile {
    let north = rng.random_range(0.0..BOX_M);
    let east = rng.random_range(0.0..BOX_M);
    let lat = ORIGIN.0 + north / METERS_PER_DEGREE;
    let lon = ORIGIN.1 + east / (METERS_PER_DEGREE * ORIGIN.0.to_radians().cos());
    let tod: i64 = rng.random_range(0..86_400);
    let c = rng.random_range(0..centers.len());
    let descriptor = around(rng, &centers[c], spread);
    SpatialActivityProfile::with_descriptor(
        GeoPoint::new(lat, lon, 5.0).expect("inside the synthetic box"),
        Timestamp::utc(BASE_EPOCH + tod),
        format!("cluster {c}"),
        "synthetic activity",
        descriptor,
    )
    .expect("non-empty texts")
}

/// Draws the memories and probes for `cfg`; identical seeds give identical
/// workloads.
pub fn generate(cfg: &BenchConfig) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.clusters).map(|_| random_unit(&mut rng, cfg.dim)).collect();
    let memories = (0..cfg.n).map(|_| random_profile(&mut rng, &centers, cfg.spread)).collect();
    let probes = (0..cfg.queries).map(|_| Probe { profile: random_profile(&mut rng, &centers, cfg.spread) }).collect();
    Workload { memories, probes }
}

/// Full scan: exact haversine, time-of-day and cosine for every memory.
pub fn brute_force_retrieve<'b>(
    bank: &'b MemoryBank,
    profile: &SpatialActivityProfile,
    k: usize,
    radius_m: f64,
    tod_window_s: u32,
) -> Vec<(&'b Rsam, f32)> {
    let tod = profile.time_of_day();
    let mut hits: Vec<(&Rsam, f32)> = bank
        .memories()
        .filter(|m| !m.dismissed)
        .filter_map(|m| {
            let d = haversine_m(&profile.geo, &m.profile.geo);
            let dt = circular_diff_s(tod, m.profile.time_of_day());
            let c = cosine_distance(profile.descriptor.as_slice(), m.profile.descriptor.as_slice());
            (d <= radius_m && dt <= tod_window_s).then_some((m, c))
        })
        .collect();
    hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
    hits.truncate(k);
    hits
}

pub fn build_bank(cfg: &BenchConfig, workload: &Workload) -> Result<MemoryBank, SimError> {
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(cfg.dim));
    let mut bank = MemoryBank::new(provider, cfg.seed);
    for (i, p) in workload.memories.iter().enumerate() {
        bank.add_memory(NewMemory::new(
            format!("item {i}"),
            "what is this?",
            "synthetic answer",
            ResponseSource::StaticKnowledge,
            p.clone(),
        ))?;
    }
    Ok(bank)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySummary {
    pub mean: Duration,
    pub p95: Duration,
}

impl LatencySummary {
    fn from_samples(mut samples: Vec<Duration>) -> Self {
        samples.sort_unstable();
        let total: Duration = samples.iter().sum();
        let mean = total / samples.len() as u32;
        let idx = ((samples.len() as f64 * 0.95).ceil() as usize).clamp(1, samples.len()) - 1;
        Self { mean, p95: samples[idx] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub insert_time: Duration,
    pub hybrid: LatencySummary,
    pub brute: LatencySummary,
    /// Mean over probes of |hybrid ∩ oracle| / |oracle|; probes with an
    /// empty oracle count as 1.
    pub recall_at_k: f64,
    pub exact_matches: usize,
    /// Probes whose candidate set exceeded the exact-ranking cutoff.
    pub hnsw_path_probes: usize,
    /// Of those, probes where fewer than `k` HNSW hits were candidates, so
    /// the exact scan of the candidates filled the result.
    pub topped_up_probes: usize,
    pub mean_candidates: f64,
    pub mean_results: f64,
}

impl BenchReport {
    pub fn insert_per_s(&self) -> f64 {
        self.config.n as f64 / self.insert_time.as_secs_f64().max(1e-9)
    }

    pub fn speedup(&self) -> f64 {
        self.brute.mean.as_secs_f64() / self.hybrid.mean.as_secs_f64().max(1e-12)
    }

    /// Renders the report. Without timing the output depends only on the
    /// configuration.
    pub fn render(&self, with_timing: bool) -> String {
        let c = &self.config;
        let mut s = String::new();
        let mut row = |k: &str, v: String| writeln!(s, "{k:<22} {v}").expect("write to string");
        row("n", c.n.to_string());
        row("dim", c.dim.to_string());
        row("seed", c.seed.to_string());
        row("k", c.k.to_string());
        row("queries", c.queries.to_string());
        row("radius_m", format!("{:.1}", c.radius_m));
        row("tod_window_s", c.tod_window_s.to_string());
        row("mean_candidates", format!("{:.2}", self.mean_candidates));
        row("mean_results", format!("{:.2}", self.mean_results));
        row("hnsw_path_probes", self.hnsw_path_probes.to_string());
        row("topped_up_probes", self.topped_up_probes.to_string());
        row("recall_at_k", format!("{:.4}", self.recall_at_k));
        row("exact_matches", format!("{}/{}", self.exact_matches, c.queries));
        if with_timing {
            let ms = |d: Duration| format!("{:.3} ms", d.as_secs_f64() * 1e3);
            row("insert_per_s", format!("{:.0}", self.insert_per_s()));
            row("hybrid_mean", ms(self.hybrid.mean));
            row("hybrid_p95", ms(self.hybrid.p95));
            row("brute_mean", ms(self.brute.mean));
            row("brute_p95", ms(self.brute.p95));
            row("speedup", format!("{:.1}x", self.speedup()));
        }
        s
    }
}

/// Runs the benchmark on an already built bank.
pub fn measure(
    cfg: &BenchConfig,
    bank: &MemoryBank,
    workload: &Workload,
    insert_time: Duration,
) -> Result<BenchReport, SimError> {
    let mut hybrid_t = Vec::with_capacity(workload.probes.len());
    let mut brute_t = Vec::with_capacity(workload.probes.len());
    let (mut recall_sum, mut exact, mut hnsw_path, mut topped_up, mut cand_sum, mut res_sum) =
        (0.0, 0, 0, 0, 0usize, 0usize);
    for probe in &workload.probes {
        let p = &probe.profile;
        let start = Instant::now();
        let hybrid = bank.candidate_retrieve(p, cfg.k, cfg.radius_m, cfg.tod_window_s)?;
        hybrid_t.push(start.elapsed());

        let start = Instant::now();
        let oracle = brute_force_retrieve(bank, p, cfg.k, cfg.radius_m, cfg.tod_window_s);
        brute_t.push(start.elapsed());

        let q = RetrievalQuery {
            geo: &p.geo,
            tod: p.time_of_day(),
            descriptor: &p.descriptor,
            k: cfg.k,
            radius_m: cfg.radius_m,
            tod_window_s: cfg.tod_window_s,
        };
        let candidates: HashSet<u64> = bank
            .rtree()
            .range(&q.coarse_box())
            .map_err(StoreError::from)?
            .into_iter()
            .filter(|id| q.admits(&bank.get(*id).expect("indexed").profile))
            .collect();
        cand_sum += candidates.len();
        if candidates.len() > EXACT_RANK_CUTOFF {
            hnsw_path += 1;
            let ef = bank.hnsw().params().ef_search.max(4 * cfg.k);
            let hits = bank.hnsw().search(&p.descriptor, ef, ef).map_err(StoreError::from)?;
            topped_up += usize::from(hits.iter().filter(|(id, _)| candidates.contains(id)).count() < cfg.k);
        }
        res_sum += hybrid.len();

        let got: HashSet<u64> = hybrid.iter().map(|(m, _)| m.id).collect();
        recall_sum += if oracle.is_empty() {
            1.0
        } else {
            oracle.iter().filter(|(m, _)| got.contains(&m.id)).count() as f64 / oracle.len() as f64
        };
        let ids = |v: &[(&Rsam, f32)]| v.iter().map(|(m, _)| m.id).collect::<Vec<_>>();
        exact += usize::from(ids(&hybrid) == ids(&oracle));
    }
    let nq = workload.probes.len() as f64;
    Ok(BenchReport {
        config: cfg.clone(),
        insert_time,
        hybrid: LatencySummary::from_samples(hybrid_t),
        brute: LatencySummary::from_samples(brute_t),
        recall_at_k: recall_sum / nq,
        exact_matches: exact,
        hnsw_path_probes: hnsw_path,
        topped_up_probes: topped_up,
        mean_candidates: cand_sum as f64 / nq,
        mean_results: res_sum as f64 / nq,
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, SimError> {
    cfg.validate()?;
    let workload = generate(cfg);
    let start = Instant::now();
    let bank = build_bank(cfg, &workload)?;
    let insert_time = start.elapsed();
    measure(cfg, &bank, &workload, insert_time)
}
