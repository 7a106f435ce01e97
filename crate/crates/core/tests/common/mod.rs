#![allow(dead_code)]

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsam_core::clock::Timestamp;
use rsam_core::embed::{EmbeddingProvider, HashingEmbedder};
use rsam_core::recall::{FixtureLiveSource, RecallConfig};
use rsam_core::sim::{parse_trace, replay_frames, SessionStats, TraceFrame};
use rsam_core::store::{MemoryBank, NewMemory, ResponseSource, SpatialActivityProfile};

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

pub fn load_scenario(name: &str) -> Vec<TraceFrame> {
    let path = scenario_dir().join(format!("{name}.jsonl"));
    parse_trace(BufReader::new(File::open(&path).unwrap())).unwrap()
}

pub fn fixtures() -> FixtureLiveSource {
    FixtureLiveSource::new(scenario_dir().join("fixtures"))
}

pub fn provider() -> Arc<dyn EmbeddingProvider> {
    Arc::new(HashingEmbedder::default())
}

/// One resurfacing as printed by a replay: memory id, frame time, score.
#[derive(Debug, Clone, PartialEq)]
pub struct Recalled {
    pub id: u64,
    pub epoch_s: i64,
    pub score: f64,
}

/// Replays frames in memory and returns the recalls from the bank's log.
pub fn replay_scenario(frames: &[TraceFrame]) -> (MemoryBank, SessionStats, Vec<Recalled>) {
    let mut bank = MemoryBank::new(provider(), 42);
    let mut out = Vec::new();
    let stats = replay_frames(frames, &mut bank, &RecallConfig::default(), &fixtures(), &mut out).unwrap();
    let recalls = bank
        .events()
        .iter()
        .filter_map(|e| match e {
            rsam_core::store::Event::Recall { id, epoch_s, score, .. } => {
                Some(Recalled { id: *id, epoch_s: *epoch_s, score: *score })
            }
            _ => None,
        })
        .collect();
    (bank, stats, recalls)
}

/// Score of a recall at the memory's exact spot with identical scene and
/// activity text, `dt` seconds off in time of day (default window).
pub fn same_spot_score(dt: f64) -> f64 {
    (1.0 + (1.0 - dt / 5400.0) + 1.0) / 3.0
}

/// The expected recall sequence of each shipped scenario.
pub fn expected(name: &str) -> Vec<(u64, i64, f64)> {
    let frame_ts = |i: usize| load_scenario(name)[i].observation.ts.epoch_s();
    match name {
        // day 2 at 07:52, two minutes after the query
        "a1_weather" => vec![(1, frame_ts(2), same_spot_score(120.0))],
        // the low-confidence frame and the dishwashing frame stay silent
        "a2_papers" => vec![(1, frame_ts(3), same_spot_score(300.0)), (2, frame_ts(5), same_spot_score(300.0))],
        // day 3 at 18:05 is 5 minutes short of a full day since the last recall
        "a3_maintenance" => vec![(1, frame_ts(1), same_spot_score(600.0)), (1, frame_ts(3), same_spot_score(900.0))],
        other => panic!("unknown scenario {other}"),
    }
}

pub const SCENARIOS: [&str; 3] = ["a1_weather", "a2_papers", "a3_maintenance"];

pub fn matches_expected(name: &str, got: &[Recalled]) -> bool {
    let want = expected(name);
    want.len() == got.len()
        && want.iter().zip(got).all(|(w, g)| w.0 == g.id && w.1 == g.epoch_s && (w.2 - g.score).abs() < 1e-6)
}

pub const SCENES: [&str; 8] = [
    "house entrance hallway",
    "office workstation desk",
    "office coffee corner",
    "garage workbench",
    "kitchen counter",
    "living room sofa",
    "bus stop shelter",
    "supermarket aisle",
];
pub const ACTIVITIES: [&str; 6] = [
    "preparing to commute",
    "reading research papers",
    "taking a coffee break",
    "repairing a bicycle",
    "cooking dinner",
    "waiting for the bus",
];
pub const REFERENTS: [&str; 6] = ["door", "monitor", "coffee machine", "toolbox", "stove", "bus sign"];

/// A point within `half_m` metres of (47.6, -122.35), any time of one day.
pub fn random_profile(rng: &mut ChaCha8Rng, bank: &MemoryBank, half_m: f64) -> SpatialActivityProfile {
    let lat = 47.6 + rng.random_range(-half_m..half_m) / 111_320.0;
    let lon = -122.35 + rng.random_range(-half_m..half_m) / (111_320.0 * 47.6f64.to_radians().cos());
    let epoch = 1_780_272_000 + rng.random_range(0..86_400i64);
    SpatialActivityProfile::build(
        rsam_core::GeoPoint::new(lat, lon, 5.0).unwrap(),
        Timestamp::new(epoch, -420).unwrap(),
        SCENES[rng.random_range(0..SCENES.len())],
        ACTIVITIES[rng.random_range(0..ACTIVITIES.len())],
        bank.provider(),
    )
    .unwrap()
}

/// Adds `n` text-embedded memories; every memory is reproducible on reload.
pub fn fill_bank(bank: &mut MemoryBank, n: usize, half_m: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let p = random_profile(&mut rng, bank, half_m);
        let referent = REFERENTS[rng.random_range(0..REFERENTS.len())];
        bank.add_memory(NewMemory::new(referent, "what is this?", "an answer", ResponseSource::StaticKnowledge, p))
            .unwrap();
    }
}

pub fn ids(v: &[(&rsam_core::store::Rsam, f32)]) -> Vec<(u64, u32)> {
    v.iter().map(|(m, d)| (m.id, d.to_bits())).collect()
}
