mod common;

use std::sync::Arc;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsam_core::clock::Timestamp;
use rsam_core::embed::HashingEmbedder;
use rsam_core::sim::bank_stats;
use rsam_core::store::{MemoryBank, StoreError, LOG_FILE, MANIFEST_FILE};

fn populated(dir: &std::path::Path) -> MemoryBank {
    let mut bank = MemoryBank::create(dir, provider(), 7).unwrap();
    fill_bank(&mut bank, 400, 300.0, 11);
    for id in (1..=400).step_by(9) {
        bank.dismiss(id).unwrap();
    }
    bank.update_response(2, "revised answer").unwrap();
    bank.set_interval(3, 2.5).unwrap();
    let ts = bank.get(4).unwrap().created_at;
    bank.record_recall(
        4,
        Timestamp::new(ts.epoch_s() + 86_400, ts.tz_offset_min()).unwrap(),
        0.9,
        Some("fresh".into()),
    )
    .unwrap();
    bank
}

#[test]
fn reload_matches_original() {
    let dir = tempfile::tempdir().unwrap();
    let bank = populated(dir.path());
    let loaded = MemoryBank::load(dir.path(), provider()).unwrap();

    assert_eq!(loaded.len(), bank.len());
    assert_eq!(loaded.live_count(), bank.live_count());
    assert_eq!(loaded.events(), bank.events());
    assert_eq!(loaded.hnsw().structure_digest(), bank.hnsw().structure_digest());
    assert_eq!(bank_stats(loaded.events()), bank_stats(bank.events()));
    for (a, b) in bank.memories().zip(loaded.memories()) {
        assert_eq!(a, b);
    }
    loaded.check_consistency().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let p = random_profile(&mut rng, &bank, 300.0);
        let a = bank.candidate_retrieve(&p, 5, 120.0, 3_600).unwrap();
        let b = loaded.candidate_retrieve(&p, 5, 120.0, 3_600).unwrap();
        assert_eq!(ids(&a), ids(&b));
    }
}

#[test]
fn explicit_save_round_trips() {
    let mut bank = MemoryBank::new(provider(), 3);
    fill_bank(&mut bank, 50, 100.0, 1);
    bank.dismiss(5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bank.save(dir.path()).unwrap();
    let loaded = MemoryBank::load(dir.path(), provider()).unwrap();
    assert_eq!(loaded.events(), bank.events());
    assert_eq!(loaded.manifest(), bank.manifest());
}

#[test]
fn mutations_after_load_are_appended() {
    let dir = tempfile::tempdir().unwrap();
    drop(populated(dir.path()));
    let mut bank = MemoryBank::load(dir.path(), provider()).unwrap();
    bank.dismiss(2).unwrap();
    let again = MemoryBank::load(dir.path(), provider()).unwrap();
    assert!(again.get(2).unwrap().dismissed);
    assert_eq!(again.events().len(), bank.events().len());
}

#[test]
fn corrupt_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    drop(populated(dir.path()));
    let log = dir.path().join(LOG_FILE);
    let mut lines: Vec<String> = std::fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    lines[16] = "{\"ev\":\"ADD\",\"id\":".into();
    std::fs::write(&log, lines.join("\n")).unwrap();
    match MemoryBank::load(dir.path(), provider()) {
        Err(StoreError::CorruptLog { line, .. }) => assert_eq!(line, 17),
        other => panic!("{other:?}"),
    }
}

#[test]
fn semantically_invalid_event_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    drop(populated(dir.path()));
    let log = dir.path().join(LOG_FILE);
    let mut text = std::fs::read_to_string(&log).unwrap();
    let n = text.lines().count();
    // dismissing an unknown memory
    text.push_str("{\"ev\":\"DISMISS\",\"id\":999999}\n");
    std::fs::write(&log, text).unwrap();
    match MemoryBank::load(dir.path(), provider()) {
        Err(StoreError::CorruptLog { line, .. }) => assert_eq!(line, n + 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn manifest_checks() {
    let dir = tempfile::tempdir().unwrap();
    drop(MemoryBank::create(dir.path(), provider(), 1).unwrap());
    assert!(matches!(
        MemoryBank::load(dir.path(), Arc::new(HashingEmbedder::new(32))),
        Err(StoreError::DimensionMismatch { bank: 64, provider: 32 })
    ));
    let manifest = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).unwrap().replace("version=1", "version=9");
    std::fs::write(&manifest, text).unwrap();
    assert!(matches!(MemoryBank::load(dir.path(), provider()), Err(StoreError::VersionMismatch { found: 9 })));
    let missing = dir.path().join("nothing");
    assert!(matches!(MemoryBank::load(&missing, provider()), Err(StoreError::MissingBank(_))));
}

#[test]
fn create_refuses_existing_bank() {
    let dir = tempfile::tempdir().unwrap();
    drop(MemoryBank::create(dir.path(), provider(), 1).unwrap());
    assert!(MemoryBank::create(dir.path(), provider(), 1).is_err());
}
