//! Committed replay caches must be exactly what their scripts produce.
//! Run with `MANGO_BLESS=1` to rewrite them after editing a script.

mod support;

use support::fixtures::*;

fn check_or_bless(fresh: &std::path::Path, committed: &std::path::Path) {
    if blessing() {
        if committed.exists() {
            std::fs::remove_dir_all(committed).unwrap();
        }
        std::fs::create_dir_all(committed).unwrap();
        for (name, bytes) in snapshot(fresh) {
            std::fs::write(committed.join(name), bytes).unwrap();
        }
        return;
    }
    let a = snapshot(fresh);
    let b = snapshot(committed);
    let only_fresh: Vec<_> = a.keys().filter(|k| !b.contains_key(*k)).collect();
    let only_committed: Vec<_> = b.keys().filter(|k| !a.contains_key(*k)).collect();
    assert!(
        only_fresh.is_empty() && only_committed.is_empty(),
        "cache keys differ: {} new, {} stale; rerun with MANGO_BLESS=1",
        only_fresh.len(),
        only_committed.len()
    );
    for (k, v) in &a {
        assert_eq!(v, &b[k], "cache entry {k} differs");
    }
}

#[test]
fn e2e_replay_cache_matches_script() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    run_e2e(&e2e_record_config(&dir.path().join("work"), &cache));
    check_or_bless(&cache, &fixture("e2e/replay"));
}

#[test]
fn tipping_replay_cache_matches_script() {
    let dir = tempfile::tempdir().unwrap();
    let gw = recording_gateway(&fixture("tipping/script.json"), dir.path());
    let (_, reps) = consolidate_tipping(&gw);
    assert!(reps.iter().all(|r| !r.fallback));
    check_or_bless(dir.path(), &fixture("tipping/replay"));
}
