use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mango_core::config::{BackendKind, PipelineConfig};
use mango_core::consolidate::{
    cluster_bucket, generate_representative, Bucket, DraftCluster, HacParams, RenderTemplate,
    RepresentativeOutcome,
};
use mango_core::embedding::Embedder;
use mango_core::gateway::{Gateway, ReplayStore, ScriptedBackend, StoreMode};
use mango_core::kb::{read_records, Assertion};
use mango_core::pipeline::{run_stage, Stage, StageInputs};

pub const STEP_2B: &str =
    "Tipping is not a common practice in Japan and can be considered rude or impolite.";

pub const E2E_STAGES: [Stage; 5] = [
    Stage::Generate,
    Stage::Filter,
    Stage::Consolidate,
    Stage::Index,
    Stage::Dialogue,
];

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(rel)
}

/// `MANGO_BLESS=1` rewrites committed replay caches instead of comparing.
pub fn blessing() -> bool {
    std::env::var_os("MANGO_BLESS").is_some_and(|v| v == "1")
}

/// The offline fixture config with outputs redirected to `work`.
pub fn e2e_replay_config(work: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&fixture("e2e/mango.toml")).unwrap();
    cfg.work_dir = work.to_path_buf();
    cfg
}

/// The recording config, writing its cache into `cache`.
pub fn e2e_record_config(work: &Path, cache: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&fixture("e2e/record.toml")).unwrap();
    assert_eq!(cfg.llm.backend, BackendKind::Scripted);
    cfg.work_dir = work.to_path_buf();
    cfg.llm.cache_dir = cache.to_path_buf();
    cfg
}

pub fn run_e2e(cfg: &PipelineConfig) -> Vec<String> {
    E2E_STAGES
        .iter()
        .map(|&s| run_stage(s, cfg, &StageInputs::default()).unwrap_or_else(|e| panic!("{e}")))
        .collect()
}

/// File name to contents, for every file directly inside `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                std::fs::read(entry.path()).unwrap(),
            );
        }
    }
    out
}

pub fn tipping_assertions() -> Vec<Assertion> {
    read_records(&fixture("tipping/assertions.jsonl")).unwrap()
}

pub fn tipping_bucket() -> Bucket {
    Bucket {
        id: "b00000".into(),
        concept_cluster_id: "concept-00000".into(),
        culture_cluster_id: "culture-00000".into(),
        assertions: tipping_assertions(),
    }
}

pub fn replay_gateway(cache: &Path) -> Gateway {
    Gateway::builder("gpt-3.5-turbo")
        .store(ReplayStore::open(cache, StoreMode::Replay).unwrap())
        .build()
}

pub fn recording_gateway(script: &Path, cache: &Path) -> Gateway {
    Gateway::builder("gpt-3.5-turbo")
        .backend(Arc::new(ScriptedBackend::from_file(script).unwrap()))
        .store(ReplayStore::open(cache, StoreMode::Record).unwrap())
        .build()
}

/// Step 2a on the tipping bucket followed by Step 2b for each cluster.
pub fn consolidate_tipping(gateway: &Gateway) -> (Vec<DraftCluster>, Vec<RepresentativeOutcome>) {
    let drafts = cluster_bucket(
        &tipping_bucket(),
        &Embedder::stub(),
        &HacParams::default(),
        &RenderTemplate::default(),
    )
    .unwrap();
    let reps = drafts
        .iter()
        .map(|d| generate_representative(d, gateway))
        .collect();
    (drafts, reps)
}
