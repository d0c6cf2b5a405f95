//! Stage runner with file-based hand-off inside the configured work
//! directory. Every output is written atomically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::{ConfigError, DialogueTask, ModeSelection, PipelineConfig};
use crate::consolidate::consolidate_all;
use crate::dialogue::{
    export_eval_bundle, full_dialogue, generate_narratives, next_utterance, seed_dialogue,
    write_eval_bundle, Dialogue, DialogueMode, Knowledge, MethodOutput, Narrative, Outcome, Turn,
    UtteranceResult,
};
use crate::filtering::{apply_filters, clean_seed_concepts, CultureBlocklist, RejectReason};
use crate::gateway::{Gateway, UsageLedger};
use crate::generation::run_generation;
use crate::kb::{
    read_records, total_frequency, write_atomic, write_records, AssertionCluster, EntityKind,
    SeedSet,
};
use crate::retrieval::{retrieve, Hit, RetrievalIndex};

pub mod files {
    pub const ASSERTIONS_RAW: &str = "assertions.raw.jsonl";
    pub const GENERATION_LOG: &str = "generation.log.jsonl";
    pub const SEEDS_DROPPED: &str = "seeds.dropped.txt";
    pub const ASSERTIONS_FILTERED: &str = "assertions.filtered.jsonl";
    pub const REJECTIONS: &str = "rejections.jsonl";
    pub const KB: &str = "kb.jsonl";
    pub const KB_TOP: &str = "kb.top.jsonl";
    pub const CONCEPT_CLUSTERS: &str = "concept_clusters.jsonl";
    pub const CULTURE_CLUSTERS: &str = "culture_clusters.jsonl";
    pub const INDEX: &str = "index.bin";
    pub const NARRATIVES: &str = "narratives.jsonl";
    pub const SEED_DIALOGUES: &str = "seed_dialogues.jsonl";
    pub const UTTERANCES: &str = "utterances.jsonl";
    pub const DIALOGUES: &str = "dialogues.jsonl";
    pub const NO_CCSK: &str = "no_ccsk.txt";
    pub const BUNDLE: &str = "eval_bundle.jsonl";
    pub const BUNDLE_KEY: &str = "eval_bundle.key.jsonl";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Filter,
    Consolidate,
    Index,
    Retrieve,
    Dialogue,
    Stats,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Filter => "filter",
            Stage::Consolidate => "consolidate",
            Stage::Index => "index",
            Stage::Retrieve => "retrieve",
            Stage::Dialogue => "dialogue",
            Stage::Stats => "stats",
        }
    }

    fn stats_file(self) -> String {
        format!("{}.stats.json", self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("{stage}: missing input {path} (run an earlier stage first)")]
    MissingInput { stage: &'static str, path: PathBuf },
    #[error("{stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

impl PipelineError {
    /// 1 for stage failures, 2 for configuration problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Per-invocation inputs that are not part of the config file.
#[derive(Debug, Clone, Default)]
pub struct StageInputs {
    /// Narrative JSON (`id`, `text`, `participants`) for `retrieve`.
    pub narrative: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateStats {
    pub concepts_prompted: usize,
    pub cultures_prompted: usize,
    pub concept_assertions: usize,
    pub culture_assertions: usize,
    pub unique_assertions: usize,
    pub iterations: u32,
    pub failed_calls: usize,
    pub seeds_dropped: usize,
    pub ledger: UsageLedger,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub input_frequency: u64,
    pub kept: usize,
    pub kept_frequency: u64,
    pub rejected: BTreeMap<RejectReason, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsolidateStats {
    pub input: usize,
    pub input_frequency: u64,
    pub clusters: usize,
    pub cluster_frequency: u64,
    pub concept_clusters: usize,
    pub culture_clusters: usize,
    pub buckets: usize,
    pub largest_bucket: usize,
    pub fallback_representatives: usize,
    pub failed_buckets: usize,
    pub ledger: UsageLedger,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub entries: usize,
    pub identity: String,
    pub dimension: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueStats {
    pub narratives: usize,
    pub seeded: usize,
    pub vanilla_outputs: usize,
    pub ccsk_outputs: usize,
    pub no_ccsk: usize,
    pub bundle_items: usize,
    pub ledger: UsageLedger,
}

struct Ctx<'a> {
    stage: Stage,
    cfg: &'a PipelineConfig,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.work_dir.join(name)
    }

    fn input(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::MissingInput {
                stage: self.stage.name(),
                path: p,
            })
        }
    }

    fn fail(&self, e: impl std::fmt::Display) -> PipelineError {
        PipelineError::Stage {
            stage: self.stage.name(),
            message: e.to_string(),
        }
    }

    fn write_stats<T: Serialize>(&self, stats: &T) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(stats).map_err(|e| self.fail(e))?;
        bytes.push(b'\n');
        write_atomic(&self.path(&self.stage.stats_file()), &bytes).map_err(|e| self.fail(e))
    }

    fn gateway(&self) -> Result<Gateway, PipelineError> {
        Ok(self.cfg.build_gateway()?)
    }
}

/// Runs one stage and returns a human-readable summary.
pub fn run_stage(
    stage: Stage,
    cfg: &PipelineConfig,
    inputs: &StageInputs,
) -> Result<String, PipelineError> {
    cfg.validate()?;
    let ctx = Ctx { stage, cfg };
    if stage != Stage::Stats && stage != Stage::Retrieve {
        std::fs::create_dir_all(&cfg.work_dir)
            .map_err(|e| ctx.fail(format!("{}: {e}", cfg.work_dir.display())))?;
    }
    match stage {
        Stage::Generate => generate(&ctx),
        Stage::Filter => filter(&ctx),
        Stage::Consolidate => consolidate(&ctx),
        Stage::Index => index(&ctx),
        Stage::Retrieve => retrieve_stage(&ctx, inputs),
        Stage::Dialogue => dialogue(&ctx),
        Stage::Stats => stats(&ctx),
    }
}

fn generate(ctx: &Ctx) -> Result<String, PipelineError> {
    let cfg = ctx.cfg;
    let concepts = SeedSet::read_list(&cfg.seeds.concepts).map_err(|e| ctx.fail(e))?;
    let cultures = SeedSet::read_list(&cfg.seeds.cultures).map_err(|e| ctx.fail(e))?;
    let gateway = ctx.gateway()?;
    let (concepts, dropped) = if cfg.seeds.clean {
        let c = clean_seed_concepts(&concepts, &gateway, cfg.seeds.clean_batch_size);
        (c.kept, c.dropped)
    } else {
        (concepts, Vec::new())
    };
    let seeds = SeedSet::new(concepts, cultures);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let out =
        run_generation(&seeds, &cfg.generation, &gateway, &mut rng).map_err(|e| ctx.fail(e))?;

    write_records(&ctx.path(files::ASSERTIONS_RAW), &out.assertions).map_err(|e| ctx.fail(e))?;
    write_records(&ctx.path(files::GENERATION_LOG), &out.log).map_err(|e| ctx.fail(e))?;
    let mut dropped_text = dropped.join("\n");
    if !dropped_text.is_empty() {
        dropped_text.push('\n');
    }
    write_atomic(&ctx.path(files::SEEDS_DROPPED), dropped_text.as_bytes())
        .map_err(|e| ctx.fail(e))?;

    let count = |kind| -> usize {
        out.log
            .iter()
            .filter(|r| r.entry_kind == kind)
            .map(|r| r.parsed.len())
            .sum()
    };
    let stats = GenerateStats {
        concepts_prompted: out.prompted.iter().map(|p| p.0).sum(),
        cultures_prompted: out.prompted.iter().map(|p| p.1).sum(),
        concept_assertions: count(EntityKind::Concept),
        culture_assertions: count(EntityKind::Culture),
        unique_assertions: out.assertions.len(),
        iterations: cfg.generation.iterations,
        failed_calls: out.log.iter().filter(|r| r.error.is_some()).count(),
        seeds_dropped: dropped.len(),
        ledger: gateway.ledger(),
    };
    ctx.write_stats(&stats)?;
    Ok(format!(
        "generate: {} concept and {} culture prompts -> {} unique assertions ({} calls failed)",
        stats.concepts_prompted,
        stats.cultures_prompted,
        stats.unique_assertions,
        stats.failed_calls
    ))
}

fn filter(ctx: &Ctx) -> Result<String, PipelineError> {
    let input = ctx.input(files::ASSERTIONS_RAW)?;
    let assertions = read_records(&input).map_err(|e| ctx.fail(e))?;
    let blocklist = match &ctx.cfg.blocklist {
        Some(p) => {
            CultureBlocklist::load(p).map_err(|e| ctx.fail(format!("{}: {e}", p.display())))?
        }
        None => CultureBlocklist::default(),
    };
    let input_len = assertions.len();
    let input_frequency = total_frequency(&assertions);
    let report = apply_filters(assertions, &blocklist);
    write_records(&ctx.path(files::ASSERTIONS_FILTERED), &report.kept).map_err(|e| ctx.fail(e))?;
    write_records(&ctx.path(files::REJECTIONS), &report.rejected).map_err(|e| ctx.fail(e))?;
    let stats = FilterStats {
        input: input_len,
        input_frequency,
        kept: report.kept.len(),
        kept_frequency: total_frequency(&report.kept),
        rejected: report.counts.into_iter().collect(),
    };
    ctx.write_stats(&stats)?;
    Ok(format!(
        "filter: {} -> {} assertions kept",
        stats.input, stats.kept
    ))
}

fn consolidate(ctx: &Ctx) -> Result<String, PipelineError> {
    let input = ctx.input(files::ASSERTIONS_FILTERED)?;
    let assertions = read_records(&input).map_err(|e| ctx.fail(e))?;
    let embedder = ctx.cfg.build_embedder()?;
    let gateway = ctx.gateway()?;
    let c = consolidate_all(
        &assertions,
        &embedder,
        &gateway,
        &ctx.cfg.consolidation.hac(),
        &ctx.cfg.render_template(),
    )
    .map_err(|e| ctx.fail(e))?;
    if let Some((bucket, message)) = c.failed_buckets.first() {
        return Err(ctx.fail(format!("bucket {bucket} failed: {message}")));
    }
    write_records(&ctx.path(files::KB), &c.clusters).map_err(|e| ctx.fail(e))?;
    write_records(&ctx.path(files::CONCEPT_CLUSTERS), &c.concept_clusters)
        .map_err(|e| ctx.fail(e))?;
    write_records(&ctx.path(files::CULTURE_CLUSTERS), &c.culture_clusters)
        .map_err(|e| ctx.fail(e))?;
    if let Some(n) = ctx.cfg.consolidation.top_n {
        let top: Vec<&AssertionCluster> = c.clusters.iter().take(n).collect();
        write_records(&ctx.path(files::KB_TOP), &top).map_err(|e| ctx.fail(e))?;
    }
    let stats = ConsolidateStats {
        input: assertions.len(),
        input_frequency: total_frequency(&assertions),
        clusters: c.clusters.len(),
        cluster_frequency: c.clusters.iter().map(|k| k.frequency).sum(),
        concept_clusters: c.concept_clusters.len(),
        culture_clusters: c.culture_clusters.len(),
        buckets: c.buckets,
        largest_bucket: c.largest_bucket,
        fallback_representatives: c.fallback_ids.len(),
        failed_buckets: c.failed_buckets.len(),
        ledger: gateway.ledger(),
    };
    ctx.write_stats(&stats)?;
    Ok(format!(
        "consolidate: {} assertions -> {} clusters in {} buckets ({} fallback representatives)",
        stats.input, stats.clusters, stats.buckets, stats.fallback_representatives
    ))
}

fn index(ctx: &Ctx) -> Result<String, PipelineError> {
    let input = ctx.input(files::KB)?;
    let kb: Vec<AssertionCluster> = read_records(&input).map_err(|e| ctx.fail(e))?;
    let embedder = ctx.cfg.build_embedder()?;
    let index = RetrievalIndex::build(&kb, &embedder).map_err(|e| ctx.fail(e))?;
    index
        .save(&ctx.path(files::INDEX))
        .map_err(|e| ctx.fail(e))?;
    let stats = IndexStats {
        entries: index.len(),
        identity: index.identity.clone(),
        dimension: index.dimension,
    };
    ctx.write_stats(&stats)?;
    Ok(format!(
        "index: {} entries embedded with {}",
        stats.entries, stats.identity
    ))
}

fn load_index(ctx: &Ctx) -> Result<(RetrievalIndex, crate::embedding::Embedder), PipelineError> {
    let path = ctx.input(files::INDEX)?;
    let embedder = ctx.cfg.build_embedder()?;
    let index = RetrievalIndex::load(&path, &embedder).map_err(|e| ctx.fail(e))?;
    Ok((index, embedder))
}

fn retrieve_stage(ctx: &Ctx, inputs: &StageInputs) -> Result<String, PipelineError> {
    let path = inputs
        .narrative
        .as_ref()
        .ok_or_else(|| ctx.fail("--narrative is required"))?;
    let text =
        std::fs::read_to_string(path).map_err(|e| ctx.fail(format!("{}: {e}", path.display())))?;
    let narrative: Narrative =
        serde_json::from_str(&text).map_err(|e| ctx.fail(format!("{}: {e}", path.display())))?;
    narrative
        .validate()
        .map_err(|e| ctx.fail(format!("{}: {e}", path.display())))?;
    let (index, embedder) = load_index(ctx)?;
    let hits: Vec<Hit> = retrieve(
        &narrative.text,
        narrative.names(),
        &index,
        &embedder,
        &ctx.cfg.retrieval,
    )
    .map_err(|e| ctx.fail(e))?;
    let mut out = String::new();
    for h in &hits {
        writeln!(out, "{}", serde_json::to_string(h).expect("serializable")).unwrap();
    }
    if hits.is_empty() {
        out.push_str("no assertion above the similarity floor\n");
    }
    Ok(out.trim_end().to_string())
}

fn transcript(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("{}: {}", t.speaker, t.utterance))
        .collect::<Vec<_>>()
        .join("\n")
}

fn modes(sel: ModeSelection) -> Vec<DialogueMode> {
    match sel {
        ModeSelection::Vanilla => vec![DialogueMode::Vanilla],
        ModeSelection::Ccsk => vec![DialogueMode::CcskAugmented],
        ModeSelection::Both => vec![DialogueMode::Vanilla, DialogueMode::CcskAugmented],
    }
}

/// One item's outputs keyed by mode; `None` marks a no-knowledge skip.
type ItemOutputs = Vec<(DialogueMode, Option<MethodOutput>)>;
type FullOutcomes = Vec<(DialogueMode, Option<Outcome<Dialogue>>, String)>;

fn dialogue(ctx: &Ctx) -> Result<String, PipelineError> {
    let cfg = &ctx.cfg.dialogue;
    let modes = modes(cfg.mode);
    let loaded = if modes.contains(&DialogueMode::CcskAugmented) {
        Some(load_index(ctx)?)
    } else {
        None
    };
    let knowledge = loaded.as_ref().map(|(index, embedder)| Knowledge {
        index,
        embedder,
        params: ctx.cfg.retrieval,
    });
    let gateway = ctx.gateway()?;
    let narratives = generate_narratives(cfg.n, &gateway);
    write_records(&ctx.path(files::NARRATIVES), &narratives).map_err(|e| ctx.fail(e))?;

    let mut stats = DialogueStats {
        narratives: narratives.len(),
        ..Default::default()
    };
    let items: Vec<ItemOutputs> = match cfg.task {
        DialogueTask::Utterance => {
            let seeds: Vec<(&Narrative, Dialogue)> = narratives
                .par_iter()
                .map(|n| seed_dialogue(n, &gateway).map(|d| d.map(|d| (n, d))))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ctx.fail(e))?
                .into_iter()
                .flatten()
                .collect();
            let seed_records: Vec<&Dialogue> = seeds.iter().map(|(_, d)| d).collect();
            write_records(&ctx.path(files::SEED_DIALOGUES), &seed_records)
                .map_err(|e| ctx.fail(e))?;
            stats.seeded = seeds.len();

            let results: Vec<Vec<(DialogueMode, Outcome<UtteranceResult>, String)>> = seeds
                .par_iter()
                .map(|(n, seed)| {
                    let context = format!("{}\n\n{}", n.text, transcript(&seed.turns));
                    modes
                        .iter()
                        .map(|&m| {
                            next_utterance(n, &seed.turns, m, knowledge.as_ref(), &gateway)
                                .map(|o| (m, o, context.clone()))
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ctx.fail(e))?;
            let done: Vec<&UtteranceResult> = results
                .iter()
                .flatten()
                .filter_map(|(_, o, _)| match o {
                    Outcome::Done(r) => Some(r),
                    Outcome::NoCcsk => None,
                })
                .collect();
            write_records(&ctx.path(files::UTTERANCES), &done).map_err(|e| ctx.fail(e))?;
            results
                .into_iter()
                .map(|item| {
                    item.into_iter()
                        .map(|(m, o, context)| {
                            let out = match o {
                                Outcome::Done(r) => Some(MethodOutput {
                                    item_id: r.narrative_id.clone(),
                                    method: m,
                                    context,
                                    output: format!("{}: {}", r.speaker, r.utterance),
                                }),
                                Outcome::NoCcsk => None,
                            };
                            (m, out)
                        })
                        .collect()
                })
                .collect()
        }
        DialogueTask::Full => {
            let results: Vec<FullOutcomes> = narratives
                .par_iter()
                .map(|n| {
                    modes
                        .iter()
                        .map(|&m| {
                            full_dialogue(n, m, knowledge.as_ref(), &gateway, cfg.turn_cap)
                                .map(|o| (m, o, n.text.clone()))
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ctx.fail(e))?;
            let done: Vec<&Dialogue> = results
                .iter()
                .flatten()
                .filter_map(|(_, o, _)| match o {
                    Some(Outcome::Done(d)) => Some(d),
                    _ => None,
                })
                .collect();
            write_records(&ctx.path(files::DIALOGUES), &done).map_err(|e| ctx.fail(e))?;
            results
                .into_iter()
                .map(|item| {
                    item.into_iter()
                        .filter_map(|(m, o, context)| match o {
                            // unparseable output: nothing to compare
                            None => None,
                            Some(Outcome::NoCcsk) => Some((m, None)),
                            Some(Outcome::Done(d)) => Some((
                                m,
                                Some(MethodOutput {
                                    item_id: d.narrative_id.clone(),
                                    method: m,
                                    context,
                                    output: transcript(&d.turns),
                                }),
                            )),
                        })
                        .collect()
                })
                .collect()
        }
    };

    let mut no_ccsk = Vec::new();
    let mut pairs = Vec::new();
    for item in &items {
        let mut vanilla = None;
        let mut augmented = None;
        for (m, out) in item {
            match (m, out) {
                (DialogueMode::Vanilla, Some(o)) => {
                    stats.vanilla_outputs += 1;
                    vanilla = Some(o.clone());
                }
                (DialogueMode::CcskAugmented, Some(o)) => {
                    stats.ccsk_outputs += 1;
                    augmented = Some(o.clone());
                }
                (DialogueMode::CcskAugmented, None) => {
                    if let Some(id) = item
                        .iter()
                        .find_map(|(_, o)| o.as_ref().map(|o| o.item_id.clone()))
                    {
                        no_ccsk.push(id);
                    }
                    stats.no_ccsk += 1;
                }
                (DialogueMode::Vanilla, None) => {}
            }
        }
        if let (Some(v), Some(a)) = (vanilla, augmented) {
            pairs.push((v, a));
        }
    }
    let mut no_ccsk_text = no_ccsk.join("\n");
    if !no_ccsk_text.is_empty() {
        no_ccsk_text.push('\n');
    }
    write_atomic(&ctx.path(files::NO_CCSK), no_ccsk_text.as_bytes()).map_err(|e| ctx.fail(e))?;

    if cfg.mode == ModeSelection::Both {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.rng_seed);
        rng.set_stream(1);
        let bundle = export_eval_bundle(&pairs, &mut rng).map_err(|e| ctx.fail(e))?;
        write_eval_bundle(&bundle, &ctx.path(files::BUNDLE)).map_err(|e| ctx.fail(e))?;
        stats.bundle_items = bundle.items.len();
    }
    stats.ledger = gateway.ledger();
    ctx.write_stats(&stats)?;
    Ok(format!(
        "dialogue: {} narratives, {} vanilla and {} augmented outputs, {} without knowledge, {} bundle items",
        stats.narratives, stats.vanilla_outputs, stats.ccsk_outputs, stats.no_ccsk, stats.bundle_items
    ))
}

fn read_stats<T: DeserializeOwned>(ctx: &Ctx, stage: Stage) -> Option<T> {
    let text = std::fs::read_to_string(ctx.path(&stage.stats_file())).ok()?;
    serde_json::from_str(&text).ok()
}

fn or_dash(v: Option<String>) -> String {
    v.unwrap_or_else(|| "-".to_string())
}

/// Input/output counts per step, from the stats files of earlier stages.
pub fn stats_table(work_dir: &Path) -> String {
    let cfg = PipelineConfig {
        work_dir: work_dir.to_path_buf(),
        ..Default::default()
    };
    let ctx = Ctx {
        stage: Stage::Stats,
        cfg: &cfg,
    };
    let g: Option<GenerateStats> = read_stats(&ctx, Stage::Generate);
    let c: Option<ConsolidateStats> = read_stats(&ctx, Stage::Consolidate);
    let runs = g
        .as_ref()
        .map(|g| format!(" ({} runs)", g.iterations))
        .unwrap_or_default();
    let rows = [
        (
            format!("Step 1a{runs}"),
            or_dash(
                g.as_ref()
                    .map(|g| format!("{} concepts", g.concepts_prompted)),
            ),
            or_dash(
                g.as_ref()
                    .map(|g| format!("{} assertions", g.concept_assertions)),
            ),
        ),
        (
            format!("Step 1b{runs}"),
            or_dash(
                g.as_ref()
                    .map(|g| format!("{} cultures", g.cultures_prompted)),
            ),
            or_dash(
                g.as_ref()
                    .map(|g| format!("{} assertions", g.culture_assertions)),
            ),
        ),
        (
            "Step 2a".to_string(),
            or_dash(
                c.as_ref()
                    .map(|c| format!("{} filtered assertions", c.input_frequency)),
            ),
            or_dash(
                c.as_ref()
                    .map(|c| format!("{} assertion clusters", c.clusters)),
            ),
        ),
        (
            "Step 2b".to_string(),
            or_dash(
                c.as_ref()
                    .map(|c| format!("{} assertion clusters", c.clusters)),
            ),
            or_dash(
                c.as_ref()
                    .map(|c| format!("{} full CCSK sentences", c.clusters)),
            ),
        ),
    ];
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap().max(4);
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap().max(5);
    let mut out = format!("{:w0$}  {:w1$}  Output\n", "Step", "Input");
    for (a, b, c) in &rows {
        writeln!(out, "{a:w0$}  {b:w1$}  {c}").unwrap();
    }
    if let Some(c) = &c {
        if c.fallback_representatives > 0 {
            writeln!(
                out,
                "({} representatives fell back to a member statement)",
                c.fallback_representatives
            )
            .unwrap();
        }
    }
    out.trim_end().to_string()
}

fn stats(ctx: &Ctx) -> Result<String, PipelineError> {
    if !ctx.cfg.work_dir.exists() {
        return Err(PipelineError::MissingInput {
            stage: Stage::Stats.name(),
            path: ctx.cfg.work_dir.clone(),
        });
    }
    Ok(stats_table(&ctx.cfg.work_dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let c = PipelineError::Config(ConfigError {
            key: "k".into(),
            message: "m".into(),
        });
        assert_eq!(c.exit_code(), 2);
        let m = PipelineError::MissingInput {
            stage: "filter",
            path: "x".into(),
        };
        assert_eq!(m.exit_code(), 1);
    }

    #[test]
    fn missing_input_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            work_dir: dir.path().join("work"),
            ..Default::default()
        };
        let err = run_stage(Stage::Filter, &cfg, &StageInputs::default()).unwrap_err();
        assert!(err.to_string().contains(files::ASSERTIONS_RAW), "{err}");
        let err = run_stage(Stage::Index, &cfg, &StageInputs::default()).unwrap_err();
        assert!(err.to_string().contains(files::KB));
    }

    #[test]
    fn stats_without_outputs_prints_dashes() {
        let dir = tempfile::tempdir().unwrap();
        let t = stats_table(dir.path());
        assert_eq!(t.lines().count(), 5);
        assert!(t.lines().nth(1).unwrap().starts_with("Step 1a"));
        assert!(t.contains(" -"));
    }
}
