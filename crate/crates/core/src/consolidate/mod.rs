//! Assertion consolidation.
//!
//! Clustering half a million assertions at once is out of reach for exact
//! HAC, so the work is divided: concepts are clustered, cultures are
//! clustered, and each (concept cluster, culture cluster) bucket of
//! assertions is clustered on its own. Multi-member clusters then get a
//! generated representative triple; cluster frequency is the sum of member
//! frequencies.

mod hac;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingError};
use crate::gateway::{CompletionRequest, Gateway};
use crate::generation::parse_json_loose;
use crate::kb::{
    canonical_key, total_frequency, Assertion, AssertionCluster, EntityCluster, EntityKind,
};

pub use hac::{groups, hac_ward, ward_linkage, Dendrogram, HacError, Merge};

#[derive(Debug, thiserror::Error)]
pub enum ConsolidateError {
    #[error(transparent)]
    Hac(#[from] HacError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("{kind:?} {entity:?} is not in any entity cluster")]
    Unmapped { kind: EntityKind, entity: String },
    #[error("cannot consolidate an empty bucket")]
    EmptyBucket,
    #[error("render template must contain {{statement}}: {0:?}")]
    BadTemplate(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Ward,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    EuclideanOnNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HacParams {
    pub linkage: Linkage,
    pub metric: Metric,
    pub distance_threshold: f64,
}

impl Default for HacParams {
    fn default() -> Self {
        HacParams {
            linkage: Linkage::Ward,
            metric: Metric::EuclideanOnNormalized,
            distance_threshold: 1.5,
        }
    }
}

/// Text embedded for an assertion; `{concept}`, `{culture}` and `{statement}`
/// are substituted with trimmed fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderTemplate(String);

impl Default for RenderTemplate {
    fn default() -> Self {
        RenderTemplate("{concept}: {statement}".into())
    }
}

impl RenderTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self, ConsolidateError> {
        let t = template.into();
        if !t.contains("{statement}") {
            return Err(ConsolidateError::BadTemplate(t));
        }
        Ok(RenderTemplate(t))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn render(&self, a: &Assertion) -> String {
        self.0
            .replace("{concept}", a.concept.trim())
            .replace("{culture}", a.culture.trim())
            .replace("{statement}", a.statement.trim())
    }
}

pub fn assertion_render_for_embedding(a: &Assertion) -> String {
    RenderTemplate::default().render(a)
}

/// Clusters entity strings (deduplicated by canonical key). The
/// representative is the member with the highest total assertion frequency,
/// then the shortest, then the lexicographically smallest.
pub fn cluster_entities(
    entities: &[String],
    kind: EntityKind,
    embedder: &Embedder,
    params: &HacParams,
    frequency: &HashMap<String, u64>,
) -> Result<Vec<EntityCluster>, ConsolidateError> {
    let mut seen = std::collections::HashSet::new();
    let unique: Vec<String> = entities
        .iter()
        .filter(|e| seen.insert(canonical_key(&[e.as_str()])))
        .cloned()
        .collect();
    if unique.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = embedder.embed_batch(&unique)?;
    let labels = hac_ward(&vectors, params.distance_threshold)?;
    let prefix = match kind {
        EntityKind::Concept => "concept",
        EntityKind::Culture => "culture",
    };
    Ok(groups(&labels)
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let members: Vec<String> = idx.iter().map(|&j| unique[j].clone()).collect();
            let representative = members
                .iter()
                .min_by(|x, y| {
                    let fx = frequency
                        .get(&canonical_key(&[x.as_str()]))
                        .copied()
                        .unwrap_or(0);
                    let fy = frequency
                        .get(&canonical_key(&[y.as_str()]))
                        .copied()
                        .unwrap_or(0);
                    fy.cmp(&fx)
                        .then(x.chars().count().cmp(&y.chars().count()))
                        .then(x.cmp(y))
                })
                .cloned()
                .expect("groups are non-empty");
            EntityCluster {
                id: format!("{prefix}-{i:05}"),
                kind,
                members,
                representative,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub id: String,
    pub concept_cluster_id: String,
    pub culture_cluster_id: String,
    pub assertions: Vec<Assertion>,
}

fn entity_index(clusters: &[EntityCluster]) -> HashMap<String, usize> {
    let mut map = HashMap::new();
    for (i, c) in clusters.iter().enumerate() {
        for m in &c.members {
            map.insert(canonical_key(&[m.as_str()]), i);
        }
    }
    map
}

/// Groups assertions by (concept cluster, culture cluster), ordered by cluster index.
pub fn partition_assertions(
    assertions: &[Assertion],
    concept_clusters: &[EntityCluster],
    culture_clusters: &[EntityCluster],
) -> Result<Vec<Bucket>, ConsolidateError> {
    let concepts = entity_index(concept_clusters);
    let cultures = entity_index(culture_clusters);
    let mut buckets: BTreeMap<(usize, usize), Vec<Assertion>> = BTreeMap::new();
    for a in assertions {
        let ci = *concepts.get(&canonical_key(&[&a.concept])).ok_or_else(|| {
            ConsolidateError::Unmapped {
                kind: EntityKind::Concept,
                entity: a.concept.clone(),
            }
        })?;
        let gi = *cultures.get(&canonical_key(&[&a.culture])).ok_or_else(|| {
            ConsolidateError::Unmapped {
                kind: EntityKind::Culture,
                entity: a.culture.clone(),
            }
        })?;
        buckets.entry((ci, gi)).or_default().push(a.clone());
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(n, ((ci, gi), assertions))| Bucket {
            id: format!("b{n:05}"),
            concept_cluster_id: concept_clusters[ci].id.clone(),
            culture_cluster_id: culture_clusters[gi].id.clone(),
            assertions,
        })
        .collect())
}

/// A cluster of assertions awaiting its representative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftCluster {
    pub id: String,
    pub members: Vec<Assertion>,
    pub frequency: u64,
}

pub fn cluster_bucket(
    bucket: &Bucket,
    embedder: &Embedder,
    params: &HacParams,
    template: &RenderTemplate,
) -> Result<Vec<DraftCluster>, ConsolidateError> {
    if bucket.assertions.is_empty() {
        return Err(ConsolidateError::EmptyBucket);
    }
    let texts: Vec<String> = bucket
        .assertions
        .iter()
        .map(|a| template.render(a))
        .collect();
    let vectors = embedder.embed_batch(&texts)?;
    let labels = hac_ward(&vectors, params.distance_threshold)?;
    Ok(groups(&labels)
        .into_iter()
        .enumerate()
        .map(|(k, idx)| {
            let members: Vec<Assertion> =
                idx.iter().map(|&i| bucket.assertions[i].clone()).collect();
            DraftCluster {
                id: format!("{}-{k:03}", bucket.id),
                frequency: total_frequency(&members),
                members,
            }
        })
        .collect())
}

pub const REPRESENTATIVE_SYSTEM: &str = "Respond with a JSON object of the form \
{\"concept\": \"...\", \"culture\": \"...\", \"statement\": \"...\"}, where the statement is one full sentence.";

fn field_text(s: &str) -> &str {
    s.trim().trim_end_matches('.').trim_end()
}

/// The member listing uses the `Concept: c. Culture: g. Statement: s. (Frequency: n)` layout.
pub fn representative_prompt(members: &[Assertion]) -> CompletionRequest {
    let mut user =
        String::from("Please generate a representative sentence for the following assertions:\n");
    for m in members {
        user.push_str(&format!(
            "- Concept: {}. Culture: {}. Statement: {}. (Frequency: {})\n",
            field_text(&m.concept),
            field_text(&m.culture),
            field_text(&m.statement),
            m.frequency
        ));
    }
    CompletionRequest::new(REPRESENTATIVE_SYSTEM, user.trim_end())
        .structured()
        .with_temperature(0.0)
}

/// Reads a representative triple from a JSON object or from
/// `Concept: ... Culture: ... Statement: ...` text.
pub fn parse_representative(raw: &str) -> Option<(String, String, String)> {
    if let Some(v) = parse_json_loose(raw) {
        if let Some(t) = find_triple(&v) {
            return Some(t);
        }
    }
    let ci = raw.find("Concept:")?;
    let gi = raw[ci..].find("Culture:")? + ci;
    let si = raw[gi..].find("Statement:")? + gi;
    let concept = field_text(&raw[ci + 8..gi]).to_string();
    let culture = field_text(&raw[gi + 8..si]).to_string();
    let mut statement = raw[si + 10..].trim();
    if let Some(p) = statement.rfind("(Frequency:") {
        statement = statement[..p].trim();
    }
    let statement = statement.to_string();
    (!concept.is_empty() && !culture.is_empty() && !statement.is_empty())
        .then_some((concept, culture, statement))
}

fn find_triple(v: &serde_json::Value) -> Option<(String, String, String)> {
    match v {
        serde_json::Value::Object(o) => {
            let get = |k: &str| {
                o.get(k)
                    .and_then(|x| x.as_str())
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
            };
            if let (Some(c), Some(g), Some(s)) = (get("concept"), get("culture"), get("statement"))
            {
                return Some((c.to_string(), g.to_string(), s.to_string()));
            }
            o.values().find_map(find_triple)
        }
        serde_json::Value::Array(a) => a.iter().find_map(find_triple),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepresentativeOutcome {
    pub cluster: AssertionCluster,
    /// The provider response could not be used; the top member stands in.
    pub fallback: bool,
    pub calls: u32,
}

fn finish(
    draft: &DraftCluster,
    (concept, culture, statement): (String, String, String),
) -> AssertionCluster {
    AssertionCluster {
        id: draft.id.clone(),
        concept,
        culture,
        statement,
        similar_statements: draft.members.iter().map(|m| m.statement.clone()).collect(),
        frequency: draft.frequency,
        members: draft.members.clone(),
    }
}

fn top_member(draft: &DraftCluster) -> (String, String, String) {
    // first member wins ties
    let best = draft
        .members
        .iter()
        .rev()
        .max_by_key(|m| m.frequency)
        .expect("draft clusters are non-empty");
    (
        best.concept.clone(),
        best.culture.clone(),
        best.statement.clone(),
    )
}

/// Singletons copy their member without a provider call. Otherwise the
/// provider is asked twice at most before falling back to the most frequent member.
pub fn generate_representative(draft: &DraftCluster, gateway: &Gateway) -> RepresentativeOutcome {
    if draft.members.len() == 1 {
        return RepresentativeOutcome {
            cluster: finish(draft, top_member(draft)),
            fallback: false,
            calls: 0,
        };
    }
    let base = representative_prompt(&draft.members);
    let mut calls = 0;
    for attempt in 0..2 {
        calls += 1;
        match gateway.complete(&base.clone().with_sample(attempt)) {
            Ok(raw) => {
                if let Some(t) = parse_representative(&raw) {
                    return RepresentativeOutcome {
                        cluster: finish(draft, t),
                        fallback: false,
                        calls,
                    };
                }
                tracing::warn!(cluster = %draft.id, "unparseable representative");
            }
            Err(e) => tracing::warn!(cluster = %draft.id, error = %e, "representative call failed"),
        }
    }
    RepresentativeOutcome {
        cluster: finish(draft, top_member(draft)),
        fallback: true,
        calls,
    }
}

#[derive(Debug, Default)]
pub struct Consolidation {
    /// Sorted by descending frequency, then id.
    pub clusters: Vec<AssertionCluster>,
    pub concept_clusters: Vec<EntityCluster>,
    pub culture_clusters: Vec<EntityCluster>,
    pub buckets: usize,
    pub largest_bucket: usize,
    pub fallback_ids: Vec<String>,
    pub failed_buckets: Vec<(String, String)>,
}

pub fn consolidate_all(
    assertions: &[Assertion],
    embedder: &Embedder,
    gateway: &Gateway,
    params: &HacParams,
    template: &RenderTemplate,
) -> Result<Consolidation, ConsolidateError> {
    let mut concept_freq: HashMap<String, u64> = HashMap::new();
    let mut culture_freq: HashMap<String, u64> = HashMap::new();
    let mut concepts = Vec::new();
    let mut cultures = Vec::new();
    for a in assertions {
        let ck = canonical_key(&[&a.concept]);
        if !concept_freq.contains_key(&ck) {
            concepts.push(a.concept.clone());
        }
        *concept_freq.entry(ck).or_default() += a.frequency;
        let gk = canonical_key(&[&a.culture]);
        if !culture_freq.contains_key(&gk) {
            cultures.push(a.culture.clone());
        }
        *culture_freq.entry(gk).or_default() += a.frequency;
    }
    let concept_clusters = cluster_entities(
        &concepts,
        EntityKind::Concept,
        embedder,
        params,
        &concept_freq,
    )?;
    let culture_clusters = cluster_entities(
        &cultures,
        EntityKind::Culture,
        embedder,
        params,
        &culture_freq,
    )?;
    let buckets = partition_assertions(assertions, &concept_clusters, &culture_clusters)?;

    let drafts: Vec<Result<Vec<DraftCluster>, (String, String)>> = buckets
        .par_iter()
        .map(|b| {
            cluster_bucket(b, embedder, params, template).map_err(|e| (b.id.clone(), e.to_string()))
        })
        .collect();
    let mut failed_buckets = Vec::new();
    let mut all_drafts = Vec::new();
    for d in drafts {
        match d {
            Ok(ds) => all_drafts.extend(ds),
            Err(f) => {
                tracing::warn!(bucket = %f.0, error = %f.1, "bucket failed");
                failed_buckets.push(f);
            }
        }
    }
    let outcomes: Vec<RepresentativeOutcome> = all_drafts
        .par_iter()
        .map(|d| generate_representative(d, gateway))
        .collect();
    let fallback_ids = outcomes
        .iter()
        .filter(|o| o.fallback)
        .map(|o| o.cluster.id.clone())
        .collect();
    let mut clusters: Vec<AssertionCluster> = outcomes.into_iter().map(|o| o.cluster).collect();
    sort_kb(&mut clusters);
    Ok(Consolidation {
        clusters,
        largest_bucket: buckets
            .iter()
            .map(|b| b.assertions.len())
            .max()
            .unwrap_or(0),
        buckets: buckets.len(),
        concept_clusters,
        culture_clusters,
        fallback_ids,
        failed_buckets,
    })
}

pub fn sort_kb(clusters: &mut [AssertionCluster]) {
    clusters.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.id.cmp(&b.id)));
}

/// The `n` most frequent clusters.
pub fn top_n(clusters: &[AssertionCluster], n: usize) -> Vec<AssertionCluster> {
    let mut sorted = clusters.to_vec();
    sort_kb(&mut sorted);
    sorted.truncate(n);
    sorted
}
