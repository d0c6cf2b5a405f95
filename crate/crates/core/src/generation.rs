//! Assertion generation from concept and culture entry points.
//!
//! Each prompt shows a handful of contrastive example pairs drawn from a
//! small human-written pool and asks for assertions about one concept, or
//! assertions in which one of the cultures is a given group. Every prompt is
//! sampled several times at high temperature. Entities discovered in one
//! iteration seed the next: cultures found by concept prompts are prompted
//! as cultures, concepts found by culture prompts are prompted as concepts.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::gateway::{CompletionRequest, Gateway};
use crate::kb::{merge_duplicates, Assertion, EntityKind, SeedSet};

const DEFAULT_POOL: &str = include_str!("../data/example_pool.txt");

pub const PREAMBLE: &str =
    "You are a helpful assistant that writes culture-specific commonsense assertions.";

/// Format instruction sent as the system message of generation prompts.
pub const FORMAT_INSTRUCTION: &str = "Structure your response as a JSON object of the form \
{\"assertions\": [{\"concept\": \"...\", \"views\": [{\"culture\": \"...\", \"statement\": \"...\"}, \
{\"culture\": \"...\", \"statement\": \"...\"}]}]}, where the two views describe contrasting cultures.";

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("cannot sample {k} examples from a pool of {pool}")]
    PoolTooSmall { k: usize, pool: usize },
    #[error("{0} must not be empty")]
    EmptyEntry(&'static str),
    #[error("example pool line {line}: {message}")]
    BadExample { line: usize, message: String },
    #[error("output is not a JSON object or array: {raw}")]
    Unparseable { raw: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub concept: String,
    /// Culture and statement, e.g. "Important in US, Germany".
    pub view_a: String,
    /// The contrasting culture and statement.
    pub view_b: String,
}

impl FewShotExample {
    pub fn line(&self) -> String {
        format!("* {} | {} | {}", self.concept, self.view_a, self.view_b)
    }
}

/// Parses `concept | view_a | view_b` lines; `#` comments and blank lines are skipped.
pub fn parse_example_pool(text: &str) -> Result<Vec<FewShotExample>, GenerationError> {
    let mut pool = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: &str| GenerationError::BadExample {
            line: i + 1,
            message: message.to_string(),
        };
        let parts: Vec<&str> = line.split('|').map(str::trim).collect();
        if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
            return Err(bad("expected three non-empty fields separated by '|'"));
        }
        if parts[1] == parts[2] {
            return Err(bad("the two views must differ"));
        }
        pool.push(FewShotExample {
            concept: parts[0].into(),
            view_a: parts[1].into(),
            view_b: parts[2].into(),
        });
    }
    Ok(pool)
}

pub fn default_example_pool() -> Vec<FewShotExample> {
    parse_example_pool(DEFAULT_POOL).expect("bundled example pool is well-formed")
}

pub fn load_example_pool(path: &Path) -> Result<Vec<FewShotExample>, GenerationError> {
    let text = std::fs::read_to_string(path).map_err(|e| GenerationError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_example_pool(&text)
}

/// `k` distinct examples drawn uniformly without replacement.
pub fn sample_examples<R: Rng + ?Sized>(
    pool: &[FewShotExample],
    k: usize,
    rng: &mut R,
) -> Result<Vec<FewShotExample>, GenerationError> {
    if k > pool.len() {
        return Err(GenerationError::PoolTooSmall {
            k,
            pool: pool.len(),
        });
    }
    Ok(sample_indices(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

fn entry_prompt(examples: &[FewShotExample], closing: String) -> CompletionRequest {
    let mut user = format!("{PREAMBLE} Some examples assertions are listed below:\n");
    for ex in examples {
        user.push_str(&ex.line());
        user.push('\n');
    }
    user.push_str(&closing);
    CompletionRequest::new(FORMAT_INSTRUCTION, user).structured()
}

pub fn build_concept_prompt(
    concept: &str,
    examples: &[FewShotExample],
) -> Result<CompletionRequest, GenerationError> {
    let concept = concept.trim();
    if concept.is_empty() {
        return Err(GenerationError::EmptyEntry("concept"));
    }
    Ok(entry_prompt(
        examples,
        format!("Please write assertions for the concept: {concept}."),
    ))
}

pub fn build_culture_prompt(
    culture: &str,
    examples: &[FewShotExample],
) -> Result<CompletionRequest, GenerationError> {
    let culture = culture.trim();
    if culture.is_empty() {
        return Err(GenerationError::EmptyEntry("culture"));
    }
    Ok(entry_prompt(
        examples,
        format!("Please write assertions where one of the cultures is: {culture}."),
    ))
}

/// Removes a surrounding markdown code fence, if any.
pub fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.split_once('\n').map_or("", |(_, body)| body);
        return rest.trim_end().strip_suffix("```").unwrap_or(rest).trim();
    }
    t
}

/// Parses a JSON value out of provider output, tolerating code fences and
/// prose around a single top-level object.
pub fn parse_json_loose(raw: &str) -> Option<Value> {
    let body = strip_code_fence(raw);
    if let Ok(v) = serde_json::from_str::<Value>(body) {
        if v.is_object() || v.is_array() {
            return Some(v);
        }
    }
    let start = body.find(['{', '['])?;
    let end = body.rfind(['}', ']'])?;
    (end > start)
        .then(|| serde_json::from_str::<Value>(&body[start..=end]).ok())
        .flatten()
        .filter(|v| v.is_object() || v.is_array())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    pub assertions: Vec<Assertion>,
    /// Entries that named a culture or statement but could not be completed.
    pub skipped: usize,
}

/// Extracts (concept, culture, statement) triples from any object/array
/// layout. A `concept` field applies to everything nested under it; paired
/// fields such as `culture_a`/`statement_a` are matched by suffix.
pub fn parse_generation_output(raw: &str) -> Result<ParsedOutput, GenerationError> {
    let value = parse_json_loose(raw).ok_or_else(|| GenerationError::Unparseable {
        raw: raw.to_string(),
    })?;
    let mut out = ParsedOutput::default();
    walk(&value, None, &mut out);
    Ok(out)
}

fn text_field<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
    obj.get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

fn walk(value: &Value, concept: Option<&str>, out: &mut ParsedOutput) {
    match value {
        Value::Array(items) => items.iter().for_each(|v| walk(v, concept, out)),
        Value::Object(obj) => {
            let concept = text_field(obj, "concept").or(concept);
            // suffix -> (culture, statement)
            let mut pairs: Vec<(String, Option<&Value>, Option<&Value>)> = Vec::new();
            for (k, v) in obj {
                let lower = k.to_lowercase();
                let (suffix, is_culture) = if let Some(s) = lower.strip_prefix("culture") {
                    (s.to_string(), true)
                } else if let Some(s) = lower.strip_prefix("statement") {
                    (s.to_string(), false)
                } else {
                    continue;
                };
                if v.is_object() || v.is_array() {
                    continue;
                }
                let slot = match pairs.iter_mut().find(|(s, _, _)| *s == suffix) {
                    Some(slot) => slot,
                    None => {
                        pairs.push((suffix, None, None));
                        pairs.last_mut().unwrap()
                    }
                };
                if is_culture {
                    slot.1 = Some(v);
                } else {
                    slot.2 = Some(v);
                }
            }
            pairs.sort_by(|a, b| a.0.cmp(&b.0));
            for (_, culture, statement) in pairs {
                let culture = culture.and_then(Value::as_str);
                let statement = statement.and_then(Value::as_str);
                match (concept, culture, statement) {
                    (Some(c), Some(g), Some(s)) => match Assertion::new(c, g, s) {
                        Ok(a) => out.assertions.push(a),
                        Err(_) => out.skipped += 1,
                    },
                    _ => out.skipped += 1,
                }
            }
            for (k, v) in obj {
                let lower = k.to_lowercase();
                if (v.is_object() || v.is_array())
                    || !(lower.starts_with("culture") || lower.starts_with("statement"))
                {
                    walk(v, concept, out);
                }
            }
        }
        _ => {}
    }
}

/// Entities in `assertions` whose canonical keys are not in `known`, in
/// first-appearance order.
pub fn extract_new_entities(
    assertions: &[Assertion],
    known: &SeedSet,
) -> (Vec<String>, Vec<String>) {
    let mut fresh = SeedSet::default();
    let (mut concepts, mut cultures) = (Vec::new(), Vec::new());
    for a in assertions {
        if !known.has_concept(&a.concept) && fresh.add_concept(&a.concept) {
            concepts.push(a.concept.clone());
        }
        if !known.has_culture(&a.culture) && fresh.add_culture(&a.culture) {
            cultures.push(a.culture.clone());
        }
    }
    (concepts, cultures)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub samples_per_prompt: u32,
    pub temperature: f64,
    pub examples_per_prompt: usize,
    pub iterations: u32,
    #[serde(skip, default = "default_example_pool")]
    pub example_pool: Vec<FewShotExample>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            samples_per_prompt: 5,
            temperature: 1.0,
            examples_per_prompt: 5,
            iterations: 2,
            example_pool: default_example_pool(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub id: String,
    pub entry_kind: EntityKind,
    pub entry_value: String,
    pub iteration: u32,
    pub sample_index: u32,
    pub raw_output: String,
    pub parsed: Vec<Assertion>,
    #[serde(default)]
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationOutput {
    /// Parsed assertions merged by canonical key.
    pub assertions: Vec<Assertion>,
    pub log: Vec<GenerationRecord>,
    /// Entities prompted per iteration: (concepts, cultures).
    pub prompted: Vec<(usize, usize)>,
}

struct Call {
    kind: EntityKind,
    entry_index: usize,
    value: String,
    sample: u32,
    request: Result<CompletionRequest, GenerationError>,
}

pub fn run_generation<R: Rng + ?Sized>(
    seeds: &SeedSet,
    config: &GenerationConfig,
    gateway: &Gateway,
    rng: &mut R,
) -> Result<GenerationOutput, GenerationError> {
    if config.examples_per_prompt > config.example_pool.len() {
        return Err(GenerationError::PoolTooSmall {
            k: config.examples_per_prompt,
            pool: config.example_pool.len(),
        });
    }
    let mut known = seeds.clone();
    let mut concepts: Vec<String> = seeds.concepts().to_vec();
    let mut cultures: Vec<String> = seeds.cultures().to_vec();
    let mut out = GenerationOutput::default();

    for iteration in 1..=config.iterations {
        if concepts.is_empty() && cultures.is_empty() {
            break;
        }
        out.prompted.push((concepts.len(), cultures.len()));
        let mut calls = Vec::new();
        let entries = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (EntityKind::Concept, i, c))
            .chain(
                cultures
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (EntityKind::Culture, i, g)),
            );
        for (kind, entry_index, value) in entries {
            for sample in 0..config.samples_per_prompt {
                let examples =
                    sample_examples(&config.example_pool, config.examples_per_prompt, rng)?;
                let request = match kind {
                    EntityKind::Concept => build_concept_prompt(value, &examples),
                    EntityKind::Culture => build_culture_prompt(value, &examples),
                }
                .map(|r| r.with_temperature(config.temperature).with_sample(sample));
                calls.push(Call {
                    kind,
                    entry_index,
                    value: value.clone(),
                    sample,
                    request,
                });
            }
        }

        let records: Vec<GenerationRecord> = calls
            .par_iter()
            .map(|call| execute(call, iteration, gateway))
            .collect();

        let mut from_concepts = Vec::new();
        let mut from_cultures = Vec::new();
        for r in &records {
            match r.entry_kind {
                EntityKind::Concept => from_concepts.extend(r.parsed.iter().cloned()),
                EntityKind::Culture => from_cultures.extend(r.parsed.iter().cloned()),
            }
        }
        out.log.extend(records);

        for c in &concepts {
            known.add_concept(c);
        }
        for g in &cultures {
            known.add_culture(g);
        }
        let (_, new_cultures) = extract_new_entities(&from_concepts, &known);
        let (new_concepts, _) = extract_new_entities(&from_cultures, &known);
        for g in &new_cultures {
            known.add_culture(g);
        }
        for c in &new_concepts {
            known.add_concept(c);
        }
        concepts = new_concepts;
        cultures = new_cultures;
    }

    out.assertions = merge_duplicates(out.log.iter().flat_map(|r| r.parsed.iter().cloned()));
    Ok(out)
}

fn execute(call: &Call, iteration: u32, gateway: &Gateway) -> GenerationRecord {
    let kind = match call.kind {
        EntityKind::Concept => "concept",
        EntityKind::Culture => "culture",
    };
    let id = format!(
        "g{iteration}-{kind}-{:05}-s{}",
        call.entry_index, call.sample
    );
    let mut record = GenerationRecord {
        id: id.clone(),
        entry_kind: call.kind,
        entry_value: call.value.clone(),
        iteration,
        sample_index: call.sample,
        raw_output: String::new(),
        parsed: Vec::new(),
        skipped: 0,
        error: None,
    };
    let request = match &call.request {
        Ok(r) => r,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    match gateway.complete(request) {
        Ok(raw) => {
            match parse_generation_output(&raw) {
                Ok(parsed) => {
                    record.parsed = parsed
                        .assertions
                        .into_iter()
                        .map(|a| a.with_provenance(id.clone()))
                        .collect();
                    record.skipped = parsed.skipped;
                }
                Err(e) => {
                    tracing::warn!(id = %id, "unparseable generation output");
                    record.error = Some(e.to_string());
                }
            }
            record.raw_output = raw;
        }
        Err(e) => {
            tracing::warn!(id = %id, error = %e, "generation prompt failed");
            record.error = Some(e.to_string());
        }
    }
    record
}
