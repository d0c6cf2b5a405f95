//! Intercultural dialogue tasks: narrative generation, dialogue seeding,
//! next-utterance and full-dialogue generation with or without retrieved
//! knowledge, and blind A/B evaluation bundles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::Embedder;
use crate::filtering::sentence_count;
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::generation::parse_json_loose;
use crate::kb::{canonical_key, write_records, KbError, Record};
use crate::retrieval::{
    anonymize_narrative, retrieve, RetrievalError, RetrievalIndex, RetrievalParams,
};

pub const NARRATIVES_PER_CALL: usize = 3;
pub const MAX_NARRATIVE_SENTENCES: usize = 5;
pub const SEED_TURNS: usize = 3;
pub const DEFAULT_TURN_CAP: usize = 12;

pub const NARRATIVE_PROMPT: &str = "You are a narrative generator. Your task is to generate short narratives of less than 5 sentences around a cultural concept that involves two people from two different cultures. The narrative should lead to an intercultural interaction where cultural differences play a significant role. You must not include the cultural differences, or cultural knowledge, or the resolution, or the consequences of the situation in the narrative.

Some examples:
- Anna, an American, is visiting a village in Vietnam where Minh is a local. Anna asks Minh where she can get food for her dog.
- Erling from Norway is visiting Seoul. He and his new friend, Heungmin, are picking foods for their dinner at a traditional restaurant.
- Liz and Qiang are two friends, who are currently in England. Qiang is from China who is visiting the country. Liz is a local. They are preparing tea together.

Please write 3 more narratives:";

pub const EXTRACTION_SYSTEM: &str =
    "You identify the people in short stories. Answer with JSON only.";

pub const UTTERANCE_TASK: &str = "Two people from different cultures are talking in the situation described below. Write the next utterance of the indicated speaker. Reply with the utterance only, without the speaker's name.";

pub const FULL_DIALOGUE_TASK: &str = "Two people from different cultures meet in the situation described below. Write a full dialogue between them, one turn per line in the form \"Name: utterance\".";

pub const KNOWLEDGE_HEADER: &str = "Relevant cultural knowledge:";

pub const EVAL_DIMENSIONS: [&str; 5] = [
    "Naturalness",
    "Consistency",
    "Specificity",
    "Cultural Sensitivity",
    "Overall Quality",
];

pub const EVAL_OPTIONS: [&str; 3] = ["A", "B", "Tie"];

#[derive(Debug, thiserror::Error)]
pub enum DialogueError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("augmented mode needs a retrieval index")]
    MissingIndex,
    #[error("dialogue history is empty")]
    EmptyHistory,
    #[error("speaker {speaker:?} is not a participant of narrative {narrative}")]
    UnknownSpeaker { narrative: String, speaker: String },
    #[error("mismatched evaluation pair: {0}")]
    MismatchedPair(String),
    #[error("no answer-key entry for item {0}")]
    MissingKey(String),
    #[error(transparent)]
    Kb(#[from] KbError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Participant {
    pub name: String,
    pub culture: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Narrative {
    pub id: String,
    pub text: String,
    pub participants: Vec<Participant>,
}

impl Narrative {
    pub fn validate(&self) -> Result<(), String> {
        if self.participants.len() != 2 {
            return Err(format!(
                "{} participants, expected 2",
                self.participants.len()
            ));
        }
        let (a, b) = (&self.participants[0], &self.participants[1]);
        if a.name.trim().is_empty() || b.name.trim().is_empty() {
            return Err("empty participant name".into());
        }
        if canonical_key(&[&a.name]) == canonical_key(&[&b.name]) {
            return Err("participants share a name".into());
        }
        if canonical_key(&[&a.culture]) == canonical_key(&[&b.culture]) {
            return Err(format!("both participants are {}", a.culture));
        }
        let n = sentence_count(&self.text);
        if n == 0 || n > MAX_NARRATIVE_SENTENCES {
            return Err(format!("{n} sentences"));
        }
        let anon = anonymize_narrative(&self.text, &a.name, &b.name);
        if !anon.missing.is_empty() {
            return Err(format!("name not in text: {}", anon.missing.join(", ")));
        }
        Ok(())
    }

    pub fn names(&self) -> (&str, &str) {
        (&self.participants[0].name, &self.participants[1].name)
    }

    fn participant(&self, label: &str) -> Option<&str> {
        let key = canonical_key(&[label]);
        self.participants
            .iter()
            .find(|p| canonical_key(&[&p.name]) == key)
            .map(|p| p.name.as_str())
    }

    fn other(&self, name: &str) -> &str {
        let (a, b) = self.names();
        if a == name {
            b
        } else {
            a
        }
    }
}

impl Record for Narrative {
    fn check(&self) -> Result<(), KbError> {
        self.validate().map_err(KbError::Invalid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub speaker: String,
    pub utterance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueMode {
    Vanilla,
    CcskAugmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialogue {
    pub narrative_id: String,
    pub turns: Vec<Turn>,
    pub mode: DialogueMode,
    pub injected_ccsk: Vec<String>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<(), String> {
        if self.turns.is_empty() {
            return Err("no turns".into());
        }
        if let Some(w) = self.turns.windows(2).find(|w| w[0].speaker == w[1].speaker) {
            return Err(format!("{} speaks twice in a row", w[0].speaker));
        }
        if self.mode == DialogueMode::Vanilla && !self.injected_ccsk.is_empty() {
            return Err("vanilla dialogue lists injected knowledge".into());
        }
        Ok(())
    }
}

impl Record for Dialogue {
    fn check(&self) -> Result<(), KbError> {
        self.validate().map_err(KbError::Invalid)
    }
}

/// Retrieval setup used by augmented prompts.
#[derive(Clone, Copy)]
pub struct Knowledge<'a> {
    pub index: &'a RetrievalIndex,
    pub embedder: &'a Embedder,
    pub params: RetrievalParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome<T> {
    Done(T),
    /// Augmented mode found nothing above the similarity floor.
    NoCcsk,
}

/// Lines starting with '-' (or '*' / '•'), with the marker removed.
pub fn parse_dash_lines(raw: &str) -> Vec<String> {
    raw.lines()
        .filter_map(|l| {
            let l = l.trim();
            l.strip_prefix(['-', '*', '\u{2022}'])
                .map(|rest| rest.trim().to_string())
                .filter(|s| !s.is_empty())
        })
        .collect()
}

pub fn narrative_request(call: u32) -> CompletionRequest {
    CompletionRequest::new("", NARRATIVE_PROMPT).with_sample(call)
}

pub fn extraction_request(text: &str) -> CompletionRequest {
    let user = format!(
        "Narrative: {text}\n\nName the two people in this narrative and the culture each of them comes from. \
         Answer as {{\"participants\": [{{\"name\": \"...\", \"culture\": \"...\"}}, {{\"name\": \"...\", \"culture\": \"...\"}}]}}."
    );
    CompletionRequest::new(EXTRACTION_SYSTEM, user)
        .structured()
        .with_temperature(0.0)
}

pub fn parse_participants(raw: &str) -> Option<Vec<Participant>> {
    let value = parse_json_loose(raw)?;
    let list = match &value {
        Value::Object(m) => m.get("participants")?.as_array()?,
        Value::Array(a) => a,
        _ => return None,
    };
    list.iter()
        .map(|p| {
            let name = p.get("name")?.as_str()?.trim();
            let culture = p.get("culture")?.as_str()?.trim();
            (!name.is_empty() && !culture.is_empty()).then(|| Participant {
                name: name.to_string(),
                culture: culture.to_string(),
            })
        })
        .collect()
}

/// Up to `n` valid narratives from `ceil(n / 3)` generation calls, each
/// followed by one participant-extraction call per narrative.
pub fn generate_narratives(n: usize, gateway: &Gateway) -> Vec<Narrative> {
    let calls = n.div_ceil(NARRATIVES_PER_CALL);
    let texts: Vec<String> = (0..calls as u32)
        .into_par_iter()
        .map(|call| match gateway.complete(&narrative_request(call)) {
            Ok(raw) => parse_dash_lines(&raw),
            Err(e) => {
                tracing::warn!(call, error = %e, "narrative generation failed");
                Vec::new()
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let extracted: Vec<Option<Narrative>> = texts
        .par_iter()
        .enumerate()
        .map(|(i, text)| {
            let raw = match gateway.complete(&extraction_request(text)) {
                Ok(raw) => raw,
                Err(e) => {
                    tracing::warn!(item = i, error = %e, "participant extraction failed");
                    return None;
                }
            };
            let Some(participants) = parse_participants(&raw) else {
                tracing::warn!(item = i, "unparseable participant list");
                return None;
            };
            let narrative = Narrative {
                id: String::new(),
                text: text.clone(),
                participants,
            };
            match narrative.validate() {
                Ok(()) => Some(narrative),
                Err(reason) => {
                    tracing::warn!(item = i, %reason, "narrative discarded");
                    None
                }
            }
        })
        .collect();

    extracted
        .into_iter()
        .flatten()
        .take(n)
        .enumerate()
        .map(|(i, mut nar)| {
            nar.id = format!("n{i:05}");
            nar
        })
        .collect()
}

/// Parses "Name: utterance" lines, tolerating list markers and bold labels.
/// Lines without a label are ignored; consecutive lines by the same speaker
/// are joined. Errors on a label that is not a participant.
pub fn parse_turns(raw: &str, narrative: &Narrative) -> Result<Vec<Turn>, DialogueError> {
    let mut turns: Vec<Turn> = Vec::new();
    for line in raw.lines() {
        let line = line
            .trim()
            .trim_start_matches(['-', '*', '\u{2022}'])
            .trim_start();
        let Some((label, rest)) = line.split_once(':') else {
            continue;
        };
        let label = label.trim().trim_matches('*').trim();
        let utterance = rest.trim().trim_start_matches('*').trim();
        if label.is_empty() || utterance.is_empty() {
            continue;
        }
        let Some(speaker) = narrative.participant(label) else {
            return Err(DialogueError::UnknownSpeaker {
                narrative: narrative.id.clone(),
                speaker: label.to_string(),
            });
        };
        match turns.last_mut() {
            Some(last) if last.speaker == speaker => {
                last.utterance.push(' ');
                last.utterance.push_str(utterance);
            }
            _ => turns.push(Turn {
                speaker: speaker.to_string(),
                utterance: utterance.to_string(),
            }),
        }
    }
    Ok(turns)
}

pub fn seed_request(narrative: &Narrative) -> CompletionRequest {
    let (a, b) = narrative.names();
    let user = format!(
        "Narrative: {}\n\nPlease generate a possible dialogue between {a} and {b} in this situation. \
         Write one turn per line in the form \"Name: utterance\".",
        narrative.text
    );
    CompletionRequest::new("", user)
}

/// The first three turns of a generated dialogue, or `None` when the
/// output has an unknown speaker or fewer than three turns.
pub fn seed_dialogue(
    narrative: &Narrative,
    gateway: &Gateway,
) -> Result<Option<Dialogue>, DialogueError> {
    let raw = gateway.complete(&seed_request(narrative))?;
    let turns = match parse_turns(&raw, narrative) {
        Ok(t) if t.len() >= SEED_TURNS => t,
        Ok(t) => {
            tracing::warn!(narrative = %narrative.id, turns = t.len(), "too few turns for a seed");
            return Ok(None);
        }
        Err(e) => {
            tracing::warn!(narrative = %narrative.id, error = %e, "seed dialogue skipped");
            return Ok(None);
        }
    };
    Ok(Some(Dialogue {
        narrative_id: narrative.id.clone(),
        turns: turns.into_iter().take(SEED_TURNS).collect(),
        mode: DialogueMode::Vanilla,
        injected_ccsk: Vec::new(),
    }))
}

fn knowledge_block(statements: &[String]) -> String {
    if statements.is_empty() {
        return String::new();
    }
    let mut s = format!("{KNOWLEDGE_HEADER}\n");
    for st in statements {
        s.push_str(&format!("- {st}\n"));
    }
    s.push('\n');
    s
}

/// Next-utterance prompt. With no statements this is the vanilla prompt.
pub fn utterance_request(
    narrative: &Narrative,
    history: &[Turn],
    speaker: &str,
    statements: &[String],
) -> CompletionRequest {
    let mut user = format!("{UTTERANCE_TASK}\n\nNarrative: {}\n\n", narrative.text);
    user.push_str(&knowledge_block(statements));
    user.push_str("Dialogue history:\n");
    for t in history {
        user.push_str(&format!("{}: {}\n", t.speaker, t.utterance));
    }
    user.push_str(&format!("\nNext speaker: {speaker}"));
    CompletionRequest::new("", user)
}

/// Full-dialogue prompt. With no statements this is the vanilla prompt.
pub fn full_dialogue_request(
    narrative: &Narrative,
    turn_cap: usize,
    statements: &[String],
) -> CompletionRequest {
    let mut user = format!("{FULL_DIALOGUE_TASK}\n\nNarrative: {}\n\n", narrative.text);
    user.push_str(&knowledge_block(statements));
    let p = &narrative.participants;
    user.push_str(&format!(
        "Participants: {} ({}), {} ({})\nUse at most {turn_cap} turns.",
        p[0].name, p[0].culture, p[1].name, p[1].culture
    ));
    CompletionRequest::new("", user)
}

/// Retrieved statements and their cluster ids.
type Gathered = (Vec<String>, Vec<String>);

fn gather(
    narrative: &Narrative,
    mode: DialogueMode,
    knowledge: Option<&Knowledge>,
) -> Result<Option<Gathered>, DialogueError> {
    match mode {
        DialogueMode::Vanilla => Ok(Some((Vec::new(), Vec::new()))),
        DialogueMode::CcskAugmented => {
            let k = knowledge.ok_or(DialogueError::MissingIndex)?;
            let hits = retrieve(
                &narrative.text,
                narrative.names(),
                k.index,
                k.embedder,
                &k.params,
            )?;
            if hits.is_empty() {
                return Ok(None);
            }
            Ok(Some(
                hits.into_iter()
                    .map(|h| (h.statement, h.cluster_id))
                    .unzip(),
            ))
        }
    }
}

fn clean_utterance(raw: &str, speaker: &str) -> String {
    let first = raw
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let body = first.trim_start_matches('*');
    let body = body
        .strip_prefix(speaker)
        .and_then(|r| r.trim_start_matches('*').strip_prefix(':'))
        .unwrap_or(first);
    body.trim()
        .trim_start_matches('*')
        .trim()
        .trim_matches('"')
        .trim()
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub narrative_id: String,
    pub mode: DialogueMode,
    pub speaker: String,
    pub utterance: String,
    pub injected_ccsk: Vec<String>,
}

/// Generates the reply of whichever participant did not speak last.
pub fn next_utterance(
    narrative: &Narrative,
    history: &[Turn],
    mode: DialogueMode,
    knowledge: Option<&Knowledge>,
    gateway: &Gateway,
) -> Result<Outcome<UtteranceResult>, DialogueError> {
    let last = history.last().ok_or(DialogueError::EmptyHistory)?;
    let last =
        narrative
            .participant(&last.speaker)
            .ok_or_else(|| DialogueError::UnknownSpeaker {
                narrative: narrative.id.clone(),
                speaker: last.speaker.clone(),
            })?;
    let speaker = narrative.other(last).to_string();
    let Some((statements, ids)) = gather(narrative, mode, knowledge)? else {
        return Ok(Outcome::NoCcsk);
    };
    let raw = gateway.complete(&utterance_request(
        narrative,
        history,
        &speaker,
        &statements,
    ))?;
    Ok(Outcome::Done(UtteranceResult {
        narrative_id: narrative.id.clone(),
        mode,
        utterance: clean_utterance(&raw, &speaker),
        speaker,
        injected_ccsk: ids,
    }))
}

/// A complete conversation, truncated to `turn_cap` turns. `Ok(None)` when
/// the output has an unknown speaker or no turns.
pub fn full_dialogue(
    narrative: &Narrative,
    mode: DialogueMode,
    knowledge: Option<&Knowledge>,
    gateway: &Gateway,
    turn_cap: usize,
) -> Result<Option<Outcome<Dialogue>>, DialogueError> {
    let Some((statements, ids)) = gather(narrative, mode, knowledge)? else {
        return Ok(Some(Outcome::NoCcsk));
    };
    let raw = gateway.complete(&full_dialogue_request(narrative, turn_cap, &statements))?;
    let mut turns = match parse_turns(&raw, narrative) {
        Ok(t) if !t.is_empty() => t,
        Ok(_) => return Ok(None),
        Err(e) => {
            tracing::warn!(narrative = %narrative.id, error = %e, "full dialogue skipped");
            return Ok(None);
        }
    };
    turns.truncate(turn_cap);
    Ok(Some(Outcome::Done(Dialogue {
        narrative_id: narrative.id.clone(),
        turns,
        mode,
        injected_ccsk: ids,
    })))
}

/// One method's output for one evaluation item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodOutput {
    pub item_id: String,
    pub method: DialogueMode,
    pub context: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleItem {
    pub item_id: String,
    pub context: String,
    pub output_a: String,
    pub output_b: String,
    pub dimensions: Vec<String>,
    pub options: Vec<String>,
}

impl Record for BundleItem {
    fn check(&self) -> Result<(), KbError> {
        if self.item_id.is_empty() {
            return Err(KbError::EmptyField { field: "item_id" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyEntry {
    pub item_id: String,
    pub a: DialogueMode,
    pub b: DialogueMode,
}

impl Record for KeyEntry {
    fn check(&self) -> Result<(), KbError> {
        if self.a == self.b {
            return Err(KbError::Invalid(format!(
                "item {} maps A and B to one method",
                self.item_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalBundle {
    pub items: Vec<BundleItem>,
    pub key: Vec<KeyEntry>,
}

/// Assigns each pair's outputs to A/B by an independent fair coin flip.
pub fn export_eval_bundle<R: Rng + ?Sized>(
    pairs: &[(MethodOutput, MethodOutput)],
    rng: &mut R,
) -> Result<EvalBundle, DialogueError> {
    let mut items = Vec::with_capacity(pairs.len());
    let mut key = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        if x.item_id != y.item_id {
            return Err(DialogueError::MismatchedPair(format!(
                "{} vs {}",
                x.item_id, y.item_id
            )));
        }
        if x.method == y.method {
            return Err(DialogueError::MismatchedPair(format!(
                "{}: both outputs from one method",
                x.item_id
            )));
        }
        if x.context != y.context {
            return Err(DialogueError::MismatchedPair(format!(
                "{}: inputs differ",
                x.item_id
            )));
        }
        let (a, b) = if rng.random_bool(0.5) { (x, y) } else { (y, x) };
        items.push(BundleItem {
            item_id: x.item_id.clone(),
            context: x.context.clone(),
            output_a: a.output.clone(),
            output_b: b.output.clone(),
            dimensions: EVAL_DIMENSIONS.map(String::from).to_vec(),
            options: EVAL_OPTIONS.map(String::from).to_vec(),
        });
        key.push(KeyEntry {
            item_id: x.item_id.clone(),
            a: a.method,
            b: b.method,
        });
    }
    Ok(EvalBundle { items, key })
}

/// Answer key lives next to the bundle: `bundle.jsonl` -> `bundle.key.jsonl`.
pub fn key_path(bundle_path: &Path) -> PathBuf {
    let stem = bundle_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("bundle");
    bundle_path.with_file_name(format!("{stem}.key.jsonl"))
}

pub fn write_eval_bundle(bundle: &EvalBundle, path: &Path) -> Result<(), DialogueError> {
    write_records(path, &bundle.items)?;
    write_records(&key_path(path), &bundle.key)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Judgment {
    pub item_id: String,
    pub dimension: String,
    pub choice: Choice,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Preferences {
    pub vanilla: u64,
    pub ccsk_augmented: u64,
    pub tie: u64,
}

/// Joins judgments with the answer key into per-dimension method counts.
pub fn tally(
    judgments: &[Judgment],
    key: &[KeyEntry],
) -> Result<BTreeMap<String, Preferences>, DialogueError> {
    let by_id: BTreeMap<&str, &KeyEntry> = key.iter().map(|k| (k.item_id.as_str(), k)).collect();
    let mut out: BTreeMap<String, Preferences> = BTreeMap::new();
    for j in judgments {
        let k = by_id
            .get(j.item_id.as_str())
            .ok_or_else(|| DialogueError::MissingKey(j.item_id.clone()))?;
        let slot = out.entry(j.dimension.clone()).or_default();
        let method = match j.choice {
            Choice::A => Some(k.a),
            Choice::B => Some(k.b),
            Choice::Tie => None,
        };
        match method {
            Some(DialogueMode::Vanilla) => slot.vanilla += 1,
            Some(DialogueMode::CcskAugmented) => slot.ccsk_augmented += 1,
            None => slot.tie += 1,
        }
    }
    Ok(out)
}
