//! Seed-concept cleaning and the assertion filters: statement length, single
//! sentence, and a culture blocklist.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway};
use crate::kb::{canonical_key, Assertion};

pub const MIN_WORDS: usize = 2;
pub const MAX_WORDS: usize = 25;

const DEFAULT_BLOCKLIST: &str = include_str!("../data/blocklist.txt");

const ABBREVIATIONS: &[&str] = &[
    "u.s.", "u.s.a.", "u.k.", "e.g.", "i.e.", "etc.", "vs.", "mr.", "mrs.", "ms.", "dr.", "st.",
    "jr.", "sr.", "a.m.", "p.m.", "no.", "approx.", "ca.",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum TokenMatch {
    /// Case-insensitive, bounded by non-alphanumerics on both sides.
    Word,
    /// Case-insensitive raw substring.
    Substring,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CultureBlocklist {
    tokens: Vec<(String, TokenMatch)>,
}

impl Default for CultureBlocklist {
    fn default() -> Self {
        Self::parse(DEFAULT_BLOCKLIST)
    }
}

impl CultureBlocklist {
    /// One token per line; blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Self {
        let tokens = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| {
                let tok = l.trim().to_lowercase();
                let word_like = tok.chars().next().is_some_and(char::is_alphanumeric)
                    && tok.chars().last().is_some_and(char::is_alphanumeric);
                let kind = if word_like {
                    TokenMatch::Word
                } else {
                    TokenMatch::Substring
                };
                (tok, kind)
            })
            .collect();
        CultureBlocklist { tokens }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let text: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        Self::parse(&text.join("\n"))
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|(t, _)| t.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// First blocklist token (in list order) that the culture contains.
    pub fn first_match(&self, culture: &str) -> Option<&str> {
        let hay = culture
            .to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        self.tokens
            .iter()
            .find(|(tok, kind)| match kind {
                TokenMatch::Substring => hay.contains(tok.as_str()),
                TokenMatch::Word => contains_word(&hay, tok),
            })
            .map(|(t, _)| t.as_str())
    }
}

fn contains_word(hay: &str, word: &str) -> bool {
    hay.match_indices(word).any(|(i, _)| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + word.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

pub fn statement_word_count(statement: &str) -> usize {
    statement.split_whitespace().count()
}

/// Number of sentences, splitting after '.', '!' or '?' when followed by
/// whitespace and a letter, unless the terminated word is a known abbreviation.
pub fn sentence_count(text: &str) -> usize {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return 0;
    }
    let mut count = 1;
    for pair in words.windows(2) {
        let (word, next) = (pair[0], pair[1]);
        let ends = word
            .trim_end_matches(['"', '\'', ')', '\u{201d}', '\u{2019}'])
            .ends_with(['.', '!', '?']);
        let next_is_letter = next
            .trim_start_matches(['"', '\'', '(', '\u{201c}', '\u{2018}'])
            .chars()
            .next()
            .is_some_and(char::is_alphabetic);
        if ends && next_is_letter && !is_abbreviation(word) {
            count += 1;
        }
    }
    count
}

fn is_abbreviation(word: &str) -> bool {
    let w = word.to_lowercase();
    let w = w.trim_start_matches(['"', '\'', '(']);
    ABBREVIATIONS.contains(&w)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooShort,
    TooLong,
    MultiSentence,
    CultureBlocklist,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterVerdict {
    Pass,
    /// The first failing check; `token` is set for blocklist rejections.
    Fail {
        reason: RejectReason,
        token: Option<String>,
    },
}

impl FilterVerdict {
    fn fail(reason: RejectReason) -> Self {
        FilterVerdict::Fail {
            reason,
            token: None,
        }
    }
}

pub fn passes_filters(assertion: &Assertion, blocklist: &CultureBlocklist) -> FilterVerdict {
    let words = statement_word_count(&assertion.statement);
    if words < MIN_WORDS {
        return FilterVerdict::fail(RejectReason::TooShort);
    }
    if words > MAX_WORDS {
        return FilterVerdict::fail(RejectReason::TooLong);
    }
    if sentence_count(&assertion.statement) >= 2 {
        return FilterVerdict::fail(RejectReason::MultiSentence);
    }
    if let Some(tok) = blocklist.first_match(&assertion.culture) {
        return FilterVerdict::Fail {
            reason: RejectReason::CultureBlocklist,
            token: Some(tok.to_string()),
        };
    }
    FilterVerdict::Pass
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub assertion: Assertion,
    pub reason: RejectReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub kept: Vec<Assertion>,
    pub rejected: Vec<Rejection>,
    pub counts: HashMap<RejectReason, usize>,
}

pub fn apply_filters(assertions: Vec<Assertion>, blocklist: &CultureBlocklist) -> FilterReport {
    let mut report = FilterReport::default();
    for a in assertions {
        match passes_filters(&a, blocklist) {
            FilterVerdict::Pass => report.kept.push(a),
            FilterVerdict::Fail { reason, token } => {
                *report.counts.entry(reason.clone()).or_default() += 1;
                report.rejected.push(Rejection {
                    assertion: a,
                    reason,
                    token,
                });
            }
        }
    }
    report
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedCleaning {
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
    /// Batches passed through unjudged after the gateway kept failing.
    pub unfiltered_batches: usize,
}

const CLEANING_SYSTEM: &str =
    "You are a helpful assistant that screens candidate concepts for a commonsense knowledge base.";

pub fn seed_cleaning_prompt(batch: &[String]) -> CompletionRequest {
    let mut user = String::from(
        "Below is a list of candidate concepts, one per line. Identify every entry that is not a \
         comprehensible everyday concept, such as gibberish, typos or meaningless fragments. \
         Respond with a JSON object of the form {\"incomprehensible\": [...]} listing those \
         entries exactly as written.\n\n",
    );
    for c in batch {
        user.push_str("- ");
        user.push_str(c);
        user.push('\n');
    }
    CompletionRequest::new(CLEANING_SYSTEM, user.trim_end())
        .structured()
        .with_temperature(0.0)
}

fn parse_judgment(raw: &str) -> Option<HashSet<String>> {
    let v: serde_json::Value =
        serde_json::from_str(crate::generation::strip_code_fence(raw)).ok()?;
    let list = v.get("incomprehensible")?.as_array()?;
    Some(
        list.iter()
            .filter_map(|x| x.as_str())
            .map(|s| canonical_key(&[s]))
            .collect(),
    )
}

/// Drops concepts the provider judges incomprehensible. Input is
/// deduplicated first. A batch whose judgment fails twice is kept whole.
pub fn clean_seed_concepts(
    concepts: &[String],
    gateway: &Gateway,
    batch_size: usize,
) -> SeedCleaning {
    let mut seen = HashSet::new();
    let unique: Vec<String> = concepts
        .iter()
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty() && seen.insert(canonical_key(&[c])))
        .collect();
    let mut out = SeedCleaning::default();
    for batch in unique.chunks(batch_size.max(1)) {
        let base = seed_cleaning_prompt(batch);
        let judged =
            (0..2).find_map(
                |attempt| match gateway.complete(&base.clone().with_sample(attempt)) {
                    Ok(raw) => parse_judgment(&raw),
                    Err(e) => {
                        tracing::warn!(error = %e, "seed cleaning call failed");
                        None
                    }
                },
            );
        match judged {
            Some(bad) => {
                for c in batch {
                    if bad.contains(&canonical_key(&[c])) {
                        out.dropped.push(c.clone());
                    } else {
                        out.kept.push(c.clone());
                    }
                }
            }
            None => {
                tracing::warn!(
                    size = batch.len(),
                    "seed cleaning batch passed through unfiltered"
                );
                out.unfiltered_batches += 1;
                out.kept.extend(batch.iter().cloned());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Script, ScriptRule, ScriptedBackend};
    use std::sync::Arc;

    const PUBLISHED: [&str; 21] = [
        "other",
        "general",
        "1",
        "2",
        "(",
        ")",
        "and",
        ",",
        "some",
        "unknown",
        "parts of",
        "few",
        "/",
        "non-",
        "many",
        "outside",
        "part of",
        "various",
        "elsewhere",
        "rest of",
        "certain",
    ];

    fn a(culture: &str, statement: &str) -> Assertion {
        Assertion::new("tipping", culture, statement).unwrap()
    }

    fn reason(v: FilterVerdict) -> Option<RejectReason> {
        match v {
            FilterVerdict::Pass => None,
            FilterVerdict::Fail { reason, .. } => Some(reason),
        }
    }

    #[test]
    fn default_blocklist_is_the_published_list() {
        let b = CultureBlocklist::default();
        assert_eq!(b.tokens().collect::<Vec<_>>(), PUBLISHED);
    }

    #[test]
    fn word_counts() {
        assert_eq!(statement_word_count("Not a common practice"), 4);
        assert_eq!(statement_word_count("Tea."), 1);
        let s = vec!["a"; 25].join(" ");
        assert_eq!(statement_word_count(&s), 25);
        assert_eq!(statement_word_count("  spaced \t out\n words "), 3);
    }

    #[test]
    fn published_example_cultures_rejected() {
        let b = CultureBlocklist::default();
        let ok = "Standard eating utensils.";
        assert_eq!(b.first_match("Other cultures"), Some("other"));
        assert_eq!(b.first_match("Non-European countries"), Some("non-"));
        assert_eq!(b.first_match("Some parts of Asia"), Some("some"));
        assert_eq!(
            reason(passes_filters(&a("Other cultures", ok), &b)),
            Some(RejectReason::CultureBlocklist)
        );
        assert_eq!(passes_filters(&a("Japan", ok), &b), FilterVerdict::Pass);
    }

    #[test]
    fn word_tokens_respect_boundaries() {
        let b = CultureBlocklist::default();
        assert_eq!(b.first_match("Thailand"), None);
        assert_eq!(b.first_match("Andorra"), None);
        assert_eq!(b.first_match("Brothers of Italy"), None);
        assert_eq!(b.first_match("Generalitat"), None);
        assert_eq!(b.first_match("Route 21"), None);
        assert_eq!(b.first_match("Trinidad and Tobago"), Some("and"));
        assert_eq!(b.first_match("Zone 2"), Some("2"));
        assert_eq!(b.first_match("Rest  of Europe"), Some("rest of"));
    }

    #[test]
    fn checks_apply_in_order() {
        let b = CultureBlocklist::default();
        let long = vec!["word"; 26].join(" ");
        assert_eq!(
            reason(passes_filters(&a("Japan", &long), &b)),
            Some(RejectReason::TooLong)
        );
        assert_eq!(
            reason(passes_filters(&a("Other", "Tea."), &b)),
            Some(RejectReason::TooShort)
        );
        assert_eq!(
            reason(passes_filters(&a("Other", "Not common. Seen as rude."), &b)),
            Some(RejectReason::MultiSentence)
        );
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(sentence_count("Standard eating utensils."), 1);
        assert_eq!(sentence_count("Not common. Seen as rude."), 2);
        assert_eq!(sentence_count("Common in the U.S. and Canada."), 1);
        assert_eq!(sentence_count("Used for rituals, e.g. weddings."), 1);
        assert_eq!(sentence_count("Costs 3.5 dollars on average."), 1);
        assert_eq!(sentence_count("Really? Yes it is."), 2);
        assert_eq!(sentence_count("Served hot! 100 percent of the time."), 1);
    }

    #[test]
    fn tipping_fixtures_all_kept() {
        let b = CultureBlocklist::default();
        let rows = [
            ("Japan", "Not a common practice"),
            ("USA", "Common and expected practice in the service industry."),
            ("Japanese", "Not a common practice"),
            ("Japanese culture", "Not a common practice and may even be seen as rude."),
            ("Japan", "Tipping is not commonly practiced and can even be considered rude as it implies that the service is not already included in the price."),
            ("Japan", "Not a common practice and can even be considered rude or disrespectful."),
        ];
        let input: Vec<_> = rows.iter().map(|(g, s)| a(g, s)).collect();
        let report = apply_filters(input.clone(), &b);
        assert_eq!(report.kept, input);
        assert!(report.rejected.is_empty());
    }

    #[test]
    fn one_of_each_failure() {
        let b = CultureBlocklist::default();
        let input = vec![
            a("Japan", "Tea."),
            a("Japan", &vec!["w"; 26].join(" ")),
            a("Japan", "First one. Second one."),
            a("Various regions", "Plain statement here."),
            a("Japan", "Plain statement here."),
        ];
        let report = apply_filters(input, &b);
        assert_eq!(report.kept.len(), 1);
        assert_eq!(report.counts.len(), 4);
        assert!(report.counts.values().all(|&n| n == 1));
        assert_eq!(report.rejected[3].token.as_deref(), Some("various"));
    }

    fn cleaning_gateway(response: &str) -> (Gateway, Arc<ScriptedBackend>) {
        let backend = Arc::new(ScriptedBackend::new(Script {
            rules: vec![ScriptRule {
                contains: vec!["candidate concepts".into()],
                responses: vec![response.into()],
            }],
            default: None,
        }));
        (
            Gateway::builder("m").backend(backend.clone()).build(),
            backend,
        )
    }

    #[test]
    fn cleaning_drops_judged_concepts() {
        let (gw, backend) = cleaning_gateway(r#"{"incomprehensible": ["qzxv##"]}"#);
        let input: Vec<String> = ["chopsticks", "qzxv##", "tea", "Tea "]
            .map(String::from)
            .to_vec();
        let out = clean_seed_concepts(&input, &gw, 50);
        assert_eq!(out.kept, ["chopsticks", "tea"]);
        assert_eq!(out.dropped, ["qzxv##"]);
        assert_eq!(backend.calls(), 1);

        assert_eq!(clean_seed_concepts(&[], &gw, 50), SeedCleaning::default());
    }

    #[test]
    fn cleaning_fails_open() {
        let (gw, backend) = cleaning_gateway("not json");
        let input: Vec<String> = ["chopsticks", "qzxv##"].map(String::from).to_vec();
        let out = clean_seed_concepts(&input, &gw, 50);
        assert_eq!(out.kept, input);
        assert_eq!(out.unfiltered_batches, 1);
        assert_eq!(backend.calls(), 2);
    }

    proptest::proptest! {
        #[test]
        fn removing_a_token_never_shrinks_kept(drop in 0usize..21, cultures in proptest::collection::vec("[A-Za-z ,/()-]{1,24}", 1..30)) {
            let full = CultureBlocklist::default();
            let fewer: Vec<&str> = PUBLISHED.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, t)| *t).collect();
            let fewer = CultureBlocklist::from_tokens(&fewer);
            let input: Vec<Assertion> = cultures.iter().filter(|c| !c.trim().is_empty()).map(|c| a(c, "A plain statement.")).collect();
            let k_full = apply_filters(input.clone(), &full);
            let k_fewer = apply_filters(input.clone(), &fewer);
            proptest::prop_assert!(k_fewer.kept.len() >= k_full.kept.len());
            proptest::prop_assert_eq!(k_full.kept.len() + k_full.rejected.len(), input.len());
        }
    }
}
