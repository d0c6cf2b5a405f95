//! Knowledge-base records: assertions, assertion clusters, entity clusters
//! and seed sets, plus canonical keys and line-delimited persistence.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Separator placed between fields of a canonical key (U+241F SYMBOL FOR UNIT SEPARATOR).
pub const KEY_SEPARATOR: char = '\u{241F}';

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("{field} must not be empty")]
    EmptyField { field: &'static str },
    #[error("frequency must be at least 1")]
    ZeroFrequency,
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Lowercased, NFC-normalized, whitespace-collapsed fields joined by [`KEY_SEPARATOR`].
pub fn canonical_key<S: AsRef<str>>(fields: &[S]) -> String {
    let mut key = String::new();
    for (i, field) in fields.iter().enumerate() {
        if i > 0 {
            key.push(KEY_SEPARATOR);
        }
        let normalized: String = field.as_ref().nfc().collect::<String>().to_lowercase();
        let mut first = true;
        for word in normalized.split_whitespace() {
            if !first {
                key.push(' ');
            }
            key.push_str(word);
            first = false;
        }
    }
    key
}

/// A (concept; culture; statement) triple with its duplicate count and the
/// generation records it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub concept: String,
    pub culture: String,
    pub statement: String,
    pub frequency: u64,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl Assertion {
    /// Builds a frequency-1 assertion from trimmed fields.
    pub fn new(
        concept: impl AsRef<str>,
        culture: impl AsRef<str>,
        statement: impl AsRef<str>,
    ) -> Result<Self, KbError> {
        let a = Assertion {
            concept: concept.as_ref().trim().to_string(),
            culture: culture.as_ref().trim().to_string(),
            statement: statement.as_ref().trim().to_string(),
            frequency: 1,
            provenance: Vec::new(),
        };
        a.validate()?;
        Ok(a)
    }

    pub fn with_frequency(mut self, frequency: u64) -> Self {
        self.frequency = frequency;
        self
    }

    pub fn with_provenance(mut self, id: impl Into<String>) -> Self {
        self.provenance.push(id.into());
        self
    }

    pub fn validate(&self) -> Result<(), KbError> {
        for (field, value) in [
            ("concept", &self.concept),
            ("culture", &self.culture),
            ("statement", &self.statement),
        ] {
            if value.trim().is_empty() {
                return Err(KbError::EmptyField { field });
            }
        }
        if self.frequency == 0 {
            return Err(KbError::ZeroFrequency);
        }
        Ok(())
    }

    pub fn key(&self) -> String {
        canonical_key(&[&self.concept, &self.culture, &self.statement])
    }
}

/// Collapses exact duplicates (by canonical key), summing frequencies and
/// concatenating provenance. Output keeps first-appearance order and the
/// surface form of the first occurrence.
pub fn merge_duplicates(assertions: impl IntoIterator<Item = Assertion>) -> Vec<Assertion> {
    let mut slots: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<Assertion> = Vec::new();
    for a in assertions {
        match slots.get(&a.key()) {
            Some(&i) => {
                out[i].frequency += a.frequency;
                out[i].provenance.extend(a.provenance);
            }
            None => {
                slots.insert(a.key(), out.len());
                out.push(a);
            }
        }
    }
    out
}

pub fn total_frequency<'a>(assertions: impl IntoIterator<Item = &'a Assertion>) -> u64 {
    assertions.into_iter().map(|a| a.frequency).sum()
}

/// A consolidated knowledge-base record: a group of equivalent assertions
/// and the representative triple standing for them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssertionCluster {
    pub id: String,
    pub concept: String,
    pub culture: String,
    pub statement: String,
    pub similar_statements: Vec<String>,
    pub frequency: u64,
    pub members: Vec<Assertion>,
}

impl AssertionCluster {
    pub fn validate(&self) -> Result<(), KbError> {
        if self.members.is_empty() {
            return Err(KbError::InvalidCluster(format!("{}: no members", self.id)));
        }
        for m in &self.members {
            m.validate()?;
        }
        let sum = total_frequency(&self.members);
        if sum != self.frequency {
            return Err(KbError::InvalidCluster(format!(
                "{}: frequency {} but members sum to {}",
                self.id, self.frequency, sum
            )));
        }
        let mut listed = self.similar_statements.clone();
        let mut actual: Vec<String> = self.members.iter().map(|m| m.statement.clone()).collect();
        listed.sort();
        actual.sort();
        if listed != actual {
            return Err(KbError::InvalidCluster(format!(
                "{}: similar_statements do not match member statements",
                self.id
            )));
        }
        for (field, value) in [
            ("concept", &self.concept),
            ("culture", &self.culture),
            ("statement", &self.statement),
        ] {
            if value.trim().is_empty() {
                return Err(KbError::EmptyField { field });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Concept,
    Culture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityCluster {
    pub id: String,
    pub kind: EntityKind,
    pub members: Vec<String>,
    pub representative: String,
}

impl EntityCluster {
    pub fn validate(&self) -> Result<(), KbError> {
        if self.members.is_empty() {
            return Err(KbError::InvalidCluster(format!("{}: no members", self.id)));
        }
        if !self.members.contains(&self.representative) {
            return Err(KbError::InvalidCluster(format!(
                "{}: representative {:?} is not a member",
                self.id, self.representative
            )));
        }
        Ok(())
    }
}

/// Concepts and cultures that seed (or have already been prompted in) a
/// generation iteration. Insertion order is kept; duplicates under
/// [`canonical_key`] are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedSet {
    concepts: Vec<String>,
    cultures: Vec<String>,
    concept_keys: std::collections::HashSet<String>,
    culture_keys: std::collections::HashSet<String>,
    pub iteration: u32,
}

impl SeedSet {
    pub fn new(
        concepts: impl IntoIterator<Item = String>,
        cultures: impl IntoIterator<Item = String>,
    ) -> Self {
        let mut s = SeedSet::default();
        for c in concepts {
            s.add_concept(c);
        }
        for g in cultures {
            s.add_culture(g);
        }
        s
    }

    /// Returns false when the concept was already present (or blank).
    pub fn add_concept(&mut self, concept: impl AsRef<str>) -> bool {
        insert_entity(&mut self.concepts, &mut self.concept_keys, concept.as_ref())
    }

    pub fn add_culture(&mut self, culture: impl AsRef<str>) -> bool {
        insert_entity(&mut self.cultures, &mut self.culture_keys, culture.as_ref())
    }

    pub fn has_concept(&self, concept: &str) -> bool {
        self.concept_keys.contains(&canonical_key(&[concept]))
    }

    pub fn has_culture(&self, culture: &str) -> bool {
        self.culture_keys.contains(&canonical_key(&[culture]))
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn cultures(&self) -> &[String] {
        &self.cultures
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty() && self.cultures.is_empty()
    }

    /// Reads one entity per line; blank lines and `#` comments are skipped.
    pub fn read_list(path: &Path) -> Result<Vec<String>, KbError> {
        let text = std::fs::read_to_string(path).map_err(|source| KbError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect())
    }
}

fn insert_entity(
    list: &mut Vec<String>,
    keys: &mut std::collections::HashSet<String>,
    value: &str,
) -> bool {
    let value = value.trim();
    if value.is_empty() {
        return false;
    }
    if keys.insert(canonical_key(&[value])) {
        list.push(value.to_string());
        true
    } else {
        false
    }
}

/// A record that can live in a line-delimited file.
pub trait Record: Serialize + DeserializeOwned {
    fn check(&self) -> Result<(), KbError>;
}

impl Record for Assertion {
    fn check(&self) -> Result<(), KbError> {
        self.validate()
    }
}

impl Record for AssertionCluster {
    fn check(&self) -> Result<(), KbError> {
        self.validate()
    }
}

impl Record for EntityCluster {
    fn check(&self) -> Result<(), KbError> {
        self.validate()
    }
}

/// Reads a line-delimited JSON file, validating each record. Blank lines are ignored.
pub fn read_records<T: Record>(path: &Path) -> Result<Vec<T>, KbError> {
    let file = File::open(path).map_err(|source| KbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| KbError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| KbError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: T = serde_json::from_str(&line).map_err(|e| record_err(e.to_string()))?;
        record.check().map_err(|e| record_err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

/// Serializes records one per line to `path`, atomically.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), KbError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| KbError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Appends records to an existing (or new) line-delimited file.
pub fn append_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), KbError> {
    let io_err = |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), KbError> {
    let io_err = |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a(c: &str, g: &str, s: &str) -> Assertion {
        Assertion::new(c, g, s).unwrap()
    }

    #[test]
    fn canonical_key_normalizes() {
        assert_eq!(
            canonical_key(&["Tipping ", "Japan", "Not a common practice"]),
            "tipping\u{241F}japan\u{241F}not a common practice"
        );
        assert_eq!(
            canonical_key(&["tipping", "japan", "not a common practice"]),
            canonical_key(&["Tipping", "JAPAN", "Not  a common practice"])
        );
        assert_ne!(
            canonical_key(&["tea", "India", "Chai is ubiquitous"]),
            canonical_key(&["tea", "India", "Chai is everywhere"])
        );
    }

    #[test]
    fn canonical_key_composes_unicode() {
        // "é" precomposed vs. "e" + combining acute
        assert_eq!(
            canonical_key(&["caf\u{e9}"]),
            canonical_key(&["cafe\u{301}"])
        );
    }

    #[test]
    fn merge_counts_repeats() {
        let recs: Vec<_> = (0..5)
            .map(|i| {
                a("tipping", "Japanese", "Not a common practice").with_provenance(format!("r{i}"))
            })
            .collect();
        let merged = merge_duplicates(recs);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].frequency, 5);
        assert_eq!(merged[0].provenance, vec!["r0", "r1", "r2", "r3", "r4"]);

        assert!(merge_duplicates(Vec::new()).is_empty());

        let two = merge_duplicates(vec![a("tea", "India", "x y"), a("tea", "India", "x z")]);
        assert_eq!(two.len(), 2);
        assert!(two.iter().all(|r| r.frequency == 1));
    }

    #[test]
    fn assertion_rejects_blank_fields() {
        assert!(matches!(
            Assertion::new("tea", "India", "   "),
            Err(KbError::EmptyField { field: "statement" })
        ));
    }

    #[test]
    fn seed_set_dedups_by_key() {
        let mut s = SeedSet::default();
        assert!(s.add_culture("Japan"));
        assert!(!s.add_culture("japan "));
        assert!(s.has_culture("JAPAN"));
        assert_eq!(s.cultures(), ["Japan"]);
    }

    #[test]
    fn records_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let recs = vec![
            a("tipping", "Japan", "Not a common practice").with_provenance("g1"),
            a("chopsticks", "Japan", "Standard eating utensils.").with_frequency(3),
            a("tea", "England", "Tea is served with milk."),
        ];
        write_records(&path, &recs).unwrap();
        let back: Vec<Assertion> = read_records(&path).unwrap();
        assert_eq!(back, recs);

        std::fs::write(
            &path,
            "{\"concept\":\"tea\",\"culture\":\"India\",\"statement\":\"Chai.\",\"frequency\":1,\"provenance\":[]}\n\
             {\"concept\":\"tea\",\"culture\":\"India\",\"statement\":\"\",\"frequency\":1,\"provenance\":[]}\n",
        )
        .unwrap();
        match read_records::<Assertion>(&path) {
            Err(KbError::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected record error, got {other:?}"),
        }

        std::fs::write(
            &path,
            "{\"concept\":\"tea\",\"culture\":\"India\",\"statement\":\"Chai.\",\"frequency\":1,\"extra\":0}\n",
        )
        .unwrap();
        assert!(read_records::<Assertion>(&path).is_err());
    }

    #[test]
    fn cluster_frequency_must_match_members() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let member = a("tipping", "Japan", "Not a common practice").with_frequency(2);
        let bad = AssertionCluster {
            id: "k1".into(),
            concept: "tipping".into(),
            culture: "Japan".into(),
            statement: "Tipping is uncommon in Japan.".into(),
            similar_statements: vec![member.statement.clone()],
            frequency: 3,
            members: vec![member],
        };
        write_records(&path, &[bad]).unwrap();
        let err = read_records::<AssertionCluster>(&path).unwrap_err();
        assert!(err.to_string().contains("frequency 3"), "{err}");
    }

    fn field() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z ,.'-]{0,20}"
    }

    fn arb_assertion() -> impl Strategy<Value = Assertion> {
        (
            field(),
            field(),
            field(),
            1u64..20,
            proptest::collection::vec("[a-z0-9-]{1,8}", 0..3),
        )
            .prop_map(|(c, g, s, f, p)| Assertion {
                provenance: p,
                ..a(&c, &g, &s).with_frequency(f)
            })
    }

    proptest! {
        #[test]
        fn merge_is_idempotent_and_conserves_frequency(xs in proptest::collection::vec(arb_assertion(), 0..40)) {
            let once = merge_duplicates(xs.clone());
            prop_assert_eq!(total_frequency(&once), total_frequency(&xs));
            prop_assert_eq!(merge_duplicates(once.clone()), once);
        }

        #[test]
        fn persistence_round_trips(xs in proptest::collection::vec(arb_assertion(), 0..10)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.jsonl");
            write_records(&path, &xs).unwrap();
            prop_assert_eq!(read_records::<Assertion>(&path).unwrap(), xs);
        }
    }
}
