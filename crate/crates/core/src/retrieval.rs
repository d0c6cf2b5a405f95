//! Dense retrieval of knowledge-base statements for a narrative.
//!
//! Participant names are replaced with "X" and "Y" before the narrative is
//! embedded; the index is searched exhaustively by cosine similarity.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingError};
use crate::kb::AssertionCluster;

const INDEX_MAGIC: &[u8; 8] = b"MGOIDX01";

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot index an empty knowledge base")]
    EmptyKb,
    #[error("index was built with {index:?} but the configured embedder is {configured:?}")]
    ProviderMismatch { index: String, configured: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("index file {path}: {message}")]
    File { path: String, message: String },
    #[error("min_similarity must lie in [0, 1], got {0}")]
    BadParams(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    pub k: usize,
    /// Results must be strictly more similar than this.
    pub min_similarity: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            k: 2,
            min_similarity: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub cluster_id: String,
    pub statement: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub identity: String,
    pub dimension: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub cluster_id: String,
    pub statement: String,
    pub similarity: f64,
}

impl RetrievalIndex {
    /// One entry per cluster, embedding its representative statement.
    pub fn build(kb: &[AssertionCluster], embedder: &Embedder) -> Result<Self, RetrievalError> {
        if kb.is_empty() {
            return Err(RetrievalError::EmptyKb);
        }
        let texts: Vec<String> = kb.iter().map(|c| c.statement.clone()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        Ok(RetrievalIndex {
            identity: embedder.identity().to_string(),
            dimension: embedder.dimension(),
            entries: kb
                .iter()
                .zip(vectors)
                .map(|(c, v)| IndexEntry {
                    cluster_id: c.id.clone(),
                    statement: c.statement.clone(),
                    vector: v.values,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Layout (little-endian): magic `MGOIDX01`, u32 identity length,
    /// identity, u32 entry count, u32 dimension; then per entry u32 id
    /// length, id, u32 statement length, statement, `dimension` f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = INDEX_MAGIC.to_vec();
        put_str(&mut out, &self.identity);
        out.extend((self.entries.len() as u32).to_le_bytes());
        out.extend((self.dimension as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.cluster_id);
            put_str(&mut out, &e.statement);
            for x in &e.vector {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, String> {
        let r = &mut bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != INDEX_MAGIC {
            return Err("bad magic".into());
        }
        let identity = get_str(r)?;
        let count = get_u32(r)? as usize;
        let dimension = get_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let cluster_id = get_str(r)?;
            let statement = get_str(r)?;
            let mut buf = vec![0u8; 8 * dimension];
            r.read_exact(&mut buf).map_err(|e| e.to_string())?;
            let vector = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(IndexEntry {
                cluster_id,
                statement,
                vector,
            });
        }
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(RetrievalIndex {
            identity,
            dimension,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        crate::kb::write_atomic(path, &self.to_bytes()).map_err(|e| RetrievalError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Loads an index and checks it was built by `embedder`'s provider.
    pub fn load(path: &Path, embedder: &Embedder) -> Result<Self, RetrievalError> {
        let err = |message: String| RetrievalError::File {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let index = Self::from_bytes(&bytes).map_err(err)?;
        if index.identity != embedder.identity() {
            return Err(RetrievalError::ProviderMismatch {
                index: index.identity,
                configured: embedder.identity().to_string(),
            });
        }
        Ok(index)
    }

    /// Exact scan: up to `k` entries with similarity strictly above the
    /// floor, ordered by descending similarity then cluster id.
    pub fn search(&self, query: &[f64], params: &RetrievalParams) -> Vec<Hit> {
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .filter_map(|e| {
                let sim: f64 = e.vector.iter().zip(query).map(|(a, b)| a * b).sum();
                (sim > params.min_similarity).then(|| Hit {
                    cluster_id: e.cluster_id.clone(),
                    statement: e.statement.clone(),
                    similarity: sim,
                })
            })
            .collect();
        hits.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.cluster_id.cmp(&b.cluster_id))
        });
        hits.truncate(params.k);
        hits
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn get_u32(r: &mut &[u8]) -> Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String, String> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    String::from_utf8(b).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anonymized {
    pub text: String,
    /// Names that did not occur in the text.
    pub missing: Vec<String>,
}

/// Replaces whole-word occurrences of the first name with "X" and the
/// second with "Y". Possessives keep their suffix ("Kenji's" -> "Y's").
pub fn anonymize_narrative(text: &str, first: &str, second: &str) -> Anonymized {
    let names = [(first.trim(), "X"), (second.trim(), "Y")];
    let mut out = String::with_capacity(text.len());
    let mut found = [false, false];
    let mut i = 0;
    'scan: while i < text.len() {
        let prev_ok = !text[..i]
            .chars()
            .next_back()
            .is_some_and(char::is_alphanumeric);
        if prev_ok {
            // longer name first, so "Ann" never shadows "Anna"
            let mut order = [0usize, 1];
            if names[1].0.len() > names[0].0.len() {
                order = [1, 0];
            }
            for n in order {
                let (name, mark) = names[n];
                if !name.is_empty() && text[i..].starts_with(name) {
                    let next_ok = !text[i + name.len()..]
                        .chars()
                        .next()
                        .is_some_and(char::is_alphanumeric);
                    if next_ok {
                        out.push_str(mark);
                        found[n] = true;
                        i += name.len();
                        continue 'scan;
                    }
                }
            }
        }
        let ch = text[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    let missing = names
        .iter()
        .zip(found)
        .filter(|(_, f)| !f)
        .map(|((n, _), _)| n.to_string())
        .collect::<Vec<_>>();
    for m in &missing {
        tracing::warn!(name = %m, "participant name not found in narrative");
    }
    Anonymized { text: out, missing }
}

/// Anonymizes, embeds and searches.
pub fn retrieve(
    narrative: &str,
    participants: (&str, &str),
    index: &RetrievalIndex,
    embedder: &Embedder,
    params: &RetrievalParams,
) -> Result<Vec<Hit>, RetrievalError> {
    if !(0.0..=1.0).contains(&params.min_similarity) {
        return Err(RetrievalError::BadParams(params.min_similarity));
    }
    if index.identity != embedder.identity() {
        return Err(RetrievalError::ProviderMismatch {
            index: index.identity.clone(),
            configured: embedder.identity().to_string(),
        });
    }
    let anon = anonymize_narrative(narrative, participants.0, participants.1);
    let q = embedder.embed_one(&anon.text)?;
    Ok(index.search(&q.values, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::Assertion;

    fn kb(statements: &[&str]) -> Vec<AssertionCluster> {
        statements
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let m = Assertion::new("c", "g", *s).unwrap();
                AssertionCluster {
                    id: format!("k{i}"),
                    concept: "c".into(),
                    culture: "g".into(),
                    statement: s.to_string(),
                    similar_statements: vec![s.to_string()],
                    frequency: 1,
                    members: vec![m],
                }
            })
            .collect()
    }

    #[test]
    fn anonymization() {
        let a = anonymize_narrative(
            "Carlos from Argentina is visiting Korea. He greets his new Korean friend, Jihoon, by giving him a friendly pat on the back.",
            "Carlos",
            "Jihoon",
        );
        assert_eq!(
            a.text,
            "X from Argentina is visiting Korea. He greets his new Korean friend, Y, by giving him a friendly pat on the back."
        );
        assert!(a.missing.is_empty());

        let p = anonymize_narrative("John paid Kenji's bill.", "John", "Kenji");
        assert_eq!(p.text, "X paid Y's bill.");

        let none = anonymize_narrative("Two friends meet.", "Ali", "Bo");
        assert_eq!(none.text, "Two friends meet.");
        assert_eq!(none.missing, ["Ali", "Bo"]);

        let sub = anonymize_narrative("Ali works at Alibaba.", "Ali", "Mei");
        assert_eq!(sub.text, "X works at Alibaba.");
    }

    #[test]
    fn build_requires_entries() {
        assert!(matches!(
            RetrievalIndex::build(&[], &Embedder::stub()),
            Err(RetrievalError::EmptyKb)
        ));
        let idx = RetrievalIndex::build(&kb(&["a b", "c d", "e f"]), &Embedder::stub()).unwrap();
        assert_eq!(idx.len(), 3);
    }

    #[test]
    fn save_load_round_trip() {
        let e = Embedder::stub();
        let idx =
            RetrievalIndex::build(&kb(&["Tea is served with milk.", "Rice is a staple."]), &e)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        idx.save(&path).unwrap();
        let back = RetrievalIndex::load(&path, &e).unwrap();
        assert_eq!(back, idx);
        let rebuilt =
            RetrievalIndex::build(&kb(&["Tea is served with milk.", "Rice is a staple."]), &e)
                .unwrap();
        assert_eq!(rebuilt.to_bytes(), std::fs::read(&path).unwrap());

        let other = Embedder::new(std::sync::Arc::new(crate::embedding::HashingEmbedder::new(
            32,
        )));
        assert!(matches!(
            RetrievalIndex::load(&path, &other),
            Err(RetrievalError::ProviderMismatch { .. })
        ));
    }

    #[test]
    fn self_similarity_and_floor() {
        let e = Embedder::stub();
        let statements = [
            "Tipping is not a common practice in Japan.",
            "Rice is a staple food in China.",
            "Tea is served with milk in England.",
        ];
        let idx = RetrievalIndex::build(&kb(&statements), &e).unwrap();
        let hits = retrieve(
            statements[1],
            ("Nobody", "Noone"),
            &idx,
            &e,
            &RetrievalParams::default(),
        )
        .unwrap();
        assert_eq!(hits[0].cluster_id, "k1");
        assert!((hits[0].similarity - 1.0).abs() <= 1e-9);
        assert!(hits.len() <= 2);

        let strict = RetrievalParams {
            k: 2,
            min_similarity: 1.0,
        };
        assert!(retrieve(statements[1], ("A", "B"), &idx, &e, &strict)
            .unwrap()
            .is_empty());
        let bad = RetrievalParams {
            k: 2,
            min_similarity: 1.01,
        };
        assert!(matches!(
            retrieve("x", ("A", "B"), &idx, &e, &bad),
            Err(RetrievalError::BadParams(_))
        ));
    }

    #[test]
    fn ties_break_by_cluster_id() {
        let idx = RetrievalIndex {
            identity: "t".into(),
            dimension: 2,
            entries: vec![
                IndexEntry {
                    cluster_id: "b".into(),
                    statement: "s".into(),
                    vector: vec![1.0, 0.0],
                },
                IndexEntry {
                    cluster_id: "a".into(),
                    statement: "s".into(),
                    vector: vec![1.0, 0.0],
                },
                IndexEntry {
                    cluster_id: "c".into(),
                    statement: "s".into(),
                    vector: vec![0.0, 1.0],
                },
            ],
        };
        let hits = idx.search(
            &[1.0, 0.0],
            &RetrievalParams {
                k: 3,
                min_similarity: 0.0,
            },
        );
        let ids: Vec<_> = hits.iter().map(|h| h.cluster_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }
}
