//! Offline backend answering from a script of substring rules. Used to author
//! replay fixtures and in tests.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Deserialize;

use super::{BackendError, ChatBackend, Completion, CompletionRequest};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    /// Every needle must occur in the system or user text.
    pub contains: Vec<String>,
    /// Picked by `sample_index % responses.len()`.
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default: Option<String>,
}

pub struct ScriptedBackend {
    script: Script,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend {
            script,
            calls: AtomicU64::new(0),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::permanent(format!("{}: {e}", path.display())))?;
        let script: Script = serde_json::from_str(&text)
            .map_err(|e| BackendError::permanent(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(
        &self,
        request: &CompletionRequest,
        _model: &str,
    ) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let haystack = format!("{}\n{}", request.system_text, request.user_text);
        let rule = self.script.rules.iter().find(|r| {
            !r.responses.is_empty() && r.contains.iter().all(|n| haystack.contains(n.as_str()))
        });
        let text = match (rule, &self.script.default) {
            (Some(r), _) => r.responses[request.sample_index as usize % r.responses.len()].clone(),
            (None, Some(d)) => d.clone(),
            (None, None) => {
                return Err(BackendError::permanent(format!(
                    "no scripted response for prompt ending {:?}",
                    tail(&request.user_text, 80)
                )))
            }
        };
        Ok(Completion { text, usage: None })
    }
}

fn tail(s: &str, n: usize) -> &str {
    let start = s
        .char_indices()
        .rev()
        .nth(n.saturating_sub(1))
        .map_or(0, |(i, _)| i);
    &s[start..]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_matching_rule_by_sample() {
        let b = ScriptedBackend::new(Script {
            rules: vec![
                ScriptRule {
                    contains: vec!["concept: tea".into()],
                    responses: vec!["r0".into(), "r1".into()],
                },
                ScriptRule {
                    contains: vec!["concept".into()],
                    responses: vec!["any".into()],
                },
            ],
            default: None,
        });
        let mut req = CompletionRequest::new("", "Please write assertions for the concept: tea.");
        assert_eq!(b.complete(&req, "m").unwrap().text, "r0");
        req.sample_index = 3;
        assert_eq!(b.complete(&req, "m").unwrap().text, "r1");
        let other = CompletionRequest::new("", "the concept: rice");
        assert_eq!(b.complete(&other, "m").unwrap().text, "any");
        assert!(b
            .complete(&CompletionRequest::new("", "nothing"), "m")
            .is_err());
        assert_eq!(b.calls(), 4);
    }
}
