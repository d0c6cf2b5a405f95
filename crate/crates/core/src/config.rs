//! Pipeline configuration, loaded from TOML.
//!
//! Every section and key is optional; missing values take the defaults
//! below. Unknown keys are rejected. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::consolidate::{HacParams, Linkage, Metric, RenderTemplate};
use crate::embedding::{Embedder, EmbeddingProvider, HashingEmbedder, RemoteEmbedder};
use crate::gateway::{
    ChatBackend, Gateway, HttpBackend, Prices, RateLimits, ReplayStore, ScriptedBackend, StoreMode,
};
use crate::generation::GenerationConfig;
use crate::retrieval::RetrievalParams;

#[derive(Debug, thiserror::Error)]
#[error("{key}: {message}")]
pub struct ConfigError {
    /// Dotted key path, or the file path for read/parse failures.
    pub key: String,
    pub message: String,
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible chat-completions endpoint.
    #[default]
    Http,
    /// Substring-rule script, for authoring fixtures.
    Scripted,
    /// Cache only; replay mode must find every request.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub script: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub mode: StoreMode,
    pub timeout_secs: u64,
    pub limits: RateLimits,
    pub prices: Prices,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: BackendKind::Http,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "MANGO_API_KEY".into(),
            script: None,
            cache_dir: "cache/llm".into(),
            mode: StoreMode::Record,
            timeout_secs: 120,
            limits: RateLimits::default(),
            prices: Prices::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Stub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub provider: EmbedderKind,
    pub dimension: usize,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub cache: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            provider: EmbedderKind::Stub,
            dimension: 64,
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-3-small".into(),
            api_key_env: "MANGO_API_KEY".into(),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub concepts: PathBuf,
    pub cultures: PathBuf,
    /// Ask the model to drop incomprehensible seed concepts first.
    pub clean: bool,
    pub clean_batch_size: usize,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            concepts: "seeds/concepts.txt".into(),
            cultures: "seeds/cultures.txt".into(),
            clean: false,
            clean_batch_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsolidationConfig {
    pub linkage: Linkage,
    pub metric: Metric,
    pub distance_threshold: f64,
    pub render_template: String,
    /// Also write the `top_n` most frequent clusters.
    pub top_n: Option<usize>,
}

impl ConsolidationConfig {
    pub fn hac(&self) -> HacParams {
        HacParams {
            linkage: self.linkage,
            metric: self.metric,
            distance_threshold: self.distance_threshold,
        }
    }
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        let hac = HacParams::default();
        ConsolidationConfig {
            linkage: hac.linkage,
            metric: hac.metric,
            distance_threshold: hac.distance_threshold,
            render_template: RenderTemplate::default().as_str().to_string(),
            top_n: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueTask {
    #[default]
    Utterance,
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSelection {
    Vanilla,
    Ccsk,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DialogueConfig {
    pub task: DialogueTask,
    pub mode: ModeSelection,
    pub n: usize,
    pub turn_cap: usize,
}

impl Default for DialogueConfig {
    fn default() -> Self {
        DialogueConfig {
            task: DialogueTask::Utterance,
            mode: ModeSelection::Both,
            n: 100,
            turn_cap: crate::dialogue::DEFAULT_TURN_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    pub rng_seed: u64,
    pub blocklist: Option<PathBuf>,
    pub example_pool: Option<PathBuf>,
    pub seeds: SeedConfig,
    pub llm: LlmConfig,
    pub embedding: EmbeddingConfig,
    pub generation: GenerationConfig,
    pub consolidation: ConsolidationConfig,
    pub retrieval: RetrievalParams,
    pub dialogue: DialogueConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            work_dir: "work".into(),
            rng_seed: 0,
            blocklist: None,
            example_pool: None,
            seeds: SeedConfig::default(),
            llm: LlmConfig::default(),
            embedding: EmbeddingConfig::default(),
            generation: GenerationConfig::default(),
            consolidation: ConsolidationConfig::default(),
            retrieval: RetrievalParams::default(),
            dialogue: DialogueConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses without touching the filesystem; paths stay as written.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = match (unknown_key(&message), e.span()) {
                (Some(k), Some(span)) => match table_at(text, span.start) {
                    Some(t) => format!("{t}.{k}"),
                    None => k,
                },
                (Some(k), None) => k,
                (None, _) => "config".to_string(),
            };
            bad(&key, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(&path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::parse(&text).map_err(|mut e| {
            e.message = format!("{} ({})", e.message, path.display());
            e
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        if let Some(pool) = &cfg.example_pool {
            cfg.generation.example_pool = crate::generation::load_example_pool(pool)
                .map_err(|e| bad("example_pool", e.to_string()))?;
            cfg.validate()?;
        }
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.work_dir);
        fix(&mut self.seeds.concepts);
        fix(&mut self.seeds.cultures);
        fix(&mut self.llm.cache_dir);
        for p in [
            &mut self.blocklist,
            &mut self.example_pool,
            &mut self.llm.script,
            &mut self.embedding.cache,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.generation;
        if g.samples_per_prompt == 0 {
            return Err(bad("generation.samples_per_prompt", "must be at least 1"));
        }
        if !(0.0..=2.0).contains(&g.temperature) {
            return Err(bad(
                "generation.temperature",
                format!("must lie in [0, 2], got {}", g.temperature),
            ));
        }
        if g.examples_per_prompt == 0 {
            return Err(bad("generation.examples_per_prompt", "must be at least 1"));
        }
        if g.examples_per_prompt > g.example_pool.len() {
            return Err(bad(
                "generation.examples_per_prompt",
                format!("exceeds the example pool size {}", g.example_pool.len()),
            ));
        }
        if g.iterations == 0 {
            return Err(bad("generation.iterations", "must be at least 1"));
        }
        let t = self.consolidation.distance_threshold;
        if !(t.is_finite() && t > 0.0) {
            return Err(bad(
                "consolidation.distance_threshold",
                format!("must be positive, got {t}"),
            ));
        }
        RenderTemplate::new(self.consolidation.render_template.clone())
            .map_err(|e| bad("consolidation.render_template", e.to_string()))?;
        if self.consolidation.top_n == Some(0) {
            return Err(bad("consolidation.top_n", "must be at least 1"));
        }
        if self.retrieval.k == 0 {
            return Err(bad("retrieval.k", "must be at least 1"));
        }
        let m = self.retrieval.min_similarity;
        if !(0.0..=1.0).contains(&m) {
            return Err(bad(
                "retrieval.min_similarity",
                format!("must lie in [0, 1], got {m}"),
            ));
        }
        if self.embedding.dimension == 0 {
            return Err(bad("embedding.dimension", "must be at least 1"));
        }
        if self.seeds.clean_batch_size == 0 {
            return Err(bad("seeds.clean_batch_size", "must be at least 1"));
        }
        if self.llm.limits.requests_per_minute == 0 || self.llm.limits.input_tokens_per_minute == 0
        {
            return Err(bad("llm.limits", "limits must be positive"));
        }
        if self.llm.backend == BackendKind::Scripted && self.llm.script.is_none() {
            return Err(bad(
                "llm.script",
                "required when llm.backend = \"scripted\"",
            ));
        }
        if self.dialogue.turn_cap == 0 {
            return Err(bad("dialogue.turn_cap", "must be at least 1"));
        }
        Ok(())
    }

    pub fn render_template(&self) -> RenderTemplate {
        RenderTemplate::new(self.consolidation.render_template.clone()).expect("validated")
    }

    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let llm = &self.llm;
        let backend: Option<Arc<dyn ChatBackend>> = match llm.backend {
            BackendKind::None => None,
            BackendKind::Scripted => {
                let path = llm.script.as_ref().expect("validated");
                Some(Arc::new(
                    ScriptedBackend::from_file(path).map_err(|e| bad("llm.script", e.message))?,
                ))
            }
            BackendKind::Http => {
                let key = std::env::var(&llm.api_key_env).ok();
                let b = HttpBackend::new(&llm.endpoint, key, Duration::from_secs(llm.timeout_secs))
                    .map_err(|e| bad("llm.endpoint", e.message))?;
                Some(Arc::new(b))
            }
        };
        let store = ReplayStore::open(&llm.cache_dir, llm.mode)
            .map_err(|e| bad("llm.cache_dir", e.to_string()))?;
        let mut builder = Gateway::builder(&llm.model)
            .store(store)
            .limits(llm.limits)
            .prices(llm.prices);
        if let Some(b) = backend {
            builder = builder.backend(b);
        }
        Ok(builder.build())
    }

    pub fn build_embedder(&self) -> Result<Embedder, ConfigError> {
        let e = &self.embedding;
        let provider: Arc<dyn EmbeddingProvider> = match e.provider {
            EmbedderKind::Stub => Arc::new(HashingEmbedder::new(e.dimension)),
            EmbedderKind::Remote => {
                let key = std::env::var(&e.api_key_env).ok();
                Arc::new(
                    RemoteEmbedder::new(&e.endpoint, &e.model, key, e.dimension)
                        .map_err(|err| bad("embedding.endpoint", err.to_string()))?,
                )
            }
        };
        match &e.cache {
            Some(path) => Embedder::with_cache(provider, path)
                .map_err(|err| bad("embedding.cache", err.to_string())),
            None => Ok(Embedder::new(provider)),
        }
    }
}

/// Pulls the offending key out of serde's "unknown field `x`" message.
fn unknown_key(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Name of the `[table]` header governing byte offset `at`.
fn table_at(text: &str, at: usize) -> Option<String> {
    text[..at.min(text.len())]
        .lines()
        .map(str::trim)
        .rfind(|l| l.starts_with('[') && !l.starts_with("[["))
        .map(|l| l.trim_matches(['[', ']']).trim().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = PipelineConfig::parse("").unwrap();
        assert_eq!(c.generation.samples_per_prompt, 5);
        assert_eq!(c.generation.temperature, 1.0);
        assert_eq!(c.consolidation.distance_threshold, 1.5);
        assert_eq!(c.retrieval.k, 2);
        assert_eq!(c.retrieval.min_similarity, 0.5);
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn sections_parse() {
        let c = PipelineConfig::parse(
            r#"
            rng_seed = 7
            [generation]
            samples_per_prompt = 2
            [consolidation]
            distance_threshold = 0.9
            top_n = 10
            [retrieval]
            k = 3
            [llm]
            backend = "none"
            mode = "replay"
            [dialogue]
            task = "full"
            mode = "ccsk"
            "#,
        )
        .unwrap();
        assert_eq!(c.rng_seed, 7);
        assert_eq!(c.generation.samples_per_prompt, 2);
        assert_eq!(c.generation.iterations, 2);
        assert_eq!(c.consolidation.distance_threshold, 0.9);
        assert_eq!(c.retrieval.k, 3);
        assert_eq!(c.llm.mode, StoreMode::Replay);
        assert_eq!(c.dialogue.task, DialogueTask::Full);
    }

    #[test]
    fn bad_values_name_the_key() {
        let e = PipelineConfig::parse("[consolidation]\ndistance_threshold = -1.0").unwrap_err();
        assert_eq!(e.key, "consolidation.distance_threshold");
        let e = PipelineConfig::parse("[generation]\ntemprature = 0.5").unwrap_err();
        assert_eq!(e.key, "generation.temprature");
        assert!(e.to_string().contains("temprature"));
        let e = PipelineConfig::parse("rng_sed = 1").unwrap_err();
        assert_eq!(e.key, "rng_sed");
        let e = PipelineConfig::parse("[retrieval]\nmin_similarity = 1.5").unwrap_err();
        assert_eq!(e.key, "retrieval.min_similarity");
        let e = PipelineConfig::parse("[llm]\nbackend = \"scripted\"").unwrap_err();
        assert_eq!(e.key, "llm.script");
        let e =
            PipelineConfig::parse("[consolidation]\nrender_template = \"{concept}\"").unwrap_err();
        assert_eq!(e.key, "consolidation.render_template");
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mango.toml");
        std::fs::write(
            &path,
            "work_dir = \"out\"\n[llm]\ncache_dir = \"/abs/cache\"",
        )
        .unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.work_dir, dir.path().join("out"));
        assert_eq!(c.seeds.concepts, dir.path().join("seeds/concepts.txt"));
        assert_eq!(c.llm.cache_dir, PathBuf::from("/abs/cache"));
    }
}
