use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{FailureThresholds, RankBasis, DEFAULT_P_GRID};
use crate::error::{Error, Result};
use crate::gateway::{LmClientConfig, MockLmSpec};
use crate::generator::{PromptTemplate, RoleLayout, TemplateVariant, ValueScale};
use crate::retriever::{BaselineMode, EncoderShape, ReferenceEncoder, ReferenceRetriever, DEFAULT_STEPS};
use crate::shapley::{Method, SamplerConfig};

/// Where queries come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QuerySource {
    Inline(Vec<String>),
    /// One query per line, or a JSON array of strings.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub id: String,
    pub text: String,
}

/// A pre-retrieved ranking for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub query: String,
    pub ranked_doc_ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Where documents come from. Exactly one source is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DocumentSource {
    /// Inline corpus, ranked per query by the reference retriever.
    Inline(Vec<CorpusDocument>),
    /// JSON array of `{id, text}`, ranked per query by the reference
    /// retriever.
    CorpusFile(PathBuf),
    /// Rankings from a file; texts are looked up in the corpus file.
    Ranking { ranking_file: PathBuf, corpus_file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSource {
    /// Deterministic random weights; both sides share one encoder unless
    /// `context_seed` is given.
    Seeded {
        seed: u64,
        #[serde(default)]
        context_seed: Option<u64>,
        #[serde(default = "default_vocab")]
        vocab: usize,
        #[serde(default = "default_hidden")]
        h: usize,
        #[serde(default = "default_max_len")]
        max_len: usize,
    },
    /// Weight files (`.json` or the binary format); `context` defaults to
    /// `query`.
    Weights { query: PathBuf, context: Option<PathBuf> },
}

fn default_vocab() -> usize {
    EncoderShape::default().vocab
}

fn default_hidden() -> usize {
    EncoderShape::default().h
}

fn default_max_len() -> usize {
    EncoderShape::default().max_len
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverSettings {
    pub encoder: EncoderSource,
    /// Remote gradient endpoint; embeddings still come from `encoder`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_endpoint: Option<LmClientConfig>,
    #[serde(default)]
    pub baseline: BaselineMode,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

/// Mock generator: influences hashed from document text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockGeneratorSettings {
    pub answer: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_influence_scale")]
    pub scale: f64,
    #[serde(default)]
    pub slot_scale: Vec<f64>,
}

fn default_influence_scale() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorClient {
    Mock(MockGeneratorSettings),
    Http(LmClientConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSettings {
    pub client: GeneratorClient,
    #[serde(default)]
    pub template: TemplateVariant,
    #[serde(default)]
    pub layout: RoleLayout,
    /// Overrides `template` and `layout`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_file: Option<PathBuf>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub value_scale: ValueScale,
}

fn default_max_tokens() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSettings {
    pub method: Method,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        AttributionSettings { method: Method::Pmc, sampler: SamplerConfig::default() }
    }
}

fn default_p_grid() -> Vec<f64> {
    DEFAULT_P_GRID.to_vec()
}

fn default_bootstrap() -> usize {
    1000
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSettings {
    #[serde(default = "default_p_grid")]
    pub p_grid: Vec<f64>,
    #[serde(default)]
    pub thresholds: FailureThresholds,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Experimental; signed ranking is the reported default.
    #[serde(default, skip_serializing_if = "RankBasis::is_signed")]
    pub rank_basis: RankBasis,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            p_grid: default_p_grid(),
            thresholds: FailureThresholds::default(),
            bootstrap: default_bootstrap(),
            level: default_level(),
            rank_basis: RankBasis::Signed,
        }
    }
}

/// Document order presented to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrderingCondition {
    /// Retrieval order.
    #[default]
    Original,
    Shuffled,
    /// Duplicates removed, retrieval order kept.
    NoDuplicates,
    /// Duplicates removed, then shuffled.
    ShuffledNoDuplicates,
}

impl OrderingCondition {
    pub fn shuffles(self) -> bool {
        matches!(self, OrderingCondition::Shuffled | OrderingCondition::ShuffledNoDuplicates)
    }

    pub fn dedups(self) -> bool {
        matches!(self, OrderingCondition::NoDuplicates | OrderingCondition::ShuffledNoDuplicates)
    }
}

fn default_k() -> usize {
    10
}

fn default_parallelism() -> usize {
    1
}

/// Everything an audit run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub queries: QuerySource,
    pub documents: DocumentSource,
    #[serde(default = "default_k")]
    pub k: usize,
    pub retriever: RetrieverSettings,
    pub generator: GeneratorSettings,
    #[serde(default)]
    pub attribution: AttributionSettings,
    #[serde(default)]
    pub metrics: MetricSettings,
    #[serde(default)]
    pub ordering: OrderingCondition,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Queries processed concurrently.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Directory relative paths resolve against; set by [`AuditConfig::load`].
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl AuditConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: AuditConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf);
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.ordering.shuffles() && self.seed.is_none() {
            return bad("shuffled ordering conditions require a seed");
        }
        if self.retriever.steps == 0 {
            return Err(Error::InvalidSteps(0));
        }
        if self.generator.max_tokens == 0 {
            return bad("generator.max_tokens must be at least 1");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if self.metrics.p_grid.is_empty() {
            return bad("metrics.p_grid is empty");
        }
        if let Some(p) = self.metrics.p_grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidPersistence(*p));
        }
        if self.metrics.bootstrap == 0 || !(self.metrics.level > 0.0 && self.metrics.level < 1.0) {
            return bad("metrics.bootstrap must be positive and metrics.level in (0, 1)");
        }
        if let GeneratorClient::Mock(m) = &self.generator.client {
            if m.answer.is_empty() {
                return bad("mock generator answer is empty");
            }
        }
        if let GeneratorClient::Http(c) = &self.generator.client {
            c.validate()?;
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn load_queries(&self) -> Result<Vec<String>> {
        let queries = match &self.queries {
            QuerySource::Inline(q) => q.clone(),
            QuerySource::File(path) => {
                let text = read(&self.resolve(path))?;
                if text.trim_start().starts_with('[') {
                    serde_json::from_str(&text)
                        .map_err(|e| Error::InvalidConfig(format!("query file: {e}")))?
                } else {
                    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
                }
            }
        };
        if queries.is_empty() {
            return Err(Error::InvalidConfig("no queries".into()));
        }
        Ok(queries)
    }

    pub fn load_corpus(&self) -> Result<Vec<CorpusDocument>> {
        let corpus: Vec<CorpusDocument> = match &self.documents {
            DocumentSource::Inline(docs) => docs.clone(),
            DocumentSource::CorpusFile(path) | DocumentSource::Ranking { corpus_file: path, .. } => {
                serde_json::from_str(&read(&self.resolve(path))?)
                    .map_err(|e| Error::InvalidConfig(format!("corpus file: {e}")))?
            }
        };
        if corpus.is_empty() {
            return Err(Error::InvalidConfig("corpus is empty".into()));
        }
        Ok(corpus)
    }

    pub fn load_rankings(&self) -> Result<Option<Vec<RankingEntry>>> {
        match &self.documents {
            DocumentSource::Ranking { ranking_file, .. } => serde_json::from_str(&read(&self.resolve(ranking_file))?)
                .map(Some)
                .map_err(|e| Error::InvalidConfig(format!("ranking file: {e}"))),
            _ => Ok(None),
        }
    }

    pub fn build_retriever(&self) -> Result<ReferenceRetriever> {
        match &self.retriever.encoder {
            EncoderSource::Seeded { seed, context_seed, vocab, h, max_len } => {
                let shape = EncoderShape { vocab: *vocab, h: *h, max_len: *max_len };
                if *vocab <= crate::retriever::FIRST_REGULAR_ID as usize || *h == 0 || *max_len < 3 {
                    return Err(Error::InvalidConfig(format!("invalid encoder shape {shape:?}")));
                }
                let query = ReferenceEncoder::seeded(*seed, shape);
                match context_seed {
                    None => Ok(ReferenceRetriever::shared(query)),
                    Some(s) => ReferenceRetriever::new(query, ReferenceEncoder::seeded(*s, shape)),
                }
            }
            EncoderSource::Weights { query, context } => {
                let q = ReferenceEncoder::load(&self.resolve(query))?;
                match context {
                    None => Ok(ReferenceRetriever::shared(q)),
                    Some(c) => ReferenceRetriever::new(q, ReferenceEncoder::load(&self.resolve(c))?),
                }
            }
        }
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        match &self.generator.template_file {
            Some(path) => PromptTemplate::load(&self.resolve(path)),
            None => Ok(PromptTemplate::new(self.generator.template, self.generator.layout)),
        }
    }

    /// Mock model spec covering every corpus text.
    pub fn mock_spec(settings: &MockGeneratorSettings, corpus: &[CorpusDocument]) -> MockLmSpec {
        let texts: Vec<String> = corpus.iter().map(|d| d.text.clone()).collect();
        let mut spec = MockLmSpec::hashed(&texts, settings.answer.clone(), settings.seed, settings.scale);
        spec.slot_scale = settings.slot_scale.clone();
        spec
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))
}
