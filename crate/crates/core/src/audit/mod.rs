//! The end-to-end audit: retrieval, retriever saliency, generator
//! attribution, alignment metrics and corpus aggregates, plus report
//! rendering and the Shapley estimator benchmark.

mod bench;
mod config;
mod faith;
mod render;
mod report;

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use bench::{bench_shap, bench_shap_csv, BenchConfig, BenchRow};
pub use config::{
    AttributionSettings, AuditConfig, CorpusDocument, DocumentSource, EncoderSource, GeneratorClient,
    GeneratorSettings, MetricSettings, MockGeneratorSettings, OrderingCondition, QuerySource, RankingEntry,
    RetrieverSettings,
};
pub use faith::{faithfulness_from_report, CurvePair, FaithfulnessReport, QueryFaithfulness};
pub use render::{influence_chip, render_report, saliency_bucket, Format};
pub use report::{
    reason_code, AuditReport, CorpusSummary, GeneratorSection, Nullable, Provenance, QueryError, QueryReport,
    RankedDocument, RetrieverSection, TokenSaliency, WargSummary, REPORT_SCHEMA, SCHEMA_VERSION,
};

use crate::alignment::{failure_rates, round1, AlignmentRecord, Ranking};
use crate::error::{Error, Result};
use crate::faithfulness::{bootstrap_ci, mean};
use crate::gateway::{DecodingConfig, GradientOracle, LanguageModel, MockLm, OpenAiClient};
use crate::generator::{
    attribute_documents, document_importance, generate_unperturbed, ConstrainedValueOracle, PromptTemplate,
};
use crate::parallel::parallel_map;
use crate::retriever::{
    build_baseline, integrate, retrieve_topk, IgPath, ReferenceRetriever, SaliencyVector, Side, TokenSequence,
};
use crate::shapley::{Method, MAX_PLAYERS};

/// Which parts of the per-query pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Retrieval, both attributions and alignment metrics.
    Full,
    /// Retrieval and token saliency only; no language model is contacted.
    Retriever,
    /// Retrieval and document attribution, without saliency or metrics.
    Generator,
}

/// The language model described by the config. HTTP backends are probed
/// once so capability problems surface before any query runs.
pub fn build_model(config: &AuditConfig) -> Result<Box<dyn LanguageModel>> {
    match &config.generator.client {
        GeneratorClient::Mock(settings) => {
            let corpus = config.load_corpus()?;
            Ok(Box::new(MockLm::new(AuditConfig::mock_spec(settings, &corpus))?.with_max_in_flight(4)))
        }
        GeneratorClient::Http(c) => {
            let client = OpenAiClient::new(c.clone())?;
            client.probe()?;
            Ok(Box::new(client))
        }
    }
}

fn build_gradient(config: &AuditConfig) -> Result<Option<OpenAiClient>> {
    config.retriever.gradient_endpoint.as_ref().map(|c| OpenAiClient::new(c.clone())).transpose()
}

/// Runs an audit with the clients described in `config`.
pub fn run_audit(config: &AuditConfig) -> Result<AuditReport> {
    let gradient = build_gradient(config)?;
    let lm = build_model(config)?;
    run_audit_with(config, &lm, gradient.as_ref().map(|g| g as &dyn GradientOracle))
}

/// Runs an audit against the given model and optional remote gradient
/// oracle (the in-process retriever is used otherwise).
pub fn run_audit_with<L: LanguageModel + ?Sized>(
    config: &AuditConfig,
    lm: &L,
    gradient: Option<&dyn GradientOracle>,
) -> Result<AuditReport> {
    let reports = process_queries(config, Some(lm), gradient, Stage::Full)?;
    let corpus_summary = summarize(&config.metrics, config.seed, &reports)?;
    Ok(AuditReport {
        schema_version: SCHEMA_VERSION.into(),
        provenance: Provenance {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: config_hash(config)?,
            seed: config.seed,
            ordering: config.ordering,
            method: config.attribution.method,
        },
        queries: reports,
        corpus: corpus_summary,
    })
}

/// Runs part of the pipeline and returns the per-query sections it fills.
/// Sections outside the stage stay empty.
pub fn run_stage(config: &AuditConfig, stage: Stage) -> Result<Vec<QueryReport>> {
    let gradient = build_gradient(config)?;
    let gradient = gradient.as_ref().map(|g| g as &dyn GradientOracle);
    match stage {
        Stage::Retriever => process_queries::<MockLm>(config, None, gradient, stage),
        _ => {
            let lm = build_model(config)?;
            process_queries(config, Some(&lm), gradient, stage)
        }
    }
}

/// Recomputes alignment records and corpus aggregates from the generator
/// sections already stored in `report`.
pub fn recompute_metrics(report: &mut AuditReport, metrics: &MetricSettings, seed: Option<u64>) -> Result<()> {
    for q in &mut report.queries {
        if let Some(g) = &q.generator {
            q.alignment = Some(AlignmentRecord::compute(
                &Ranking::identity(g.importances.len()),
                &metrics.rank_basis.apply(&g.importances),
                &metrics.p_grid,
                metrics.thresholds,
            )?);
        }
    }
    report.corpus = summarize(metrics, seed, &report.queries)?;
    report.validate()
}

fn process_queries<L: LanguageModel + ?Sized>(
    config: &AuditConfig,
    lm: Option<&L>,
    gradient: Option<&dyn GradientOracle>,
    stage: Stage,
) -> Result<Vec<QueryReport>> {
    config.validate()?;
    let sampler = config.attribution.sampler;
    if config.attribution.method != Method::Exact {
        sampler.validate(MAX_PLAYERS - 1)?;
    }
    let queries = config.load_queries()?;
    let corpus = config.load_corpus()?;
    let rankings = config.load_rankings()?;
    let retriever = config.build_retriever()?;
    let template = config.template()?;
    let doc_tokenizer = retriever.tokenizer(Side::Document);
    let corpus_tokens: Vec<TokenSequence> = corpus.iter().map(|d| doc_tokenizer.encode(&d.text)).collect();
    let ids: HashMap<&str, usize> = corpus.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();

    let ctx = QueryContext {
        config,
        corpus: &corpus,
        corpus_tokens: &corpus_tokens,
        ids: &ids,
        rankings: rankings.as_deref(),
        retriever: &retriever,
        gradient: gradient.unwrap_or(&retriever),
        template: &template,
        stage,
    };
    parallel_map(queries.len(), config.parallelism, |i| Ok(ctx.process(i, &queries[i], lm)))
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_hash(config: &AuditConfig) -> Result<String> {
    let canonical = serde_json::to_string(config)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Whitespace-collapsed lowercase text used for duplicate detection.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

struct QueryContext<'a> {
    config: &'a AuditConfig,
    corpus: &'a [CorpusDocument],
    corpus_tokens: &'a [TokenSequence],
    ids: &'a HashMap<&'a str, usize>,
    rankings: Option<&'a [RankingEntry]>,
    retriever: &'a ReferenceRetriever,
    gradient: &'a dyn GradientOracle,
    template: &'a PromptTemplate,
    stage: Stage,
}

struct Retrieved {
    documents: Vec<RankedDocument>,
    tokens: Vec<TokenSequence>,
    dropped: Vec<String>,
}

impl QueryContext<'_> {
    fn process<L: LanguageModel + ?Sized>(&self, index: usize, query: &str, lm: Option<&L>) -> QueryReport {
        let mut report = QueryReport {
            index,
            query: query.to_string(),
            documents: Vec::new(),
            dropped_duplicates: Vec::new(),
            retriever: None,
            generator: None,
            alignment: None,
            error: None,
        };
        if let Err(e) = self.fill(index, query, lm, &mut report) {
            log::warn!("query {index} failed: {e}");
            report.error = Some(QueryError { code: reason_code(&e).into(), message: e.to_string() });
        }
        report
    }

    fn fill<L: LanguageModel + ?Sized>(
        &self,
        index: usize,
        query: &str,
        lm: Option<&L>,
        report: &mut QueryReport,
    ) -> Result<()> {
        let q_tokens = self.retriever.tokenizer(Side::Query).encode(query);
        let retrieved = self.retrieve(query, &q_tokens)?;
        report.documents = retrieved.documents.clone();
        report.dropped_duplicates = retrieved.dropped.clone();
        let k = retrieved.documents.len();

        let mut prompt_order: Vec<usize> = (0..k).collect();
        if self.config.ordering.shuffles() {
            let seed = self.config.seed.ok_or_else(|| Error::InvalidConfig("shuffle requires a seed".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            prompt_order.shuffle(&mut rng);
        }

        if self.stage != Stage::Generator {
            report.retriever = Some(self.saliency(&q_tokens, &retrieved.tokens)?);
        }
        if self.stage == Stage::Retriever {
            return Ok(());
        }
        let lm = lm.ok_or_else(|| Error::Precondition("no language model configured".into()))?;
        let generator = self.attribute(query, &retrieved.documents, &prompt_order, lm)?;
        if self.stage == Stage::Full {
            let metrics = &self.config.metrics;
            report.alignment = Some(AlignmentRecord::compute(
                &Ranking::identity(k),
                &metrics.rank_basis.apply(&generator.importances),
                &metrics.p_grid,
                metrics.thresholds,
            )?);
        }
        report.generator = Some(generator);
        Ok(())
    }

    fn retrieve(&self, query: &str, q_tokens: &TokenSequence) -> Result<Retrieved> {
        let k = self.config.k;
        let ranked: Vec<(usize, f64)> = match self.rankings {
            Some(rankings) => {
                let entry = rankings
                    .iter()
                    .find(|r| r.query == query)
                    .ok_or_else(|| Error::Precondition(format!("no ranking for query {query:?}")))?;
                if entry.scores.len() != entry.ranked_doc_ids.len() {
                    return Err(Error::DimensionMismatch {
                        expected: entry.ranked_doc_ids.len(),
                        found: entry.scores.len(),
                    });
                }
                entry
                    .ranked_doc_ids
                    .iter()
                    .zip(&entry.scores)
                    .take(k)
                    .map(|(id, &s)| {
                        self.ids
                            .get(id.as_str())
                            .map(|&i| (i, s))
                            .ok_or_else(|| Error::Precondition(format!("unknown document id {id:?}")))
                    })
                    .collect::<Result<_>>()?
            }
            None => retrieve_topk(self.retriever, q_tokens, self.corpus_tokens, k.min(self.corpus.len()))?,
        };
        if ranked.is_empty() {
            return Err(Error::EmptyInput("retrieved documents"));
        }
        let mut seen = std::collections::HashSet::new();
        let mut out = Retrieved { documents: Vec::new(), tokens: Vec::new(), dropped: Vec::new() };
        for (corpus_index, score) in ranked {
            let doc = &self.corpus[corpus_index];
            if self.config.ordering.dedups() && !seen.insert(normalize_text(&doc.text)) {
                out.dropped.push(doc.id.clone());
                continue;
            }
            out.documents.push(RankedDocument {
                id: doc.id.clone(),
                text: doc.text.clone(),
                score,
                rank: out.documents.len(),
            });
            out.tokens.push(self.corpus_tokens[corpus_index].clone());
        }
        Ok(out)
    }

    fn saliency(&self, q_tokens: &TokenSequence, docs: &[TokenSequence]) -> Result<RetrieverSection> {
        let settings = &self.config.retriever;
        let (enc_q, enc_d) = (&self.retriever.query, &self.retriever.context);
        let q_emb = enc_q.embed(q_tokens)?;
        let q_base = build_baseline(q_tokens, enc_q, settings.baseline)?;
        let q_mask = q_tokens.attention_mask();
        let mut query_total = vec![0.0; q_tokens.len()];
        let mut query_gap = 0.0;
        let mut documents = Vec::with_capacity(docs.len());
        for d in docs {
            let d_emb = enc_d.embed(d)?;
            let d_base = build_baseline(d, enc_d, settings.baseline)?;
            let d_mask = d.attention_mask();
            let doc_ig = integrate(
                self.gradient,
                &IgPath { side: Side::Document, input: &d_emb, baseline: &d_base, mask: &d_mask, companion: &q_emb, companion_mask: &q_mask },
                settings.steps,
            )?;
            let query_ig = integrate(
                self.gradient,
                &IgPath { side: Side::Query, input: &q_emb, baseline: &q_base, mask: &q_mask, companion: &d_emb, companion_mask: &d_mask },
                settings.steps,
            )?;
            for (t, s) in query_total.iter_mut().zip(&query_ig.scores) {
                *t += s;
            }
            query_gap += query_ig.score_input - query_ig.score_baseline;
            documents.push(token_saliency(d, &doc_ig));
        }
        let total: f64 = query_total.iter().sum();
        let additivity = if query_gap.abs() < 1e-12 {
            Nullable::of(Err(Error::DegenerateDenominator(query_gap)))
        } else {
            Nullable::of(Ok(total / query_gap))
        };
        Ok(RetrieverSection {
            baseline: settings.baseline,
            steps: settings.steps,
            query: TokenSaliency { tokens: q_tokens.pieces.clone(), saliency: query_total, additivity },
            documents,
        })
    }

    fn attribute<L: LanguageModel + ?Sized>(
        &self,
        query: &str,
        documents: &[RankedDocument],
        prompt_order: &[usize],
        lm: &L,
    ) -> Result<GeneratorSection> {
        let settings = &self.config.generator;
        let k = documents.len();
        let texts: Vec<String> = prompt_order.iter().map(|&r| documents[r].text.clone()).collect();
        let text_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let decoding = DecodingConfig { max_tokens: settings.max_tokens, seed: self.config.seed.unwrap_or(0) };
        let record = generate_unperturbed(query, &text_refs, self.template, lm, &decoding)?;
        let oracle =
            ConstrainedValueOracle::from_record(query, texts, &record, self.template.clone(), lm, settings.value_scale)?;

        let sampler = self.config.attribution.sampler;
        let space = if k >= 63 { u64::MAX } else { 1u64 << k };
        let method = match self.config.attribution.method {
            Method::Exact => Method::Exact,
            _ if space <= sampler.perturbations as u64 => Method::Exact,
            m => m,
        };
        let in_prompt_order = attribute_documents(&oracle, method, &sampler)?;
        let mut position = vec![0; k];
        for (p, &r) in prompt_order.iter().enumerate() {
            position[r] = p;
        }
        let attribution = in_prompt_order.permute_rows(&position);
        let importances = document_importance(&attribution);
        let abs_total: f64 = importances.iter().map(|x| x.abs()).sum();
        let influence_percent = importances
            .iter()
            .map(|x| if abs_total > 0.0 { round1(100.0 * x / abs_total) } else { 0.0 })
            .collect();
        Ok(GeneratorSection {
            answer: record.answer,
            method,
            prompt_order: prompt_order.to_vec(),
            efficiency_error: attribution.efficiency_error(),
            attribution,
            importances,
            influence_percent,
            coalitions: oracle.cached(),
            lm_calls: oracle.calls(),
        })
    }
}

fn token_saliency(tokens: &TokenSequence, ig: &SaliencyVector) -> TokenSaliency {
    TokenSaliency {
        tokens: tokens.pieces.clone(),
        saliency: ig.scores.clone(),
        additivity: Nullable::of(ig.additivity_ratio()),
    }
}

fn summarize(metrics: &MetricSettings, seed: Option<u64>, reports: &[QueryReport]) -> Result<CorpusSummary> {
    let records: Vec<&AlignmentRecord> = reports.iter().filter_map(|r| r.alignment.as_ref()).collect();
    let owned: Vec<AlignmentRecord> = records.iter().map(|r| (*r).clone()).collect();
    let rates = if owned.is_empty() { None } else { Some(failure_rates(&owned)?.rounded()) };
    let seed = seed.unwrap_or(0);
    let mut warg = BTreeMap::new();
    if !records.is_empty() {
        for key in records[0].warg_by_p.keys() {
            let values: Vec<f64> = records.iter().map(|r| r.warg_by_p[key]).collect();
            let (ci_lower, ci_upper) = bootstrap_ci(&values, metrics.bootstrap, metrics.level, seed)?;
            warg.insert(key.clone(), WargSummary { mean: mean(&values), ci_lower, ci_upper });
        }
    }
    let rhos: Vec<f64> = records.iter().filter_map(|r| r.spearman).collect();
    let spearman_mean = if rhos.is_empty() { Nullable::missing("no_defined_values") } else { Nullable::of(Ok(mean(&rhos))) };
    Ok(CorpusSummary {
        queries: reports.len(),
        failed_queries: reports.iter().filter(|r| r.error.is_some()).count(),
        failure_rates: rates,
        warg,
        spearman_mean,
        bootstrap: metrics.bootstrap,
        level: metrics.level,
    })
}
