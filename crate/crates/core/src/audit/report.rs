use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentRecord, FailureRates};
use crate::error::{Error, Result};
use crate::retriever::BaselineMode;
use crate::shapley::{AttributionMatrix, Method};

use super::config::OrderingCondition;

pub const SCHEMA_VERSION: &str = "1.0.0";

/// The versioned JSON Schema of [`AuditReport`].
pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");

/// A number that may be undefined, with the reason when it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nullable {
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Nullable {
    pub fn of(result: Result<f64>) -> Self {
        match result {
            Ok(v) if v.is_finite() => Nullable { value: Some(v), reason: None },
            Ok(_) => Nullable { value: None, reason: Some("non_finite".into()) },
            Err(e) => Nullable { value: None, reason: Some(reason_code(&e).into()) },
        }
    }

    pub fn missing(reason: &str) -> Self {
        Nullable { value: None, reason: Some(reason.into()) }
    }
}

/// Stable machine-readable code for an error.
pub fn reason_code(e: &Error) -> &'static str {
    match e {
        Error::ArityTooLarge { .. } => "arity_too_large",
        Error::Oracle { source, .. } | Error::McExhausted { source, .. } | Error::Scorer { source, .. } => {
            reason_code(source)
        }
        Error::InvalidConfig(_) => "invalid_config",
        Error::RankDeficient { .. } => "rank_deficient",
        Error::MissingAnchor(_) => "missing_anchor",
        Error::DimensionMismatch { .. } | Error::Shape(_) => "shape_mismatch",
        Error::InvalidSteps(_) => "invalid_steps",
        Error::UnknownSpecialToken(_) => "unknown_special_token",
        Error::DegenerateDenominator(_) => "degenerate_denominator",
        Error::Transport(_) => "transport",
        Error::Auth(_) => "auth",
        Error::Alignment(_) => "token_alignment",
        Error::EmptyGeneration => "empty_generation",
        Error::Precondition(_) => "precondition",
        Error::EmptyInput(_) => "empty_input",
        Error::NonFinite { .. } => "non_finite",
        Error::ZeroVariance(_) => "zero_variance",
        Error::InsufficientData { .. } => "insufficient_data",
        Error::InvalidPersistence(_) => "invalid_persistence",
        Error::Template(_) => "template",
        Error::Schema(_) => "schema",
        Error::Weights(_) => "weights",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    /// SHA-256 of the canonical config JSON.
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub ordering: OrderingCondition,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedDocument {
    pub id: String,
    pub text: String,
    pub score: f64,
    /// 0-based retriever rank.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSaliency {
    pub tokens: Vec<String>,
    pub saliency: Vec<f64>,
    /// `Σ saliency / (s(x) - s(baseline))`.
    pub additivity: Nullable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverSection {
    pub baseline: BaselineMode,
    pub steps: usize,
    /// Query saliency summed over the ranked documents.
    pub query: TokenSaliency,
    /// One entry per ranked document, in retriever order.
    pub documents: Vec<TokenSaliency>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub answer: Vec<String>,
    /// Estimator actually run; exact when the pool would cover every
    /// coalition anyway.
    pub method: Method,
    /// Ranked-document indices in prompt order.
    pub prompt_order: Vec<usize>,
    /// Rows in retriever order.
    pub attribution: AttributionMatrix,
    /// Mean attribution per document, retriever order.
    pub importances: Vec<f64>,
    /// Signed share of total absolute importance, in percent.
    pub influence_percent: Vec<f64>,
    /// Largest `|Σ_i β_ij - (v_j(D) - v_j(∅))|`.
    pub efficiency_error: f64,
    /// Distinct coalitions evaluated.
    pub coalitions: usize,
    /// Model scoring calls issued.
    pub lm_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryReport {
    pub index: usize,
    pub query: String,
    /// Retrieved documents after the ordering condition's deduplication,
    /// in retriever order.
    pub documents: Vec<RankedDocument>,
    /// Ids removed as duplicates.
    pub dropped_duplicates: Vec<String>,
    pub retriever: Option<RetrieverSection>,
    pub generator: Option<GeneratorSection>,
    pub alignment: Option<AlignmentRecord>,
    pub error: Option<QueryError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WargSummary {
    pub mean: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSummary {
    pub queries: usize,
    pub failed_queries: usize,
    pub failure_rates: Option<FailureRates>,
    pub warg: BTreeMap<String, WargSummary>,
    pub spearman_mean: Nullable,
    pub bootstrap: usize,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditReport {
    pub schema_version: String,
    pub provenance: Provenance,
    pub queries: Vec<QueryReport>,
    pub corpus: CorpusSummary,
}

impl AuditReport {
    /// Canonical JSON: pretty-printed with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates a report.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: AuditReport = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    /// Checks the invariants serde cannot: version, shape agreement and
    /// finiteness.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema version {} is not {SCHEMA_VERSION}", self.schema_version));
        }
        for q in &self.queries {
            let k = q.documents.len();
            let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
            if let Some(r) = &q.retriever {
                if r.documents.len() != k {
                    return bad(format!("query {}: {} saliency entries for {k} documents", q.index, r.documents.len()));
                }
                for t in std::iter::once(&r.query).chain(&r.documents) {
                    if t.tokens.len() != t.saliency.len() || !finite(&t.saliency) {
                        return bad(format!("query {}: malformed saliency", q.index));
                    }
                }
            }
            if let Some(g) = &q.generator {
                let m = g.answer.len();
                if g.attribution.k() != k || g.attribution.m() != m || g.importances.len() != k {
                    return bad(format!("query {}: attribution shape mismatch", q.index));
                }
                if !finite(&g.importances) || !g.attribution.entries.iter().all(|r| finite(r)) {
                    return bad(format!("query {}: non-finite attribution", q.index));
                }
                let mut order = g.prompt_order.clone();
                order.sort_unstable();
                if order != (0..k).collect::<Vec<_>>() {
                    return bad(format!("query {}: prompt order is not a permutation", q.index));
                }
            }
            if let Some(a) = &q.alignment {
                if a.warg_by_p.values().any(|w| !(0.0..=1.0).contains(w)) {
                    return bad(format!("query {}: WARG outside [0, 1]", q.index));
                }
            }
            if q.error.is_none() && (q.retriever.is_none() || q.generator.is_none() || q.alignment.is_none()) {
                return bad(format!("query {}: missing sections without an error", q.index));
            }
        }
        Ok(())
    }

    pub fn has_errors(&self) -> bool {
        self.queries.iter().any(|q| q.error.is_some())
    }
}
