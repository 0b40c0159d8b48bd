use serde::{Deserialize, Serialize};

use super::config::AuditConfig;
use super::report::{AuditReport, Nullable};
use crate::error::{Error, Result};
use crate::faithfulness::{aipc_for, AipcSummary, DocumentMaskScorer, MaskableScorer, PerturbationCurve, RetrieverMaskScorer};
use crate::gateway::LanguageModel;
use crate::generator::ConstrainedValueOracle;
use crate::retriever::{ReferenceRetriever, Side, TokenSequence};

/// AIPC scores for one audited query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryFaithfulness {
    pub index: usize,
    /// Query tokens masked against the sum of scores over the ranked
    /// documents, which is what the stored query saliency explains.
    pub retriever_query: Nullable,
    /// One entry per ranked document, its own tokens masked.
    pub retriever_documents: Vec<Nullable>,
    /// Whole documents removed from the prompt in importance order.
    pub generator_documents: Nullable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaithfulnessReport {
    pub queries: Vec<QueryFaithfulness>,
    pub retriever_query: Option<AipcSummary>,
    pub retriever_documents: Option<AipcSummary>,
    pub generator_documents: Option<AipcSummary>,
}

/// Labelled MoRF/LeRF pair, e.g. `q0_doc2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePair {
    pub label: String,
    pub morf: PerturbationCurve,
    pub lerf: PerturbationCurve,
}

struct QuerySumScorer<'a> {
    parts: Vec<RetrieverMaskScorer<'a>>,
}

impl MaskableScorer for QuerySumScorer<'_> {
    fn positions(&self) -> usize {
        self.parts[0].positions()
    }

    fn score(&self, masked: &[usize]) -> Result<f64> {
        self.parts.iter().map(|p| p.score(masked)).sum()
    }
}

fn record(
    curves: &mut Vec<CurvePair>,
    label: String,
    result: Result<(f64, PerturbationCurve, PerturbationCurve)>,
) -> Nullable {
    match result {
        Ok((v, morf, lerf)) => {
            curves.push(CurvePair { label, morf, lerf });
            Nullable::of(Ok(v))
        }
        Err(e) => Nullable::of(Err(e)),
    }
}

/// Scores every attribution stored in `report` with perturbation curves.
/// Retriever curves replace tokens by `[unk]`; generator curves drop whole
/// documents and score the recorded answer with `lm`.
pub fn faithfulness_from_report<L: LanguageModel + ?Sized>(
    config: &AuditConfig,
    report: &AuditReport,
    lm: &L,
) -> Result<(FaithfulnessReport, Vec<CurvePair>)> {
    report.validate()?;
    let retriever: ReferenceRetriever = config.build_retriever()?;
    let template = config.template()?;
    let (q_tok, d_tok) = (retriever.tokenizer(Side::Query), retriever.tokenizer(Side::Document));
    let mut curves = Vec::new();
    let mut queries = Vec::new();
    for q in report.queries.iter().filter(|q| q.error.is_none()) {
        let (Some(ret), Some(generator)) = (&q.retriever, &q.generator) else {
            return Err(Error::Schema(format!("query {} lacks attribution sections", q.index)));
        };
        let q_seq = q_tok.encode(&q.query);
        let d_seqs: Vec<TokenSequence> = q.documents.iter().map(|d| d_tok.encode(&d.text)).collect();
        if q_seq.len() != ret.query.saliency.len()
            || d_seqs.iter().zip(&ret.documents).any(|(d, s)| d.len() != s.saliency.len())
        {
            return Err(Error::Schema(format!(
                "query {}: stored saliency does not match the configured tokenizer",
                q.index
            )));
        }

        let retriever_documents = d_seqs
            .iter()
            .zip(&ret.documents)
            .enumerate()
            .map(|(r, (d, s))| {
                let scorer = RetrieverMaskScorer::new(&retriever, &q_seq, d, Side::Document);
                let sal = scorer.restrict(&s.saliency);
                record(&mut curves, format!("q{}_doc{r}", q.index), aipc_for(&scorer, &sal))
            })
            .collect();

        let parts: Vec<RetrieverMaskScorer> =
            d_seqs.iter().map(|d| RetrieverMaskScorer::new(&retriever, &q_seq, d, Side::Query)).collect();
        let sal = parts[0].restrict(&ret.query.saliency);
        let retriever_query =
            record(&mut curves, format!("q{}_query", q.index), aipc_for(&QuerySumScorer { parts }, &sal));

        let texts: Vec<String> = generator.prompt_order.iter().map(|&r| q.documents[r].text.clone()).collect();
        let importance: Vec<f64> = generator.prompt_order.iter().map(|&r| generator.importances[r]).collect();
        let oracle = ConstrainedValueOracle::new(
            &q.query,
            texts,
            generator.answer.clone(),
            template.clone(),
            lm,
            config.generator.value_scale,
        )?;
        let generator_documents = record(
            &mut curves,
            format!("q{}_generator", q.index),
            aipc_for(&DocumentMaskScorer { oracle: &oracle }, &importance),
        );
        queries.push(QueryFaithfulness { index: q.index, retriever_query, retriever_documents, generator_documents });
    }

    let metrics = &config.metrics;
    let seed = config.seed.unwrap_or(0);
    let summary = |values: Vec<f64>| -> Result<Option<AipcSummary>> {
        if values.is_empty() {
            return Ok(None);
        }
        AipcSummary::from_values(&values, metrics.bootstrap, metrics.level, seed).map(Some)
    };
    let retriever_query = summary(queries.iter().filter_map(|q| q.retriever_query.value).collect())?;
    let retriever_documents =
        summary(queries.iter().flat_map(|q| q.retriever_documents.iter().filter_map(|n| n.value)).collect())?;
    let generator_documents = summary(queries.iter().filter_map(|q| q.generator_documents.value).collect())?;
    Ok((FaithfulnessReport { queries, retriever_query, retriever_documents, generator_documents }, curves))
}
