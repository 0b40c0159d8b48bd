//! Prompt construction, the constrained-generation value function, and
//! document-level generator attribution.

mod template;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use template::{
    create_prompt, Prompt, PromptTemplate, RoleLayout, TemplateVariant, GENERIC_INSTRUCTION, RANKED_INSTRUCTION,
};

use crate::error::{Error, Result};
use crate::gateway::{forced_continuation_logprobs, DecodingConfig, LanguageModel};
use crate::shapley::{attribute, AttributionMatrix, Coalition, Method, SamplerConfig, SetValueOracle, MAX_PLAYERS};

/// The unperturbed generation every constrained evaluation is forced to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// Flat prompt text for the full document list.
    pub prompt: String,
    pub answer: Vec<String>,
    /// Character offset of each answer token within the answer text.
    pub token_offsets: Vec<usize>,
    pub decoding: DecodingConfig,
}

impl GenerationRecord {
    pub fn answer_text(&self) -> String {
        self.answer.concat()
    }
}

/// Greedy generation for the full document list.
pub fn generate_unperturbed<L: LanguageModel + ?Sized>(
    query: &str,
    documents: &[&str],
    template: &PromptTemplate,
    client: &L,
    decoding: &DecodingConfig,
) -> Result<GenerationRecord> {
    if decoding.max_tokens == 0 {
        return Err(Error::InvalidConfig("max_tokens must be at least 1".into()));
    }
    let prompt = create_prompt(query, documents, template)?.to_text();
    let mut answer = client.generate(&prompt, decoding)?;
    answer.truncate(decoding.max_tokens);
    if answer.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    let mut at = 0;
    let token_offsets = answer
        .iter()
        .map(|t| {
            let start = at;
            at += t.chars().count();
            start
        })
        .collect();
    Ok(GenerationRecord { prompt, answer, token_offsets, decoding: *decoding })
}

/// Numeric form of a forced token's likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueScale {
    #[default]
    Probability,
    LogProbability,
}

/// `v_j(D′)`: the likelihood of original answer token `j` when the prompt
/// holds only the documents of `D′` (in their original relative order,
/// renumbered from 1) and the answer prefix is teacher-forced.
///
/// Values are cached per coalition, so each distinct coalition costs one
/// model call for the lifetime of the oracle.
pub struct ConstrainedValueOracle<'a, L: LanguageModel + ?Sized> {
    query: String,
    documents: Vec<String>,
    answer: Vec<String>,
    template: PromptTemplate,
    client: &'a L,
    scale: ValueScale,
    cache: Mutex<HashMap<Coalition, Vec<f64>>>,
    calls: AtomicUsize,
}

impl<'a, L: LanguageModel + ?Sized> ConstrainedValueOracle<'a, L> {
    pub fn new(
        query: impl Into<String>,
        documents: Vec<String>,
        answer: Vec<String>,
        template: PromptTemplate,
        client: &'a L,
        scale: ValueScale,
    ) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::EmptyInput("documents"));
        }
        if documents.len() > MAX_PLAYERS {
            return Err(Error::Precondition(format!("at most {MAX_PLAYERS} documents are supported")));
        }
        if answer.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        Ok(ConstrainedValueOracle {
            query: query.into(),
            documents,
            answer,
            template,
            client,
            scale,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        })
    }

    /// Builds the oracle for a recorded generation.
    pub fn from_record(
        query: impl Into<String>,
        documents: Vec<String>,
        record: &GenerationRecord,
        template: PromptTemplate,
        client: &'a L,
        scale: ValueScale,
    ) -> Result<Self> {
        Self::new(query, documents, record.answer.clone(), template, client, scale)
    }

    /// Prompt text for a coalition.
    pub fn prompt_for(&self, coalition: Coalition) -> Result<String> {
        let docs: Vec<&str> = coalition.members().into_iter().map(|i| self.documents[i].as_str()).collect();
        Ok(create_prompt(&self.query, &docs, &self.template)?.to_text())
    }

    /// Model calls issued so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Distinct coalitions evaluated so far.
    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn scale(&self) -> ValueScale {
        self.scale
    }
}

impl<L: LanguageModel + ?Sized> SetValueOracle for ConstrainedValueOracle<'_, L> {
    fn arity(&self) -> usize {
        self.documents.len()
    }

    fn output_dim(&self) -> usize {
        self.answer.len()
    }

    fn evaluate(&self, coalition: Coalition) -> Result<Vec<f64>> {
        if coalition.mask() >> self.documents.len() != 0 {
            return Err(Error::Precondition(format!("coalition {:?} is not a subset of D", coalition.members())));
        }
        if let Some(v) = self.cache.lock().expect("cache lock").get(&coalition) {
            return Ok(v.clone());
        }
        let prompt = self.prompt_for(coalition)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let lp = forced_continuation_logprobs(self.client, &prompt, &self.answer)?;
        let values: Vec<f64> = match self.scale {
            ValueScale::Probability => lp.into_iter().map(f64::exp).collect(),
            ValueScale::LogProbability => lp,
        };
        self.cache.lock().expect("cache lock").insert(coalition, values.clone());
        Ok(values)
    }

    fn parallelism(&self) -> usize {
        self.client.max_in_flight()
    }
}

/// Attribution matrix with rows in retrieval order.
pub fn attribute_documents<L: LanguageModel + ?Sized>(
    oracle: &ConstrainedValueOracle<'_, L>,
    method: Method,
    sampler: &SamplerConfig,
) -> Result<AttributionMatrix> {
    attribute(oracle, method, sampler)
}

/// Mean attribution over answer tokens for each document.
pub fn document_importance(matrix: &AttributionMatrix) -> Vec<f64> {
    let m = matrix.m() as f64;
    matrix.entries.iter().map(|row| row.iter().sum::<f64>() / m).collect()
}

/// Experimental: a value function over query words instead of documents.
/// All documents stay in the prompt; the query keeps only the coalition's
/// words, in order.
pub struct QueryTokenOracle<'a, L: LanguageModel + ?Sized> {
    words: Vec<String>,
    documents: Vec<String>,
    answer: Vec<String>,
    template: PromptTemplate,
    client: &'a L,
    scale: ValueScale,
}

impl<'a, L: LanguageModel + ?Sized> QueryTokenOracle<'a, L> {
    pub fn new(
        query: &str,
        documents: Vec<String>,
        answer: Vec<String>,
        template: PromptTemplate,
        client: &'a L,
        scale: ValueScale,
    ) -> Result<Self> {
        let words: Vec<String> = query.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err(Error::EmptyInput("query"));
        }
        if words.len() > MAX_PLAYERS {
            return Err(Error::Precondition(format!("at most {MAX_PLAYERS} query words are supported")));
        }
        if answer.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        Ok(QueryTokenOracle { words, documents, answer, template, client, scale })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl<L: LanguageModel + ?Sized> SetValueOracle for QueryTokenOracle<'_, L> {
    fn arity(&self) -> usize {
        self.words.len()
    }

    fn output_dim(&self) -> usize {
        self.answer.len()
    }

    fn evaluate(&self, coalition: Coalition) -> Result<Vec<f64>> {
        let query = coalition
            .members()
            .into_iter()
            .map(|i| self.words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let docs: Vec<&str> = self.documents.iter().map(String::as_str).collect();
        let prompt = create_prompt(&query, &docs, &self.template)?.to_text();
        let lp = forced_continuation_logprobs(self.client, &prompt, &self.answer)?;
        Ok(match self.scale {
            ValueScale::Probability => lp.into_iter().map(f64::exp).collect(),
            ValueScale::LogProbability => lp,
        })
    }

    fn parallelism(&self) -> usize {
        self.client.max_in_flight()
    }
}
