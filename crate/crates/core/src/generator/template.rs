use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RANKED_INSTRUCTION: &str = "Use the following retrieved documents, ranked from highest to lowest relevance, \
to answer the user's query. Be thorough and accurate, and cite documents when useful. \
Keep the answer under 200 words.";

pub const GENERIC_INSTRUCTION: &str = "Use the following documents to answer the user's query. \
Be thorough and accurate, and cite documents when useful. Keep the answer under 200 words.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemplateVariant {
    #[default]
    Ranked,
    Generic,
}

/// Where the instruction goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoleLayout {
    /// Instruction as the system message, documents and query as the user
    /// message.
    #[default]
    SystemUser,
    /// Everything in one user message.
    UserOnly,
}

fn default_document_format() -> String {
    "Document {i}: {text}".into()
}

fn default_query_format() -> String {
    "Query: {query}".into()
}

fn default_separator() -> String {
    "\n\n".into()
}

/// How a query and an ordered document list become a prompt.
///
/// `system` and `user` optionally override the message bodies; they may
/// use the slots `{instruction}`, `{documents}` and `{query}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    #[serde(default)]
    pub layout: RoleLayout,
    /// Format of one document slot, with `{i}` (1-based) and `{text}`.
    #[serde(default = "default_document_format")]
    pub document_format: String,
    #[serde(default = "default_query_format")]
    pub query_format: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(TemplateVariant::Ranked, RoleLayout::SystemUser)
    }
}

impl PromptTemplate {
    pub fn new(variant: TemplateVariant, layout: RoleLayout) -> Self {
        let instruction = match variant {
            TemplateVariant::Ranked => RANKED_INSTRUCTION,
            TemplateVariant::Generic => GENERIC_INSTRUCTION,
        };
        PromptTemplate {
            instruction: instruction.into(),
            layout,
            document_format: default_document_format(),
            query_format: default_query_format(),
            separator: default_separator(),
            system: None,
            user: None,
        }
    }

    pub fn ranked(layout: RoleLayout) -> Self {
        Self::new(TemplateVariant::Ranked, layout)
    }

    pub fn generic(layout: RoleLayout) -> Self {
        Self::new(TemplateVariant::Generic, layout)
    }

    /// Parses a JSON template and checks its slots.
    pub fn from_json(text: &str) -> Result<Self> {
        let t: PromptTemplate = serde_json::from_str(text).map_err(|e| Error::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        fill(&self.document_format, &[("i", ""), ("text", "")])?;
        fill(&self.query_format, &[("query", "")])?;
        let outer = [("instruction", ""), ("documents", ""), ("query", "")];
        for body in [&self.system, &self.user].into_iter().flatten() {
            fill(body, &outer)?;
        }
        if self.system.is_some() && self.layout == RoleLayout::UserOnly {
            return Err(Error::Template("a system body needs the system_user layout".into()));
        }
        Ok(())
    }

    /// Renders `docs` in the given order, numbered `1..=docs.len()`.
    pub fn render(&self, query: &str, docs: &[&str]) -> Result<Prompt> {
        let slots = docs
            .iter()
            .enumerate()
            .map(|(i, text)| fill(&self.document_format, &[("i", &(i + 1).to_string()), ("text", text)]))
            .collect::<Result<Vec<_>>>()?;
        let documents = slots.join(&self.separator);
        let query_line = fill(&self.query_format, &[("query", query)])?;
        let values = [("instruction", self.instruction.as_str()), ("documents", &documents), ("query", &query_line)];
        let join = |parts: &[&str]| {
            parts
                .iter()
                .filter(|p| !p.is_empty())
                .copied()
                .collect::<Vec<_>>()
                .join(&self.separator)
        };
        let user = match &self.user {
            Some(body) => fill(body, &values)?,
            None => match self.layout {
                RoleLayout::SystemUser => join(&[&documents, &query_line]),
                RoleLayout::UserOnly => join(&[&self.instruction, &documents, &query_line]),
            },
        };
        let system = match self.layout {
            RoleLayout::UserOnly => None,
            RoleLayout::SystemUser => Some(match &self.system {
                Some(body) => fill(body, &values)?,
                None => self.instruction.clone(),
            }),
        };
        Ok(Prompt { system, user })
    }
}

/// Single-pass `{name}` substitution. `{{` and `}}` escape braces; unknown
/// slot names are errors. Substituted text is never rescanned.
fn fill(template: &str, values: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('}') {
            return Err(Error::Template(format!("unmatched '}}' in {template:?}")));
        }
        let close = tail
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed slot in {template:?}")))?;
        let name = &tail[1..close];
        let value = values
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Template(format!("unknown slot {{{name}}}")))?;
        out.push_str(value.1);
        rest = &tail[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// A rendered prompt as role messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
}

impl Prompt {
    /// Flat text sent to a completions endpoint: the messages separated by
    /// blank lines, followed by a blank line before the answer.
    pub fn to_text(&self) -> String {
        let mut text = String::new();
        if let Some(system) = &self.system {
            text.push_str(system);
            text.push_str("\n\n");
        }
        text.push_str(&self.user);
        text.push_str("\n\n");
        text
    }
}

/// Renders the prompt for `query` and `docs` (in order) with `template`.
pub fn create_prompt(query: &str, docs: &[&str], template: &PromptTemplate) -> Result<Prompt> {
    template.render(query, docs)
}
