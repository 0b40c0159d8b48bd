use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::report::{AuditReport, QueryReport, TokenSaliency};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Ansi,
    Html,
    Json,
}

const SPECIAL_PIECES: [&str; 3] = ["[sot]", "[eot]", "[pad]"];

/// Heat bucket in `-4..=4` of `s` relative to the largest magnitude in its
/// sequence.
pub fn saliency_bucket(s: f64, max_abs: f64) -> i32 {
    if max_abs <= 0.0 || !s.is_finite() {
        return 0;
    }
    (4.0 * s / max_abs).round().clamp(-4.0, 4.0) as i32
}

/// Legend chip for a document, e.g. `Doc. 5 54%`.
pub fn influence_chip(doc_number: usize, percent: f64) -> String {
    format!("Doc. {doc_number} {percent:.0}%")
}

/// Renders a validated report.
pub fn render_report(report: &AuditReport, format: Format) -> Result<String> {
    report.validate()?;
    match format {
        Format::Json => report.to_json(),
        Format::Ansi => Ok(render_ansi(report)),
        Format::Html => Ok(render_html(report)),
    }
}

fn visible(t: &TokenSaliency) -> (Vec<(&str, f64)>, f64) {
    let pairs: Vec<(&str, f64)> = t
        .tokens
        .iter()
        .zip(&t.saliency)
        .filter(|(p, _)| !SPECIAL_PIECES.contains(&p.as_str()))
        .map(|(p, s)| (p.as_str(), *s))
        .collect();
    let max_abs = pairs.iter().map(|(_, s)| s.abs()).fold(0.0, f64::max);
    (pairs, max_abs)
}

fn ansi_color(bucket: i32) -> Option<u8> {
    const POS: [u8; 4] = [224, 217, 210, 196];
    const NEG: [u8; 4] = [189, 147, 105, 63];
    match bucket {
        0 => None,
        b if b > 0 => Some(POS[(b - 1) as usize]),
        b => Some(NEG[(-b - 1) as usize]),
    }
}

fn ansi_tokens(t: &TokenSaliency) -> String {
    let (pairs, max_abs) = visible(t);
    pairs
        .iter()
        .map(|(p, s)| match ansi_color(saliency_bucket(*s, max_abs)) {
            Some(c) => format!("\x1b[48;5;{c}m\x1b[38;5;16m{p}\x1b[0m"),
            None => p.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn summary_lines(q: &QueryReport) -> Vec<String> {
    let mut lines = Vec::new();
    if let Some(a) = &q.alignment {
        let wargs: Vec<String> = a.warg_by_p.iter().map(|(p, w)| format!("p={p}: {w:.3}")).collect();
        lines.push(format!("WARG {}", wargs.join(", ")));
        let rho = a.spearman.map_or_else(|| "undefined".to_string(), |r| format!("{r:.3}"));
        lines.push(format!(
            "Spearman {rho}; wasted retrieval: {}; noise distraction: {}",
            a.wasted_retrieval, a.noise_distraction
        ));
    }
    lines
}

fn render_ansi(report: &AuditReport) -> String {
    let mut out = String::new();
    for q in &report.queries {
        let _ = writeln!(out, "\x1b[1mQuery {}\x1b[0m: {}", q.index + 1, q.query);
        if let Some(e) = &q.error {
            let _ = writeln!(out, "  error [{}]: {}", e.code, e.message);
            continue;
        }
        if let Some(r) = &q.retriever {
            let _ = writeln!(out, "  query saliency: {}", ansi_tokens(&r.query));
        }
        if let Some(g) = &q.generator {
            let _ = writeln!(out, "  answer: {}", g.answer.concat());
            if let Some(r) = &q.retriever {
                for (i, doc) in r.documents.iter().enumerate() {
                    let _ = writeln!(out, "  [{}] {}", influence_chip(i + 1, g.influence_percent[i]), ansi_tokens(doc));
                }
            }
        }
        for line in summary_lines(q) {
            let _ = writeln!(out, "  {line}");
        }
        out.push('\n');
    }
    if let Some(r) = &report.corpus.failure_rates {
        let _ = writeln!(
            out,
            "Failure rates over {} queries: wasted retrieval {:.1}%, noise distraction {:.1}%",
            r.queries, r.wasted_retrieval, r.noise_distraction
        );
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn html_style(bucket: i32) -> String {
    let alpha = f64::from(bucket.abs()) / 4.0;
    if bucket >= 0 {
        format!("background:rgba(220,40,40,{alpha:.2})")
    } else {
        format!("background:rgba(40,90,220,{alpha:.2})")
    }
}

fn html_tokens(t: &TokenSaliency) -> String {
    let (pairs, max_abs) = visible(t);
    pairs
        .iter()
        .map(|(p, s)| {
            let b = saliency_bucket(*s, max_abs);
            format!("<span class=\"tok b{b}\" style=\"{}\" title=\"{s:.4}\">{}</span>", html_style(b), escape(p))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn render_html(report: &AuditReport) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>RAG audit</title>\n<style>\
body{font-family:sans-serif;max-width:60em;margin:auto}.tok{padding:0 2px;border-radius:3px}\
.chip{display:inline-block;padding:1px 6px;border-radius:8px;margin-right:6px;font-weight:bold}\
.pos{background:#f6c6c6}.neg{background:#c6d4f6}.doc{margin:.4em 0}.err{color:#a00}\
</style></head><body>\n",
    );
    for q in &report.queries {
        let _ = writeln!(out, "<section><h2>Query {}</h2>", q.index + 1);
        if let Some(e) = &q.error {
            let _ = writeln!(out, "<p>{}</p><p class=\"err\">error [{}]: {}</p></section>", escape(&q.query), e.code, escape(&e.message));
            continue;
        }
        if let Some(r) = &q.retriever {
            let _ = writeln!(out, "<p class=\"query\">{}</p>", html_tokens(&r.query));
        }
        if let (Some(g), Some(r)) = (&q.generator, &q.retriever) {
            let _ = writeln!(out, "<p class=\"answer\"><b>Answer:</b> {}</p>", escape(&g.answer.concat()));
            for (i, doc) in r.documents.iter().enumerate() {
                let pct = g.influence_percent[i];
                let class = if pct < 0.0 { "neg" } else { "pos" };
                let _ = writeln!(
                    out,
                    "<div class=\"doc\"><span class=\"chip {class}\">{}</span>{}</div>",
                    influence_chip(i + 1, pct),
                    html_tokens(doc)
                );
            }
        }
        for line in summary_lines(q) {
            let _ = writeln!(out, "<p>{}</p>", escape(&line));
        }
        out.push_str("</section>\n");
    }
    if let Some(r) = &report.corpus.failure_rates {
        let _ = writeln!(
            out,
            "<p>Failure rates over {} queries: wasted retrieval {:.1}%, noise distraction {:.1}%</p>",
            r.queries, r.wasted_retrieval, r.noise_distraction
        );
    }
    out.push_str("</body></html>\n");
    out
}
