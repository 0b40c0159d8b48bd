use std::path::{Path, PathBuf};

use ragaudit::audit::{
    bench_shap, bench_shap_csv, build_model, config_hash, faithfulness_from_report, normalize_text, recompute_metrics,
    render_report, run_audit, run_audit_with, run_stage, AuditConfig, AuditReport, BenchConfig, Format,
    GeneratorClient, MetricSettings, OrderingCondition, Stage, REPORT_SCHEMA,
};
use ragaudit::gateway::MockLm;
use ragaudit::shapley::Method;
use ragaudit::Error;
use serde_json::Value;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/audit")
}

fn config() -> AuditConfig {
    AuditConfig::load(&fixture_dir().join("config.json")).unwrap()
}

fn with(f: impl FnOnce(&mut AuditConfig)) -> AuditConfig {
    let mut c = config();
    f(&mut c);
    c
}

/// Compares two JSON trees, allowing `tol` on numbers.
fn assert_json_close(a: &Value, b: &Value, tol: f64, path: &str) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= tol * (1.0 + x.abs()), "{path}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}: length");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                assert_json_close(u, v, tol, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            let kx: Vec<_> = x.keys().collect();
            let ky: Vec<_> = y.keys().collect();
            assert_eq!(kx, ky, "{path}: keys");
            for (k, u) in x {
                assert_json_close(u, &y[k], tol, &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let cfg = config();
    let a = run_audit(&cfg).unwrap().to_json().unwrap();
    let b = run_audit(&cfg).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    let parallel = with(|c| c.parallelism = 4);
    let c = run_audit(&parallel).unwrap();
    assert_eq!(c.queries, AuditReport::from_json(&a).unwrap().queries);
}

#[test]
fn golden_report() {
    let report = run_audit(&config()).unwrap();
    let golden_path = fixture_dir().join("golden_report.json");
    if std::env::var_os("RAGAUDIT_BLESS").is_some() {
        std::fs::write(&golden_path, report.to_json().unwrap()).unwrap();
    }
    let golden: Value = serde_json::from_str(&std::fs::read_to_string(&golden_path).unwrap()).unwrap();
    let actual = serde_json::to_value(&report).unwrap();
    assert_json_close(&actual, &golden, 1e-9, "$");
}

#[test]
fn attribution_is_efficient_for_every_query() {
    let report = run_audit(&config()).unwrap();
    assert!(!report.has_errors());
    for q in &report.queries {
        let g = q.generator.as_ref().unwrap();
        let gap = g.attribution.value_gap();
        for (sum, expected) in g.attribution.column_sums().iter().zip(&gap) {
            assert!((sum - expected).abs() < 1e-6);
        }
        let mean_gap = gap.iter().sum::<f64>() / gap.len() as f64;
        assert!((g.importances.iter().sum::<f64>() - mean_gap).abs() < 1e-6);
    }
}

#[test]
fn one_model_call_per_distinct_coalition() {
    let cfg = config();
    let corpus = cfg.load_corpus().unwrap();
    let GeneratorClient::Mock(settings) = &cfg.generator.client else { unreachable!() };
    let lm = MockLm::new(AuditConfig::mock_spec(settings, &corpus)).unwrap();
    let report = run_audit_with(&cfg, &lm, None).unwrap();
    let coalitions: usize = report.queries.iter().map(|q| q.generator.as_ref().unwrap().coalitions).sum();
    let calls: usize = report.queries.iter().map(|q| q.generator.as_ref().unwrap().lm_calls).sum();
    assert_eq!(calls, coalitions);
    assert_eq!(lm.score_calls(), coalitions);
    assert_eq!(lm.generate_calls(), report.queries.len());
}

#[test]
fn small_documents_sets_fall_back_to_exact() {
    let cfg = with(|c| c.k = 4);
    let report = run_audit(&cfg).unwrap();
    for q in &report.queries {
        let g = q.generator.as_ref().unwrap();
        assert_eq!(g.method, Method::Exact);
        assert_eq!(g.coalitions, 16);
    }
}

#[test]
fn shuffling_changes_prompts_not_retriever_space_results() {
    let exact = |ordering| {
        with(|c| {
            c.attribution.method = Method::Exact;
            c.ordering = ordering;
        })
    };
    let original = run_audit(&exact(OrderingCondition::Original)).unwrap();
    let shuffled = run_audit(&exact(OrderingCondition::Shuffled)).unwrap();
    let mut any_moved = false;
    for (o, s) in original.queries.iter().zip(&shuffled.queries) {
        assert_eq!(o.documents, s.documents);
        assert_eq!(o.retriever, s.retriever);
        let (go, gs) = (o.generator.as_ref().unwrap(), s.generator.as_ref().unwrap());
        any_moved |= gs.prompt_order != (0..gs.prompt_order.len()).collect::<Vec<_>>();
        // The mock ignores slot position, so attributions agree once
        // mapped back to retrieval order.
        for (a, b) in go.importances.iter().zip(&gs.importances) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(any_moved);
}

#[test]
fn shuffle_is_seeded_per_query() {
    let a = run_audit(&with(|c| c.ordering = OrderingCondition::Shuffled)).unwrap();
    let b = run_audit(&with(|c| {
        c.ordering = OrderingCondition::Shuffled;
        c.seed = Some(43);
    }))
    .unwrap();
    let orders = |r: &AuditReport| -> Vec<Vec<usize>> {
        r.queries.iter().map(|q| q.generator.as_ref().unwrap().prompt_order.clone()).collect()
    };
    assert_ne!(orders(&a), orders(&b));
    let first = orders(&a);
    assert!(first.iter().any(|o| o != &first[0]), "every query got the same permutation");
}

#[test]
fn dedup_drops_normalized_duplicates() {
    let original = run_audit(&config()).unwrap();
    let dedup = run_audit(&with(|c| c.ordering = OrderingCondition::NoDuplicates)).unwrap();
    let mut dropped_any = false;
    for (o, d) in original.queries.iter().zip(&dedup.queries) {
        let texts: Vec<String> = d.documents.iter().map(|x| normalize_text(&x.text)).collect();
        let unique: std::collections::HashSet<_> = texts.iter().collect();
        assert_eq!(unique.len(), texts.len());
        assert_eq!(d.documents.len() + d.dropped_duplicates.len(), o.documents.len());
        for (rank, doc) in d.documents.iter().enumerate() {
            assert_eq!(doc.rank, rank);
        }
        dropped_any |= !d.dropped_duplicates.is_empty();
    }
    assert!(dropped_any);
}

#[test]
fn shuffled_without_seed_is_rejected() {
    let mut cfg = config();
    cfg.ordering = OrderingCondition::ShuffledNoDuplicates;
    cfg.seed = None;
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
}

#[test]
fn query_failures_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = std::fs::read_to_string(fixture_dir().join("corpus.json")).unwrap();
    std::fs::write(dir.path().join("corpus.json"), corpus).unwrap();
    std::fs::write(
        dir.path().join("ranking.json"),
        r#"[
          {"query": "good query", "ranked_doc_ids": ["d01", "d02", "d05"], "scores": [3.0, 2.0, 1.0]},
          {"query": "bad query", "ranked_doc_ids": ["d01", "missing"], "scores": [3.0, 2.0]}
        ]"#,
    )
    .unwrap();
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(fixture_dir().join("config.json")).unwrap()).unwrap();
    cfg["queries"] = serde_json::json!({"inline": ["good query", "bad query"]});
    cfg["documents"] = serde_json::json!({"ranking": {"ranking_file": "ranking.json", "corpus_file": "corpus.json"}});
    let path = dir.path().join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let report = run_audit(&AuditConfig::load(&path).unwrap()).unwrap();
    assert!(report.queries[0].error.is_none());
    assert_eq!(report.queries[0].documents.len(), 3);
    assert_eq!(report.queries[1].error.as_ref().unwrap().code, "precondition");
    assert_eq!(report.corpus.failed_queries, 1);
    assert_eq!(report.corpus.failure_rates.unwrap().queries, 1);
    report.validate().unwrap();
}

#[test]
fn report_round_trips_and_rejects_unknown_fields() {
    let report = run_audit(&config()).unwrap();
    let text = report.to_json().unwrap();
    assert_eq!(AuditReport::from_json(&text).unwrap(), report);
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["surprise"] = Value::Bool(true);
    assert!(matches!(AuditReport::from_json(&v.to_string()), Err(Error::Schema(_))));
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["schema_version"] = Value::String("0.9".into());
    assert!(matches!(AuditReport::from_json(&v.to_string()), Err(Error::Schema(_))));
}

#[test]
fn schema_document_is_valid_json() {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    assert_eq!(schema["properties"]["schema_version"]["const"], "1.0.0");
}

#[test]
fn config_hash_tracks_content() {
    let a = config_hash(&config()).unwrap();
    assert_eq!(a.len(), 64);
    assert_eq!(a, config_hash(&config()).unwrap());
    assert_ne!(a, config_hash(&with(|c| c.k = 3)).unwrap());
}

#[test]
fn renders_ansi_and_html() {
    let report = run_audit(&config()).unwrap();
    let ansi = render_report(&report, Format::Ansi).unwrap();
    assert!(ansi.contains("\x1b[48;5;"));
    assert!(ansi.contains("Doc. 1 "));
    let html = render_report(&report, Format::Html).unwrap();
    assert!(html.starts_with("<!DOCTYPE html>"));
    assert!(html.contains("Doc. 1 "));
    assert_eq!(render_report(&report, Format::Json).unwrap(), report.to_json().unwrap());
}

#[test]
fn bench_csv_layout() {
    let cfg = BenchConfig { instances: 6, repeats: 3, mc_samples: vec![5, 20], ..BenchConfig::default() };
    let rows = bench_shap(&cfg).unwrap();
    assert_eq!(rows.len(), 1 + 2 * 2);
    let mut buf = Vec::new();
    bench_shap_csv(&mut buf, &rows, cfg.repeats).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        "method,sampling,N,M,N_prime,mse_vs_exact,variance_over_3_repeats,wilcoxon_p_vs_kshap"
    );
    assert_eq!(text.lines().count(), rows.len() + 1);
    assert_eq!(rows, bench_shap(&cfg).unwrap());
}

#[test]
fn stages_fill_only_their_sections() {
    let cfg = config();
    let full = run_audit(&cfg).unwrap();
    let retriever = run_stage(&cfg, Stage::Retriever).unwrap();
    let generator = run_stage(&cfg, Stage::Generator).unwrap();
    for ((f, r), g) in full.queries.iter().zip(&retriever).zip(&generator) {
        assert_eq!(r.retriever, f.retriever);
        assert!(r.generator.is_none() && r.alignment.is_none());
        assert_eq!(g.generator, f.generator);
        assert!(g.retriever.is_none() && g.alignment.is_none());
    }
}

#[test]
fn metrics_recompute_from_stored_sections() {
    let original = run_audit(&config()).unwrap();
    let mut stripped = original.clone();
    for q in &mut stripped.queries {
        q.alignment = None;
    }
    stripped.corpus.warg.clear();
    recompute_metrics(&mut stripped, &config().metrics, config().seed).unwrap();
    assert_eq!(stripped, original);

    let narrow = MetricSettings { p_grid: vec![0.5], ..MetricSettings::default() };
    let mut other = original.clone();
    recompute_metrics(&mut other, &narrow, Some(1)).unwrap();
    assert_eq!(other.corpus.warg.keys().collect::<Vec<_>>(), vec!["0.5"]);
}

#[test]
fn faithfulness_over_audit_report() {
    let cfg = config();
    let report = run_audit(&cfg).unwrap();
    let lm = build_model(&cfg).unwrap();
    let (faith, curves) = faithfulness_from_report(&cfg, &report, &lm).unwrap();
    assert_eq!(faith.queries.len(), report.queries.len());
    for (f, q) in faith.queries.iter().zip(&report.queries) {
        assert_eq!(f.retriever_documents.len(), q.documents.len());
        for v in f.retriever_documents.iter().chain([&f.retriever_query, &f.generator_documents]) {
            // Retriever curves are not monotone, so AIPC may leave [-1, 1].
            assert!(v.value.is_some_and(f64::is_finite) || v.reason.is_some());
        }
    }
    // Shapley importances order documents well on the additive mock.
    let generator = faith.generator_documents.clone().unwrap();
    assert!(generator.mean_aipc > 0.0, "{generator:?}");
    assert!(!curves.is_empty());
    assert_eq!(faith, faithfulness_from_report(&cfg, &report, &lm).unwrap().0);
}
