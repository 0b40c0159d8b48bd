use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ragaudit::audit::{
    bench_shap, bench_shap_csv, build_model, faithfulness_from_report, recompute_metrics, render_report, run_audit,
    run_stage, AuditConfig, AuditReport, BenchConfig, Format, GeneratorClient, MetricSettings, QueryReport, Stage,
};
use ragaudit::faithfulness::write_curves_csv;
use ragaudit::gateway::{MockServer, MockServerConfig};
use ragaudit::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;

#[derive(Parser)]
#[command(name = "ragaudit", version, about = "Audit retrieval-augmented generation pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write a report.
    Audit {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        format: OutputFormat,
    },
    /// Retrieve and compute token saliency only.
    AttributeRetriever(RunArgs),
    /// Retrieve and attribute the answer to documents only.
    AttributeGenerator(RunArgs),
    /// Recompute alignment metrics and aggregates from a stored report.
    Metrics {
        #[arg(long)]
        report: PathBuf,
        /// Audit config whose metric settings to use; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perturbation-curve faithfulness of a report's attributions.
    Faithfulness {
        #[command(flatten)]
        run: RunArgs,
        /// Stored report to score; the audit is run first otherwise.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for per-input curve CSV files.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Compare Shapley estimators against exact values on mock games.
    BenchShap {
        /// Bench grid as JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Render a stored report.
    Render {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = OutputFormat::Html)]
        format: OutputFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the config's mock model over the OpenAI-compatible protocol.
    ServeMock {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: String,
        /// Environment variable holding the bearer token to require.
        #[arg(long)]
        auth_env: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<AuditConfig, Error> {
        let mut config = AuditConfig::load(&self.config)?;
        if self.seed.is_some() {
            config.seed = self.seed;
        }
        if let Some(p) = self.parallelism {
            config.parallelism = p;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Ansi,
    Html,
}

impl From<OutputFormat> for Format {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Json => Format::Json,
            OutputFormat::Ansi => Format::Ansi,
            OutputFormat::Html => Format::Html,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Transport(_) | Error::Auth(_) => EXIT_TRANSPORT,
        Error::Oracle { source, .. } | Error::McExhausted { source, .. } | Error::Scorer { source, .. } => {
            exit_code(source)
        }
        _ => EXIT_CONFIG,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => Ok(fs::write(path, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: serde::Serialize>(value: &T) -> Result<String, Error> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn read_report(path: &Path) -> Result<AuditReport, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    AuditReport::from_json(&text)
}

fn report_status(report: &AuditReport) -> u8 {
    status(&report.queries)
}

/// Exit status given the per-query failures recorded in a run.
fn status(queries: &[QueryReport]) -> u8 {
    let codes: Vec<&str> = queries.iter().filter_map(|q| q.error.as_ref()).map(|e| e.code.as_str()).collect();
    if codes.is_empty() {
        0
    } else if codes.iter().any(|c| *c == "transport" || *c == "auth") {
        EXIT_TRANSPORT
    } else {
        EXIT_PARTIAL
    }
}

fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::Audit { run, format } => {
            let config = run.load()?;
            let report = run_audit(&config)?;
            emit(run.out.as_deref(), &render_report(&report, format.into())?)?;
            Ok(report_status(&report))
        }
        Command::AttributeRetriever(run) => stage(&run, Stage::Retriever),
        Command::AttributeGenerator(run) => stage(&run, Stage::Generator),
        Command::Metrics { report, config, seed, out } => {
            let mut stored = read_report(&report)?;
            let (metrics, config_seed) = match config {
                Some(path) => {
                    let c = AuditConfig::load(&path)?;
                    (c.metrics, c.seed)
                }
                None => (MetricSettings::default(), stored.provenance.seed),
            };
            recompute_metrics(&mut stored, &metrics, seed.or(config_seed))?;
            emit(out.as_deref(), &stored.to_json()?)?;
            Ok(report_status(&stored))
        }
        Command::Faithfulness { run, report, curves } => {
            let config = run.load()?;
            let report = match report {
                Some(path) => read_report(&path)?,
                None => run_audit(&config)?,
            };
            let lm = build_model(&config)?;
            let (faith, pairs) = faithfulness_from_report(&config, &report, &lm)?;
            if let Some(dir) = curves {
                fs::create_dir_all(&dir)?;
                for pair in &pairs {
                    let file = fs::File::create(dir.join(format!("{}.csv", pair.label)))?;
                    write_curves_csv(file, &pair.morf, &pair.lerf)?;
                }
            }
            emit(run.out.as_deref(), &pretty(&faith)?)?;
            Ok(report_status(&report))
        }
        Command::BenchShap { config, seed, out, parallelism } => {
            let mut bench = match config {
                Some(path) => serde_json::from_str::<BenchConfig>(&fs::read_to_string(&path)?)
                    .map_err(|e| Error::InvalidConfig(format!("bench config: {e}")))?,
                None => BenchConfig::default(),
            };
            if let Some(s) = seed {
                bench.seed = s;
            }
            if let Some(p) = parallelism {
                bench.parallelism = p;
            }
            let rows = bench_shap(&bench)?;
            let mut buf = Vec::new();
            bench_shap_csv(&mut buf, &rows, bench.repeats)?;
            emit(out.as_deref(), &String::from_utf8_lossy(&buf))?;
            Ok(0)
        }
        Command::Render { report, format, out } => {
            let report = read_report(&report)?;
            emit(out.as_deref(), &render_report(&report, format.into())?)?;
            Ok(0)
        }
        Command::ServeMock { config, addr, auth_env } => {
            let config = AuditConfig::load(&config)?;
            let GeneratorClient::Mock(settings) = &config.generator.client else {
                return Err(Error::InvalidConfig("serve-mock needs a mock generator".into()));
            };
            let mut server_config = MockServerConfig::new(AuditConfig::mock_spec(settings, &config.load_corpus()?));
            server_config.retriever = Some(config.build_retriever()?);
            if let Some(var) = auth_env {
                let token = std::env::var(&var)
                    .map_err(|_| Error::InvalidConfig(format!("environment variable {var} is not set")))?;
                server_config.auth_token = Some(token);
            }
            let server = MockServer::bind(&addr, server_config)?;
            println!("{}", server.base_url());
            loop {
                std::thread::park();
            }
        }
    }
}

fn stage(run: &RunArgs, stage: Stage) -> Result<u8, Error> {
    let config = run.load()?;
    let reports = run_stage(&config, stage)?;
    emit(run.out.as_deref(), &pretty(&reports)?)?;
    Ok(status(&reports))
}
