mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{split_assignment, ConfigError};

/// Topic taxonomy expansion pipeline.
#[derive(Debug, Parser)]
#[command(name = "taxogrow", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Flat TOML key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Corpus text file, one document per line.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Taxonomy file, one JSON node per line.
    #[arg(long, global = true)]
    taxonomy: Option<PathBuf>,
    /// Static word vectors in text format.
    #[arg(long, global = true)]
    vectors: Option<PathBuf>,
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Minimum normalized phrase score.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Clusters per position.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// New topics inserted per position.
    #[arg(long, global = true)]
    top_m: Option<usize>,
    /// Contrastive temperature.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Triples per batch.
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Epoch limit.
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    /// Topic graph convolution layers.
    #[arg(long, global = true)]
    gcn_layers: Option<usize>,
    /// Topic representation size; must match the word vectors.
    #[arg(long, global = true)]
    topic_dim: Option<usize>,
    /// Maximum generated phrase length in tokens.
    #[arg(long, global = true)]
    max_phrase_len: Option<usize>,
}

impl GlobalArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = self.set.iter().map(|s| split_assignment(s)).collect::<Result<Vec<_>>>()?;
        let quoted = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned()).to_string();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("corpus", self.corpus.as_ref().map(quoted));
        push("taxonomy", self.taxonomy.as_ref().map(quoted));
        push("vectors", self.vectors.as_ref().map(quoted));
        push("seed", self.seed.map(|v| v.to_string()));
        push("threads", self.threads.map(|v| v.to_string()));
        push("tau", self.tau.map(float));
        push("k", self.k.map(|v| v.to_string()));
        push("top_m", self.top_m.map(|v| v.to_string()));
        push("gamma", self.gamma.map(float));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(float));
        push("max_epochs", self.max_epochs.map(|v| v.to_string()));
        push("gcn_layers", self.gcn_layers.map(|v| v.to_string()));
        push("topic_dim", self.topic_dim.map(|v| v.to_string()));
        push("max_phrase_len", self.max_phrase_len.map(|v| v.to_string()));
        Ok(out)
    }
}

/// TOML float literal (always carries a decimal point or exponent).
fn float(v: f64) -> String {
    toml::Value::Float(v).to_string()
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Tokenize the corpus, collect triples and write ingestion statistics.
    Ingest {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON lines log (default `<out>.log.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Expand the taxonomy with a trained checkpoint.
    Expand {
        #[arg(long)]
        ckpt: PathBuf,
        /// Expanded taxonomy file.
        #[arg(long)]
        out: PathBuf,
        /// Expansion report (default `<out>.report.jsonl`).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Teacher-forced perplexity and greedy accuracy on collected triples.
    EvalGen {
        #[arg(long)]
        ckpt: PathBuf,
        /// Metrics JSON file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Delete leaves, retrain, expand and score recovery of the deleted topics.
    EvalRecovery {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Category ratios and semantic spread per normalized-score bin.
    AnalyzeBins {
        #[arg(long)]
        ckpt: PathBuf,
        /// Bin statistics JSON file.
        #[arg(long)]
        out: PathBuf,
        /// Tab-separated table (default `<out>.tsv`).
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write a synthetic corpus, taxonomy, word vectors and ground truth.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest after checking input digests.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Rerun { manifest } = &cli.command {
        let m = manifest::Manifest::load(manifest)?;
        m.verify_inputs()?;
        configure_threads(m.settings.threads)?;
        return commands::execute(&m.invocation, &m.settings);
    }
    let settings = config::resolve(cli.global.config.as_deref(), &cli.global.overrides()?)?;
    if cli.global.print_config {
        print!("{}", settings.to_toml()?);
        return Ok(());
    }
    configure_threads(settings.threads)?;
    commands::execute(&cli.command, &settings)
}

fn configure_threads(threads: usize) -> Result<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

/// Stable error category for the machine-readable error line.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    use taxogrow::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return ("config", 2);
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return match io.kind() {
                std::io::ErrorKind::NotFound => ("missing_file", 3),
                _ => ("io", 3),
            };
        }
        if cause.is::<manifest::DigestMismatch>() {
            return ("digest_mismatch", 4);
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ("missing_file", 3),
                E::Io(_) => ("io", 3),
                E::Config(_) => ("config", 2),
                E::Checkpoint(_) => ("checkpoint", 5),
                E::Ingest(_) | E::WordVectors { .. } | E::Json(_) => ("input", 6),
                E::Taxonomy { .. } => ("taxonomy", 6),
                E::Split(_) | E::Empty(_) => ("data", 7),
                E::NonFiniteLoss { .. } | E::NonFiniteGradient(_) => ("numeric", 8),
                E::Fixture(_) => ("fixture", 2),
                _ => ("internal", 1),
            };
        }
    }
    ("internal", 1)
}

fn report_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            report_error("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            report_error(kind, &format!("{e:#}"));
            ExitCode::from(code)
        }
    }
}
