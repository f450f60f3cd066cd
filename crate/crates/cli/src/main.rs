use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use webguard_cli::{
    cmd_eval, cmd_score, cmd_synth, cmd_train, evaluate, metrics_for_counts, write_scores, DatasetFormat,
    PipelineArtifact, RunConfig, DEFAULT_HISTOGRAM_BINS,
};

#[derive(Parser)]
#[command(
    name = "webguard",
    version,
    about = "Anomalous HTTP request detection by autoencoder reconstruction error"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus (normal/ and anomalous/ directories).
    Synth {
        #[arg(long, default_value_t = 500)]
        normal: usize,
        #[arg(long, default_value_t = 100)]
        attacks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the normal requests of a labeled dataset and write an artifact directory.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        artifact: PathBuf,
        #[command(flatten)]
        opts: ConfigArgs,
        #[arg(long)]
        quiet: bool,
    },
    /// Score requests with a trained artifact and write `request_id,mae,label,verdict`.
    Score {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_format, default_value = "raw")]
        format: DatasetFormat,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Evaluate a labeled dataset: confusion counts, metrics, histograms.
    Eval {
        #[arg(long, required_unless_present = "confusion")]
        artifact: Option<PathBuf>,
        #[arg(long, required_unless_present = "confusion")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_format, default_value = "raw")]
        format: DatasetFormat,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
        bins: usize,
        /// Report metrics for given counts `TP,TN,FP,FN` instead of scoring.
        #[arg(long, value_parser = parse_counts, conflicts_with_all = ["artifact", "dataset"])]
        confusion: Option<[u64; 4]>,
        #[arg(long)]
        json: bool,
    },
}

/// Flags mirroring the run configuration; they override `--config`.
#[derive(Args)]
struct ConfigArgs {
    /// `key=value` file with any run configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    min_support: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `quantile:<q>`, `fixed:<v>` or `valley`.
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    include_headers: Option<bool>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Comma-separated encoder widths, e.g. `50,25`.
    #[arg(long)]
    encoder_widths: Option<String>,
    /// `joint` or `staged`.
    #[arg(long)]
    train_mode: Option<String>,
    /// `none` or `minmax`.
    #[arg(long)]
    scaling: Option<String>,
    #[arg(long)]
    filter_ambiguous: Option<bool>,
    /// `raw` or `url-lines`.
    #[arg(long)]
    dataset_format: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let pairs: [(&str, Option<String>); 15] = [
            ("seq_len", self.seq_len.map(|v| v.to_string())),
            ("min_support", self.min_support.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("threshold", self.threshold.clone()),
            ("include_headers", self.include_headers.map(|v| v.to_string())),
            ("train_fraction", self.train_fraction.map(|v| v.to_string())),
            ("validation_fraction", self.validation_fraction.map(|v| v.to_string())),
            ("encoder_widths", self.encoder_widths.clone()),
            ("train_mode", self.train_mode.clone()),
            ("scaling", self.scaling.clone()),
            ("filter_ambiguous", self.filter_ambiguous.map(|v| v.to_string())),
            ("dataset_format", self.dataset_format.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }
}

fn parse_format(s: &str) -> Result<DatasetFormat, String> {
    match s {
        "raw" => Ok(DatasetFormat::Raw),
        "url-lines" | "url_lines" => Ok(DatasetFormat::UrlLines),
        _ => Err(format!("expected raw or url-lines, got {s:?}")),
    }
}

fn parse_counts(s: &str) -> Result<[u64; 4], String> {
    let v: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected TP,TN,FP,FN".to_string())
}

fn usage(err: anyhow::Error) -> anyhow::Error {
    err.context(webguard_cli::Stage {
        name: "configuration",
        kind: webguard_cli::ExitKind::Usage,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            normal,
            attacks,
            seed,
            out,
        } => {
            let s = cmd_synth(normal, attacks, seed, &out)?;
            println!(
                "wrote {} normal and {} anomalous requests to {}",
                s.normal_files,
                s.attack_files,
                out.display()
            );
        }
        Command::Train {
            dataset,
            artifact,
            opts,
            quiet,
        } => {
            let cfg = opts.resolve().map_err(usage)?;
            let dataset = dataset
                .or_else(|| cfg.dataset.clone())
                .context("no dataset given (use --dataset or dataset= in --config)")
                .map_err(usage)?;
            let outcome = cmd_train(&cfg, &dataset, &artifact, |e| {
                if !quiet {
                    let val = e.val_mae.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
                    eprintln!("epoch {:>3}  train_mae {:.6}  val_mae {val}", e.epoch, e.train_mae);
                }
            })?;
            let last = outcome.history.last().expect("at least one epoch");
            let val = last.val_mae.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            println!("trained on {} normal requests", outcome.n_train);
            println!("final train_mae={} val_mae={val}", last.train_mae);
            let t = &outcome.artifact.threshold;
            println!("threshold {} = {}", t.policy, t.value);
            if let Some(f) = &t.fallback {
                println!("threshold note: {f}");
            }
            println!("artifact written to {}", artifact.display());
        }
        Command::Score {
            artifact,
            dataset,
            out,
            format,
            threads,
        } => {
            let art = PipelineArtifact::load(&artifact)?;
            let rows = cmd_score(&art, &dataset, format, threads)?;
            write_scores(&rows, &out)?;
            let flagged = rows
                .iter()
                .filter(|r| r.verdict == webguard_core::Label::Malicious)
                .count();
            println!(
                "scored {} requests, {} flagged malicious -> {}",
                rows.len(),
                flagged,
                out.display()
            );
        }
        Command::Eval {
            artifact,
            dataset,
            out,
            format,
            threads,
            bins,
            confusion,
            json,
        } => {
            let report = match confusion {
                Some([tp, tn, fp, fn_]) => {
                    let m = metrics_for_counts(tp, tn, fp, fn_);
                    if json {
                        println!("{}", serde_json::to_string_pretty(&m.to_json())?);
                    } else {
                        print!("{}", m.to_key_value());
                    }
                    return Ok(());
                }
                None => {
                    let art = PipelineArtifact::load(&artifact.expect("required by clap"))?;
                    let rows = cmd_score(&art, &dataset.clone().expect("required by clap"), format, threads)?;
                    if rows.iter().any(|r| r.label.is_none()) {
                        // Let cmd_eval produce the labeled-data error with its stage.
                        cmd_eval(&art, &dataset.expect("required by clap"), format, threads, bins)?
                    } else {
                        evaluate(rows, art.threshold.value, bins)?
                    }
                }
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&report.metrics.to_json())?);
            } else {
                println!("threshold={}", report.threshold);
                print!("{}", report.metrics.to_key_value());
            }
            if let Some(dir) = out {
                for p in report.write(&dir)? {
                    eprintln!("wrote {}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(webguard_cli::exit_code(&e) as u8)
        }
    }
}
