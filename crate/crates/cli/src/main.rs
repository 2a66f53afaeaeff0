use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use qfilter_core::pipeline::{self, PipelineConfig, PipelineError};

/// Embedding-based quality filtering, threshold calibration, cluster
/// diagnostics and token planning for pretraining corpora.
#[derive(Debug, Parser)]
#[command(name = "qfilter", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the quality classifier from seed files.
    TrainFilter(Common),
    /// Score every document of the configured corpora.
    Score(Common),
    /// Estimate percentile thresholds from sampled scores.
    Threshold(Common),
    /// Score, calibrate and write filtered shards.
    Filter(Common),
    /// Fit balanced k-means and compare cluster histograms.
    Clusters(Common),
    /// Compute token budgets and epochs for a training plan.
    Plan(Common),
    /// Summarize the reports found in the output directory.
    Report(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Overrides the configured percentiles; repeatable.
    #[arg(long = "percentile")]
    percentiles: Vec<f64>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Number of clusters.
    #[arg(short = 'k', long)]
    k: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        if let Some(c) = &self.classifier {
            cfg.classifier = Some(c.clone());
        }
        if !self.percentiles.is_empty() {
            cfg.threshold.percentiles = self.percentiles.clone();
        }
        if let Some(e) = &self.endpoint {
            cfg.embedding.endpoint = Some(e.clone());
        }
        if let Some(k) = self.k {
            cfg.clusters.k = k;
        }
        Ok(cfg)
    }
}

fn run(command: &Command) -> Result<String, PipelineError> {
    let common = match command {
        Command::TrainFilter(c)
        | Command::Score(c)
        | Command::Threshold(c)
        | Command::Filter(c)
        | Command::Clusters(c)
        | Command::Plan(c)
        | Command::Report(c) => c,
    };
    let cfg = common.load()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    info!("config {} seed {}", &cfg.config_hash()[..16], cfg.seed);
    pool.install(|| match command {
        Command::TrainFilter(_) => {
            let out = pipeline::cmd_train_filter(&cfg)?;
            Ok(format!(
                "classifier written to {} ({} accuracy {:.4}, n={})",
                out.classifier_path.display(),
                out.report.eval_split,
                out.report.evaluation.accuracy,
                out.report.n_eval
            ))
        }
        Command::Score(_) => {
            let scored = pipeline::cmd_score(&cfg)?;
            Ok(scored
                .iter()
                .map(|(m, p)| format!("{}: {}", m.corpus_name, p.display()))
                .collect::<Vec<_>>()
                .join("\n"))
        }
        Command::Threshold(_) => {
            let out = pipeline::cmd_threshold(&cfg)?;
            Ok(pipeline::threshold_table_csv(&out.estimates))
        }
        Command::Filter(_) => {
            let out = pipeline::cmd_filter_corpus(&cfg)?;
            Ok(out
                .reports
                .iter()
                .map(|r| {
                    format!(
                        "{} p{}: kept {}/{} (tau {:.4})",
                        r.corpus_name, r.percentile, r.stats.docs_out, r.stats.docs_in, r.stats.tau
                    )
                })
                .collect::<Vec<_>>()
                .join("\n"))
        }
        Command::Clusters(_) => {
            let out = pipeline::cmd_diagnose_clusters(&cfg)?;
            let names: Vec<&str> = out.histograms.iter().map(|h| h.dataset_name.as_str()).collect();
            Ok(pipeline::tv_matrix_csv(&names, &out.tv_matrix))
        }
        Command::Plan(_) => {
            let out = pipeline::cmd_plan(&cfg)?;
            Ok(qfilter_core::planner::budget_table_markdown(&out.rows))
        }
        Command::Report(_) => pipeline::cmd_report(&cfg),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{}", summary.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
