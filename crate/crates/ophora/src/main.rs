use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ophora::corpus;
use ophora::feedback::{self, GroupBy};
use ophora::metrics;
use ophora::pipeline::{build_report, render_report_text, run_stage_cmd, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "ophora", about = "Surgical video corpus curation and evaluation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupByArg {
    Criterion,
    Phase,
    CriterionPhase,
}

impl From<GroupByArg> for GroupBy {
    fn from(value: GroupByArg) -> Self {
        match value {
            GroupByArg::Criterion => GroupBy::Criterion,
            GroupByArg::Phase => GroupBy::Phase,
            GroupByArg::CriterionPhase => GroupBy::CriterionPhase,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Annotate shot-dynamics and resolution verdicts.
    Curate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rewrite captions into imperative instructions.
    Refine {
        #[arg(long)]
        config: PathBuf,
    },
    /// Screen sampled frames for privacy-sensitive content.
    PrivacyScan {
        #[arg(long)]
        config: PathBuf,
    },
    /// Resize curated clips and sample to 49 frames.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
    },
    /// Assign train/eval splits and emit the privacy-preserved subset.
    Split {
        #[arg(long)]
        config: PathBuf,
        /// Include despite unresolved privacy scans (flagged clips stay excluded).
        #[arg(long)]
        allow_failed_scans: bool,
    },
    /// Run the two-stage toy tuning loop on the deterministic latent sampler.
    TuneToy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every stage in dependency order.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        allow_failed_scans: bool,
    },
    /// Frechet distance between two feature files.
    EvalFrechet {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
    },
    /// Mean similarity score over row-paired video and text feature files.
    EvalClipscore {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long, default_value_t = metrics::DEFAULT_OMEGA)]
        omega: f64,
    },
    /// Aggregate rater score CSVs; optional radar-chart JSON export.
    FeedbackAggregate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_enum, default_value = "criterion")]
        group_by: GroupByArg,
        #[arg(long)]
        radar: Option<PathBuf>,
    },
    /// Corpus-level counts from the working manifest.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn stage_sequence(allow_failed_scans: bool) -> Vec<Stage> {
    vec![
        Stage::Curate,
        Stage::Refine,
        Stage::PrivacyScan,
        Stage::Preprocess,
        Stage::Split { allow_failed_scans },
        Stage::TuneToy,
    ]
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Curate { config } => run_one(Stage::Curate, &config)?,
        Command::Refine { config } => run_one(Stage::Refine, &config)?,
        Command::PrivacyScan { config } => run_one(Stage::PrivacyScan, &config)?,
        Command::Preprocess { config } => run_one(Stage::Preprocess, &config)?,
        Command::Split {
            config,
            allow_failed_scans,
        } => run_one(Stage::Split { allow_failed_scans }, &config)?,
        Command::TuneToy { config } => run_one(Stage::TuneToy, &config)?,
        Command::Run {
            config,
            allow_failed_scans,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            for stage in stage_sequence(allow_failed_scans) {
                let report = run_stage_cmd(stage, &cfg)?;
                println!("{report}");
            }
        }
        Command::EvalFrechet { real, generated } => {
            let a = metrics::fit_gaussian(&metrics::read_features(&real)?)?;
            let b = metrics::fit_gaussian(&metrics::read_features(&generated)?)?;
            let result = metrics::frechet_distance(&a, &b)?;
            println!("frechet_distance: {:.6}", result.distance);
            if result.regularized {
                eprintln!("note: covariance regularized for numerical stability");
            }
        }
        Command::EvalClipscore { video, text, omega } => {
            let videos = metrics::read_features(&video)?;
            let texts = metrics::read_features(&text)?;
            let pairing: Vec<(usize, usize)> = (0..videos.rows.min(texts.rows))
                .map(|i| (i, i))
                .collect();
            let score = metrics::corpus_clip_score(&videos, &texts, &pairing, omega)?;
            println!("clip_score: {score:.4}");
        }
        Command::FeedbackAggregate {
            scores,
            group_by,
            radar,
        } => {
            let records = feedback::parse_scores(&scores)?;
            let stats = feedback::aggregate(&records, group_by.into())?;
            for stat in &stats {
                println!(
                    "{}: mean={:.4} n={} rater_spread={:.4}",
                    stat.group, stat.mean, stat.count, stat.rater_spread
                );
            }
            if let Some(path) = radar {
                std::fs::write(&path, feedback::export_radar(&stats))?;
            }
        }
        Command::Report { config, json } => {
            let cfg = PipelineConfig::load(&config)?;
            let manifest = corpus::load_manifest(&cfg.working_manifest())?;
            let subset = cfg
                .privacy_subset_path()
                .exists()
                .then(|| corpus::load_manifest(&cfg.privacy_subset_path()))
                .transpose()?;
            let report = build_report(&manifest, subset.as_ref());
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", render_report_text(&report));
            }
        }
    }
    Ok(())
}

fn run_one(stage: Stage, config: &PathBuf) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PipelineConfig::load(config)?;
    let report = run_stage_cmd(stage, &cfg)?;
    println!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
