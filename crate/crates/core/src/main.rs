use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsae::cli::{self, ScoreSource, TrainPaths};
use dsae::config::Config;
use dsae::evaluator::Pooling;
use dsae::{Error, Result};

/// Speaker verification with segment attentive embeddings.
#[derive(Parser)]
#[command(name = "dsae", version)]
struct Cli {
    /// Config file (`key = value`, sections as prefixes).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the `seed` config key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: WAVs, manifest and trial list.
    Synth {
        /// Output directory (default: the manifest's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract normalized log-mel features for every manifest entry.
    Extract {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the training split.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from the latest checkpoint if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Write utterance embeddings as 1×d_e feature files.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pooling: PoolingArg,
        /// Utterance ids (default: the whole test split).
        ids: Vec<String>,
    },
    /// Score a trial list and report the EER.
    Score {
        #[arg(long, conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        /// Directory of embedding files written by `embed`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[command(flatten)]
        pooling: PoolingArg,
        /// Score file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the EER from a score file.
    Eer { scores: PathBuf },
}

#[derive(Args)]
struct PoolingArg {
    /// attentive or average (default: eval.pooling).
    #[arg(long)]
    pooling: Option<String>,
}

impl PoolingArg {
    fn resolve(&self, cfg: &Config) -> Result<Pooling> {
        match &self.pooling {
            Some(p) => Pooling::parse(p).ok_or_else(|| Error::Config(format!("--pooling {p}: expected attentive or average"))),
            None => cfg.pooling(),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let or = |v: Option<PathBuf>, key: &str| v.unwrap_or_else(|| cfg.path(key));
    let checkpoint_default = || cfg.path("paths.checkpoints").join(cli::CHECKPOINT_FILE);

    match cli.command {
        Command::Synth { out } => {
            let out = out.unwrap_or_else(|| {
                cfg.path("paths.manifest")
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_default()
            });
            let o = cli::cmd_synth(&cfg, &out)?;
            println!("manifest\t{}", o.manifest_path.display());
            println!("trials\t{}", o.trials_path.display());
        }
        Command::Extract { manifest, out } => {
            let s = cli::cmd_extract(&cfg, &or(manifest, "paths.manifest"), &or(out, "paths.features"))?;
            println!("written={}\nskipped={}", s.written, s.skipped);
        }
        Command::Train {
            manifest,
            features,
            checkpoints,
            metrics,
            resume,
        } => {
            let (manifest, features) = (or(manifest, "paths.manifest"), or(features, "paths.features"));
            let (checkpoints, metrics) = (or(checkpoints, "paths.checkpoints"), or(metrics, "paths.metrics"));
            let paths = TrainPaths {
                manifest: &manifest,
                features: &features,
                checkpoints: &checkpoints,
                metrics: &metrics,
            };
            let s = cli::cmd_train(&cfg, &paths, resume)?;
            println!("steps={}\ncheckpoint={}", s.steps, s.checkpoint.display());
        }
        Command::Embed {
            checkpoint,
            manifest,
            features,
            out,
            pooling,
            ids,
        } => {
            let pooling = pooling.resolve(&cfg)?;
            let written = cli::cmd_embed(
                &cfg,
                &checkpoint.unwrap_or_else(checkpoint_default),
                &or(manifest, "paths.manifest"),
                &or(features, "paths.features"),
                &ids,
                &out,
                pooling,
            )?;
            println!("embedded={}", written.len());
        }
        Command::Score {
            checkpoint,
            embeddings,
            features,
            trials,
            pooling,
            out,
        } => {
            let pooling = pooling.resolve(&cfg)?;
            let features = or(features, "paths.features");
            let checkpoint = checkpoint.unwrap_or_else(checkpoint_default);
            let source = match &embeddings {
                Some(dir) => ScoreSource::Embeddings(dir),
                None => ScoreSource::Checkpoint {
                    checkpoint: &checkpoint,
                    features: &features,
                },
            };
            let report = cli::cmd_score(&cfg, source, &or(trials, "paths.trials"), pooling)?;
            if let Some(out) = out {
                dsae::write_atomic(&out, report.score_file().as_bytes())?;
            }
            print!("{}", report.render());
        }
        Command::Eer { scores } => print!("{}", cli::cmd_eer(&scores)?.render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSAE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
