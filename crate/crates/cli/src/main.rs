//! `infofuse`: prepare a corpus, enrich items with a vision-language model,
//! train the tri-graph recommender and evaluate it.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
//! 3 input data error, 4 endpoint or encoder failure (including partially
//! failed enrichment), 5 numeric failure during training.

mod commands;
mod config;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use infofuse_core::trainer::AblationArm;
use infofuse_core::Error as CoreError;

use config::RunConfig;
use layout::Layout;

/// A bad flag, path or configuration value.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Enrichment finished but some items fell back to their titles.
#[derive(Debug, thiserror::Error)]
#[error("{failed} of {total} items failed enrichment and use their titles instead; see {}", report.display())]
pub struct PartialEnrichment {
    pub failed: usize,
    pub total: usize,
    pub report: PathBuf,
}

fn parse_arm(tag: &str) -> Result<AblationArm, String> {
    AblationArm::parse(tag).ok_or_else(|| {
        let valid: Vec<&str> = AblationArm::ALL.iter().map(|a| a.tag()).collect();
        format!("unknown arm {tag:?}; expected one of: {}", valid.join(", "))
    })
}

#[derive(Debug, Parser)]
#[command(name = "infofuse", version, about = "Multimodal recommendation with vision-language enrichment")]
struct Cli {
    /// TOML configuration file. Flags override its values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long = "out", global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    interactions: Option<PathBuf>,
    #[arg(long, global = true)]
    metadata: Option<PathBuf>,
    #[arg(long, global = true)]
    raw_visual: Option<PathBuf>,
    #[arg(long, global = true)]
    images_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    kcore: Option<usize>,
    /// Chat-completions URL of the vision-language endpoint.
    #[arg(long, global = true)]
    endpoint_url: Option<String>,
    #[arg(long, global = true)]
    endpoint_model: Option<String>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    #[arg(long, global = true)]
    patience: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Embedding width.
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// More log output (-v debug, -vv trace). `RUST_LOG` takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load interactions, apply k-core filtering, split and build graphs.
    Prepare,
    /// Describe every item image with the vision-language model and encode the descriptions.
    Enrich {
        /// Omit the title from the prompt (writes a separate feature table).
        #[arg(long)]
        no_title: bool,
    },
    /// Encode item text and import raw visual features, if configured.
    Encode,
    /// Train one arm and report test metrics.
    Train {
        #[arg(long, value_parser = parse_arm)]
        arm: Option<AblationArm>,
    },
    /// Evaluate a trained run next to the popularity baseline.
    Evaluate {
        #[arg(long, value_parser = parse_arm)]
        arm: Option<AblationArm>,
        /// Run directory to evaluate instead of the one matching the configuration.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Also train and report the BPR matrix-factorization baseline.
        #[arg(long)]
        bpr_mf: bool,
    },
    /// Train every listed arm and print a comparison table.
    Ablate {
        /// Comma-separated arms; all arms when omitted.
        #[arg(long, value_delimiter = ',', value_parser = parse_arm)]
        arms: Vec<AblationArm>,
        /// Skip arms whose visual feature table has not been produced.
        #[arg(long)]
        skip_missing: bool,
    },
    /// Write final user and item embeddings with 2-d PCA coordinates.
    ExportEmbeddings {
        #[arg(long, value_parser = parse_arm)]
        arm: Option<AblationArm>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Print the configuration after applying flags, as TOML.
    ShowConfig,
    /// Write a small planted-structure corpus for trying the pipeline.
    Synthesize {
        /// Destination directory.
        dir: PathBuf,
    },
}

impl Cli {
    fn resolve_config(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
            if value.is_some() {
                *slot = value.clone();
            }
        }
        set_opt(&mut c.seed, &self.seed);
        set(&mut c.paths.output_dir, &self.output_dir);
        set_opt(&mut c.paths.interactions, &self.interactions);
        set_opt(&mut c.paths.metadata, &self.metadata);
        set_opt(&mut c.paths.raw_visual, &self.raw_visual);
        set_opt(&mut c.paths.images_dir, &self.images_dir);
        set_opt(&mut c.paths.cache_dir, &self.cache_dir);
        set(&mut c.data.kcore, &self.kcore);
        set(&mut c.endpoint.url, &self.endpoint_url);
        set(&mut c.endpoint.model, &self.endpoint_model);
        set(&mut c.endpoint.concurrency, &self.concurrency);
        set(&mut c.train.max_epochs, &self.max_epochs);
        set(&mut c.train.patience, &self.patience);
        set(&mut c.train.batch_size, &self.batch_size);
        set(&mut c.train.lr, &self.lr);
        set(&mut c.train.d, &self.dim);
        c.train_config().validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Command::Synthesize { dir } = &cli.command {
        return commands::synthesize(dir, cli.seed.unwrap_or(7));
    }
    let config = cli.resolve_config()?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let layout = Layout::new(&config.paths.output_dir);
    std::fs::create_dir_all(layout.root())?;
    match &cli.command {
        Command::Prepare => commands::prepare(&config, &layout),
        Command::Enrich { no_title } => commands::enrich(&config, &layout, !no_title),
        Command::Encode => commands::encode(&config, &layout),
        Command::Train { arm } => commands::train(&config, &layout, *arm),
        Command::Evaluate { arm, run, bpr_mf } => commands::evaluate(&config, &layout, *arm, run.as_deref(), *bpr_mf),
        Command::Ablate { arms, skip_missing } => commands::ablate(&config, &layout, arms, *skip_missing),
        Command::ExportEmbeddings { arm, run } => commands::export_embeddings(&config, &layout, *arm, run.as_deref()),
        Command::Synthesize { .. } | Command::ShowConfig => unreachable!("handled above"),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<PartialEnrichment>().is_some() {
        return 4;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_)) => 2,
        Some(
            CoreError::Parse { .. }
            | CoreError::EmptyCorpus(_)
            | CoreError::EmptyAfterFilter { .. }
            | CoreError::Format { .. }
            | CoreError::MissingArtifact { .. }
            | CoreError::Io { .. },
        ) => 3,
        Some(CoreError::Transport { .. } | CoreError::Generation { .. } | CoreError::Encoder(_)) => 4,
        Some(CoreError::Numeric(_)) => 5,
        Some(CoreError::Internal(_)) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format_timestamp_secs()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn arm_parser_lists_choices() {
        assert_eq!(parse_arm("weighted_concat"), Ok(AblationArm::WeightedConcat));
        let err = parse_arm("fancy").unwrap_err();
        assert!(err.contains("vlm_no_title") && err.contains("full"));
    }

    #[test]
    fn errors_map_to_documented_codes() {
        let code = |e: anyhow::Error| exit_code(&e);
        assert_eq!(code(UsageError("x".into()).into()), 2);
        assert_eq!(code(CoreError::Config("x".into()).into()), 2);
        assert_eq!(code(CoreError::EmptyCorpus("f".into()).into()), 3);
        assert_eq!(code(CoreError::Numeric("nan".into()).into()), 5);
        assert_eq!(code(CoreError::Encoder("down".into()).into()), 4);
        let partial = PartialEnrichment {
            failed: 1,
            total: 2,
            report: "f.json".into(),
        };
        assert_eq!(code(anyhow::Error::from(partial).context("enrich")), 4);
        assert_eq!(code(anyhow::anyhow!("other")), 1);
    }

    #[test]
    fn flags_override_config_values() {
        let cli = Cli::parse_from(["infofuse", "--max-epochs", "3", "--seed", "11", "--dim", "32", "train", "--arm", "concat"]);
        let config = cli.resolve_config().unwrap();
        assert_eq!(config.train.max_epochs, 3);
        assert_eq!(config.train_config().seed, 11);
        assert_eq!(config.train.d, 32);
        assert!(matches!(cli.command, Command::Train { arm: Some(AblationArm::Concat) }));
    }
}
