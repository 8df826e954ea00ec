mod config;
mod manifest;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rct_core::llmclient::{LlmError, ProviderKind};
use rct_core::simulation::{generate, DgpConfig, Effect};

use config::Config;
use manifest::digest_bytes;
use stages::{Ctx, QueryOptions};

#[derive(Parser)]
#[command(name = "rct", version, about = "Regression-adjusted treatment effects with pairwise LLM covariates")]
struct Cli {
    /// TOML config file.
    #[arg(long, short, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Replace outputs that no longer match their inputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Mock,
    Http,
}

#[derive(clap::Args, Default)]
struct QueryArgs {
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Allow requests to a live, billed endpoint.
    #[arg(long)]
    live: bool,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Requests per minute.
    #[arg(long)]
    rpm: Option<f64>,
    /// Response cache (default: <out-dir>/cache.jsonl).
    #[arg(long)]
    cache_path: Option<PathBuf>,
}

impl QueryArgs {
    fn options(&self) -> QueryOptions {
        QueryOptions {
            provider: self.provider.map(|p| match p {
                ProviderArg::Mock => ProviderKind::Mock,
                ProviderArg::Http => ProviderKind::HttpChat,
            }),
            live: self.live,
            model: self.model.clone(),
            max_in_flight: self.max_in_flight,
            rpm: self.rpm,
            cache_path: self.cache_path.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate the data and write a summary.
    Ingest,
    /// Cross-fit base-covariate predictions.
    Impute,
    /// Assign units to comparison strata.
    Stratify,
    /// Plan within-stratum pairs.
    Pair,
    /// Ask the provider about every planned pair.
    Query(QueryArgs),
    /// Turn verdicts into per-unit scores.
    Score,
    /// Estimate the effect with and without the scores.
    Estimate,
    /// Significance tests and covariate-set comparison.
    Evaluate,
    /// Monte-Carlo study on the built-in synthetic designs.
    Simulate {
        #[arg(long, default_value = "default")]
        suite: String,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Every stage from ingest to evaluate.
    Run(QueryArgs),
    /// Write a synthetic data set and matching config into a directory.
    InitDemo {
        #[arg(default_value = ".")]
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for provider failures, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let provider = e
        .chain()
        .any(|c| c.downcast_ref::<LlmError>().map(LlmError::is_provider).unwrap_or(false));
    if provider {
        3
    } else {
        2
    }
}

fn context(cli: &Cli) -> Result<Ctx> {
    let text = std::fs::read(&cli.config).with_context(|| format!("reading config {}", cli.config.display()))?;
    let config = Config::load(&cli.config)?;
    Ctx::new(config, digest_bytes(&text), cli.out_dir.clone(), cli.force, cli.seed)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::InitDemo { dir, n } => return init_demo(dir, *n, cli.seed.unwrap_or(7)),
        Command::Simulate { suite, replications } => {
            if suite != "default" {
                anyhow::bail!("unknown suite `{suite}`; only `default` is built in");
            }
            // No data needed; a missing config falls back to defaults.
            let mut ctx = if cli.config.exists() {
                context(&cli)?
            } else {
                let config: Config = toml::from_str("")?;
                Ctx::new(config, String::new(), cli.out_dir.clone(), cli.force, cli.seed)?
            };
            stages::simulate(&mut ctx, *replications)?;
            return Ok(());
        }
        _ => {}
    }
    let mut ctx = context(&cli)?;
    match &cli.command {
        Command::Ingest => stages::ingest(&mut ctx)?,
        Command::Impute => stages::impute_stage(&mut ctx)?,
        Command::Stratify => stages::stratify_stage(&mut ctx)?,
        Command::Pair => stages::pair(&mut ctx)?,
        Command::Query(q) => stages::query(&mut ctx, &q.options())?,
        Command::Score => stages::score(&mut ctx)?,
        Command::Estimate => stages::estimate(&mut ctx)?,
        Command::Evaluate => stages::evaluate(&mut ctx)?,
        Command::Run(q) => {
            stages::ingest(&mut ctx)?;
            stages::impute_stage(&mut ctx)?;
            stages::stratify_stage(&mut ctx)?;
            stages::pair(&mut ctx)?;
            stages::query(&mut ctx, &q.options())?;
            stages::score(&mut ctx)?;
            stages::estimate(&mut ctx)?;
            stages::evaluate(&mut ctx)?
        }
        Command::Simulate { .. } | Command::InitDemo { .. } => unreachable!(),
    };
    Ok(())
}

const DEMO_CONFIG: &str = r#"seed = 7

[data]
path = "data.csv"

[data.schema]
id = "id"
treatment = "treatment"
outcome = "outcome"
p = 0.5
stratum = "site"
covariates = [
  { name = "x0", kind = "real" },
  { name = "x1", kind = "real" },
  { name = "x2", kind = "real" },
]

[impute]
kind = "loo_linear"

[stratify]
basis = "oob_prediction_quantiles"
group_size = 10

[[questions]]
id = "quality"
target_description = "more likely to have a high outcome"

[template]
unit_label = "Observation"

[template.sentences]
x0 = "The first measurement is {value}."
x1 = "The second measurement is {value}."
x2 = "The third measurement is {value}."

[provider]
kind = "mock"
mock_latent_column = "latent"
"#;

fn init_demo(dir: &Path, n: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dgp = DgpConfig {
        label: "demo".into(),
        n,
        effect: Effect::Constant(1.0),
        signal_share: 0.8,
        seed,
        ..DgpConfig::default()
    };
    let synth = generate(&dgp)?;
    let e = &synth.experiment;
    let data = dir.join("data.csv");
    let mut w = csv::Writer::from_path(&data)?;
    let mut header = vec!["id".to_string(), "site".into(), "treatment".into(), "outcome".into()];
    header.extend(e.units[0].covariates.iter().map(|(name, _)| name.clone()));
    header.push("latent".into());
    w.write_record(&header)?;
    for (i, unit) in e.units.iter().enumerate() {
        let mut row = vec![
            unit.id.clone(),
            if i % 2 == 0 { "north" } else { "south" }.to_string(),
            e.z[i].to_string(),
            format!("{:.6}", e.y[i]),
        ];
        row.extend(unit.covariates.iter().map(|(_, v)| v.display().unwrap_or_default()));
        row.push(format!("{:.6}", synth.latent[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    let config = dir.join("config.toml");
    if config.exists() {
        eprintln!("{} exists; leaving it alone", config.display());
    } else {
        std::fs::write(&config, DEMO_CONFIG)?;
    }
    println!("wrote {} and {}", data.display(), config.display());
    Ok(())
}
