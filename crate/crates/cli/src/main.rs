use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use chats_lab::config::{ExperimentConfig, Regime};
use chats_lab::pipeline::{Method, ModelRef, Pipeline};
use chats_lab::{parallel, plot};

#[derive(Parser)]
#[command(name = "chats-lab", version, about = "Toy lab for dual-model preference finetuning and guided sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config's
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed, overriding the config's
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    SmallClean,
    LargeNoisy,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Main,
    DataEfficiency,
}

#[derive(Subcommand)]
enum Command {
    /// Generate preference datasets
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        regime: RegimeArg,
    },
    /// Pretrain the base model
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Finetune from the pretrained checkpoint
    Finetune {
        #[command(flatten)]
        common: Common,
        /// chats, chats_noref, dpo, sft_full or sft_preferred
        #[arg(long, default_value = "chats")]
        method: String,
        /// Dataset regime; defaults to the config's
        #[arg(long)]
        regime: Option<String>,
    },
    /// Draw guided samples for one condition
    Sample {
        #[command(flatten)]
        common: Common,
        /// pretrained or a finetune method
        #[arg(long, default_value = "chats")]
        method: String,
        #[arg(long)]
        regime: Option<String>,
        #[arg(long, default_value_t = 0)]
        condition: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Evaluate trained models against baselines
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "main")]
        experiment: Experiment,
    },
    /// Sweep a guidance parameter of the CHATS sampler
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha or s
        #[arg(long, default_value = "alpha")]
        param: String,
        /// Comma-separated values; defaults to the config's alpha list
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Train and evaluate the five-row ablation matrix
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Render a CSV as an SVG line chart
    Plot {
        input: PathBuf,
        output: PathBuf,
    },
    /// Print the default experiment config
    DefaultConfig,
}

fn pipeline(common: &Common) -> Result<Pipeline> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(Pipeline::new(cfg, common.out.clone())?)
}

fn regime(p: &Pipeline, arg: &Option<String>) -> Result<Regime> {
    Ok(match arg {
        Some(s) => Regime::parse(s)?,
        None => p.cfg.data.regime,
    })
}

fn run(cli: Cli) -> Result<String> {
    let outcome = match cli.command {
        Command::GenData { common, regime } => {
            let regimes: &[Regime] = match regime {
                RegimeArg::SmallClean => &[Regime::SmallClean],
                RegimeArg::LargeNoisy => &[Regime::LargeNoisy],
                RegimeArg::All => &Regime::ALL,
            };
            pipeline(&common)?.gen_data(regimes)?
        }
        Command::Pretrain { common } => pipeline(&common)?.pretrain()?,
        Command::Finetune { common, method, regime: r } => {
            let p = pipeline(&common)?;
            let r = regime(&p, &r)?;
            p.finetune(Method::parse(&method)?, r)?
        }
        Command::Sample {
            common,
            method,
            regime: r,
            condition,
            n,
        } => {
            let p = pipeline(&common)?;
            let m = ModelRef::parse(&method, regime(&p, &r)?)?;
            let g = p.default_guidance(m);
            p.sample(m, g, condition, n)?
        }
        Command::Eval { common, experiment } => {
            let p = pipeline(&common)?;
            match experiment {
                Experiment::Main => p.eval_main()?,
                Experiment::DataEfficiency => p.eval_data_efficiency()?,
            }
        }
        Command::Sweep { common, param, values } => {
            let p = pipeline(&common)?;
            let values = values.unwrap_or_else(|| p.cfg.sweep_alphas.clone());
            p.sweep(&param, &values)?
        }
        Command::Ablate { common } => pipeline(&common)?.ablate()?,
        Command::Plot { input, output } => {
            plot::plot_file(&input, &output)?;
            return Ok(format!("wrote {}", output.display()));
        }
        Command::DefaultConfig => return Ok(ExperimentConfig::default().to_json()),
    };
    Ok(outcome.summary)
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let (kind, extra) = match err.downcast_ref::<chats_lab::Error>() {
        Some(e @ chats_lab::Error::MissingArtifact { requires, path }) => (
            e.kind(),
            serde_json::json!({ "requires": requires, "path": path.display().to_string() }),
        ),
        Some(e @ chats_lab::Error::Config { path, .. }) => (e.kind(), serde_json::json!({ "field": path })),
        Some(e) => (e.kind(), serde_json::Value::Null),
        None => ("cli", serde_json::Value::Null),
    };
    let mut v = serde_json::json!({ "error": kind, "message": format!("{err:#}") });
    if let serde_json::Value::Object(extra) = extra {
        v.as_object_mut().expect("object").extend(extra);
    }
    v
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    parallel::init_from_env();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::from(1)
        }
    }
}
