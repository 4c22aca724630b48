use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use mqvae::pipeline::{self, ExperimentConfig, Layout, Variant};
use mqvae::{Error, Result};

/// Sparse latent world models on the dot-reacher task.
#[derive(Debug, Parser)]
#[command(name = "mqvae", version)]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Print the default configuration and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect transitions with the noisy feedback controller.
    Collect,
    /// Train a VAE variant on the training split.
    TrainVae {
        #[arg(long, default_value = "qvae", value_parser = parse_variant)]
        variant: Variant,
        /// Train even when the sparsification condition is violated.
        #[arg(long = "unsafe")]
        unsafe_condition: bool,
    },
    /// Report sparsity and dimension importance; write the latent mask.
    Analyze {
        #[arg(long, default_value = "qvae", value_parser = parse_variant)]
        variant: Variant,
    },
    /// Train a world model on the encoded transitions.
    TrainWorld {
        #[arg(long, default_value = "qvae", value_parser = parse_variant)]
        variant: Variant,
        /// Drop the latent dimensions excluded by the mask.
        #[arg(long)]
        masked: bool,
    },
    /// Closed-loop control with the cross-entropy planner.
    Eval {
        #[arg(long, default_value = "qvae", value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        masked: bool,
        /// Overrides `eval.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    let report = config.sparsity_report();
    println!(
        "sparsity_condition satisfied={} exact_vae={} chain={:?}",
        report.satisfied, report.exact_vae, report.chain_values
    );
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_defaults {
        print!("{}", ExperimentConfig::default().to_toml()?);
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::Config("no command given; see --help".into()));
    };
    let mut config = load_config(&cli)?;
    let layout = Layout::new(&config.output_dir);
    match *command {
        Command::Collect => {
            let s = pipeline::collect(&config, &layout)?;
            println!("train={} validation={} test={}", s.train, s.validation, s.test);
        }
        Command::TrainVae { variant, unsafe_condition } => {
            info!("training {} into {}", variant.name(), layout.dir.display());
            let s = pipeline::train_vae(&config, &layout, variant, unsafe_condition, |r| println!("{}", r.log_line()))?;
            println!("test_reconstruction_mse={}", s.test_mse);
        }
        Command::Analyze { variant } => {
            print!("{}", pipeline::analyze(&config, &layout, variant)?.report());
        }
        Command::TrainWorld { variant, masked } => {
            let s = pipeline::train_world(&config, &layout, variant, masked, |r| println!("{}", r.log_line()))?;
            println!(
                "parameters={} parameters_unmasked={} ratio={:.4}",
                s.parameter_count,
                s.unmasked_parameter_count,
                s.parameter_count as f64 / s.unmasked_parameter_count as f64
            );
        }
        Command::Eval { variant, masked, episodes } => {
            if let Some(n) = episodes {
                config.eval.episodes = n;
            }
            print!("{}", pipeline::evaluate(&config, &layout, variant, masked)?.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
