use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pivot_refine::config::RunConfig;
use pivot_refine::pipeline::{oracle_check, Experiment};
use pivot_refine::Error;

/// Prompt refinement through an image-representation pivot.
///
/// Every subcommand prints a one-line JSON summary on stdout and writes its
/// artifacts under the output directory. Exit status: 0 success,
/// 1 invalid input or usage, 2 resource limit.
#[derive(Parser, Debug)]
#[command(name = "pivot-refine", version)]
struct Cli {
    /// JSON run configuration; defaults are used for anything missing.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the interaction log.
    WorldLog,
    /// Build preference pairs and the decoder corpus from the log.
    DataBuild,
    /// Warm up the preference encoder.
    TrainEncoder,
    /// Warm up the prompt decoder.
    TrainDecoder,
    /// Tune the encoder with PPO; writes the warm and tuned bundles.
    TrainRl,
    /// Refine one user prompt with the tuned bundle.
    Refine {
        /// Space-separated concept tokens, e.g. "c0 c1".
        #[arg(long)]
        prompt: String,
    },
    /// Evaluate the warm and tuned bundles on held-out prompts.
    Eval,
    /// Train and evaluate the ablation grid.
    Ablate,
    /// Verify the pivot decomposition identities on random discrete instances.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> anyhow::Result<(bool, serde_json::Value)> {
    let cfg = load_config(cli)?;
    if let Command::OracleCheck { instances } = cli.command {
        return Ok(oracle_check(instances, cfg.seed)?);
    }
    let exp = Experiment::new(&cfg, &cfg.out)?;
    let summary = match &cli.command {
        Command::WorldLog => exp.world_log()?,
        Command::DataBuild => exp.data_build()?,
        Command::TrainEncoder => exp.train_encoder()?,
        Command::TrainDecoder => exp.train_decoder()?,
        Command::TrainRl => exp.train_rl()?,
        Command::Refine { prompt } => exp.refine(prompt)?,
        Command::Eval => exp.eval()?,
        Command::Ablate => exp.ablate()?,
        Command::OracleCheck { .. } => unreachable!("handled above"),
    };
    Ok((true, summary))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_resource() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok((ok, summary)) => {
            println!("{summary}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
