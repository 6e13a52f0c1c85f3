use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cycleseg::cli;
use cycleseg::config::RunConfig;
use cycleseg::error::Result;
use cycleseg::groupstrat::Strategy;
use cycleseg::verify::Scope;

/// Object co-segmentation with region-correspondence attention and ConvLSTM
/// cycle refinement, trained and evaluated on seeded synthetic scenes.
#[derive(Parser)]
#[command(name = "cycleseg", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags mirror the config-file keys; precedence is
/// defaults < --config file < flags.
#[derive(Args)]
struct RunArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// refinement steps N
    #[arg(long)]
    steps: Option<usize>,
    /// ROI grid side; 0 = raw (no pooling)
    #[arg(long)]
    roi: Option<usize>,
    /// rcm | mcat | mmul | none
    #[arg(long)]
    exchange: Option<String>,
    #[arg(long)]
    levels: Option<usize>,
    /// images per tuple
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// a | b | c | d
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    canvas: Option<usize>,
    /// comma-separated encoder stage widths
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    crm_channels: Option<usize>,
    #[arg(long)]
    train_groups: Option<usize>,
    #[arg(long)]
    test_groups: Option<usize>,
    #[arg(long)]
    val_groups: Option<usize>,
    /// comma-separated shape classes
    #[arg(long)]
    train_classes: Option<String>,
    #[arg(long)]
    test_classes: Option<String>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// group size N for group segmentation
    #[arg(long)]
    group_n: Option<usize>,
    /// lovasz | ce
    #[arg(long)]
    loss: Option<String>,
    /// verbatim | standard
    #[arg(long)]
    candidate_gate: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    tuple_cap: Option<u64>,
    #[arg(long)]
    out_dir: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        macro_rules! flag {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.set($key, &v.to_string())?;
                }
            };
        }
        flag!(seed, "seed");
        flag!(steps, "steps");
        flag!(roi, "roi");
        flag!(exchange, "exchange");
        flag!(levels, "levels");
        flag!(k, "k");
        flag!(lr, "lr");
        flag!(weight_decay, "weight_decay");
        flag!(iterations, "iterations");
        flag!(strategy, "strategy");
        flag!(canvas, "canvas");
        flag!(channels, "channels");
        flag!(crm_channels, "crm_channels");
        flag!(train_groups, "train_groups");
        flag!(test_groups, "test_groups");
        flag!(val_groups, "val_groups");
        flag!(train_classes, "train_classes");
        flag!(test_classes, "test_classes");
        flag!(distractors, "distractors");
        flag!(noise, "noise");
        flag!(group_n, "group_n");
        flag!(loss, "loss");
        flag!(candidate_gate, "candidate_gate");
        flag!(eval_every, "eval_every");
        flag!(tuple_cap, "tuple_cap");
        flag!(out_dir, "out_dir");
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint + training log
    Train(RunArgs),
    /// Evaluate a checkpoint on the held-out test pairs
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// also decode and score every refinement step
        #[arg(long)]
        per_step: bool,
    },
    /// Group segmentation over an N-image group per held-out class
    GroupEval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sampling-strategy x tuple-size benchmark table
    StrategyBench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// comma-separated subset of a,b,c,d
        #[arg(long, default_value = "a,b,c,d")]
        strategies: String,
        /// comma-separated tuple sizes
        #[arg(long, default_value = "2,3,4,5")]
        k_values: String,
    },
    /// Finite-difference gradient verification
    Gradcheck {
        /// ops | modules | full
        #[arg(long, default_value = "full")]
        scope: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Write the synthetic dataset as PPM/PGM files with manifests
    GenData(RunArgs),
}

fn configure_threads() {
    if let Ok(v) = std::env::var("CYCLESEG_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train(args) => {
            cli::cmd_train(&args.resolve()?)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            run,
            checkpoint,
            per_step,
        } => {
            cli::cmd_eval(&run.resolve()?, &checkpoint, per_step)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GroupEval { run, checkpoint } => {
            cli::cmd_group_eval(&run.resolve()?, &checkpoint)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::StrategyBench {
            run,
            checkpoint,
            strategies,
            k_values,
        } => {
            let strategies: Vec<Strategy> = strategies
                .split(',')
                .filter(|s| !s.is_empty())
                .map(Strategy::parse)
                .collect::<Result<_>>()?;
            let k_values: Vec<usize> = k_values
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| {
                        cycleseg::Error::InvalidConfig(format!("bad k value '{s}'"))
                    })
                })
                .collect::<Result<_>>()?;
            cli::cmd_strategy_bench(&run.resolve()?, &checkpoint, &strategies, &k_values)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { scope, seed } => {
            let all_pass = cli::cmd_gradcheck(Scope::parse(&scope)?, seed)?;
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Cmd::GenData(args) => {
            cli::cmd_gen_data(&args.resolve()?)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code_for(&err))
        }
    }
}
