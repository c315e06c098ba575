use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cogr_cli::{
    check_ablate, cmd_diagnose, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_sweep, cmd_train, parse_grid, parse_mode,
    CliError, CliResult, ConfigArgs, GRADCHECK_TOLERANCE,
};

/// Cue-guided mixture-of-experts routing on synthetic multiple-choice data.
#[derive(Parser, Debug)]
#[command(name = "cogr", version)]
struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Args, Debug, Clone)]
struct ConfigFlags {
    /// JSON config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Comma-separated ablation flags: no_sa, no_sj, no_unc, no_contrast,
    /// no_distill, only_variance, prompt_only.
    #[arg(long)]
    ablate: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Commands {
    /// Generate the synthetic train and held-out splits with their cue files.
    GenData {
        #[command(flatten)]
        config: ConfigFlags,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint.json and metrics.csv.
    Train {
        #[command(flatten)]
        config: ConfigFlags,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Routing mode: teacher reads cues, student does not.
        #[arg(long, default_value = "student")]
        mode: String,
        /// Optional CSV file for the metrics.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per (expert count, top-k) cell and write sweep.csv.
    Sweep {
        #[command(flatten)]
        config: ConfigFlags,
        /// Comma-separated expert counts.
        #[arg(long, default_value = "2,4,8")]
        grid_n: String,
        /// Comma-separated top-k values.
        #[arg(long, default_value = "1,2,3")]
        grid_k: String,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write routing diagnostics and the expert selection heatmap.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Routing mode: teacher reads cues, student does not.
        #[arg(long, default_value = "student")]
        mode: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients per parameter tensor.
    Gradcheck {
        #[command(flatten)]
        config: ConfigFlags,
    },
}

fn config_args(flags: ConfigFlags, seed: Option<u64>) -> CliResult<ConfigArgs> {
    if let Some(list) = &flags.ablate {
        check_ablate(list)?;
    }
    Ok(ConfigArgs {
        config: flags.config,
        seed,
        ablate: flags.ablate,
    })
}

fn print_outputs(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Commands::GenData { config, out } => {
            print_outputs(&cmd_gen_data(&config_args(config, seed)?, &out)?);
        }
        Commands::Train { config, data, out } => {
            print_outputs(&cmd_train(&config_args(config, seed)?, &data, &out)?);
        }
        Commands::Eval {
            checkpoint,
            data,
            mode,
            out,
        } => {
            let summary = cmd_eval(&checkpoint, &data, parse_mode(&mode)?, out.as_deref())?;
            print!("{}", summary.csv());
        }
        Commands::Sweep {
            config,
            grid_n,
            grid_k,
            data,
            out,
        } => {
            let n = parse_grid("--grid-n", &grid_n)?;
            let k = parse_grid("--grid-k", &grid_k)?;
            let rows = cmd_sweep(&config_args(config, seed)?, &n, &k, data.as_deref(), &out)?;
            for r in &rows {
                let acc = r.acc.map(|a| format!("{a:.1}")).unwrap_or_else(|| "-".into());
                println!("n={} K={} Acc={acc} {}", r.n, r.k, r.status);
            }
        }
        Commands::Diagnose {
            checkpoint,
            data,
            mode,
            out,
        } => {
            print_outputs(&cmd_diagnose(&checkpoint, &data, parse_mode(&mode)?, &out)?);
        }
        Commands::Gradcheck { config } => {
            let reports = cmd_gradcheck(&config_args(config, seed)?)?;
            let mut failed = Vec::new();
            for r in &reports {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                println!("{verdict} {} max_rel_err={:.3e}", r.tensor, r.max_relative_error);
                if !r.passed() {
                    failed.push(r.tensor.clone());
                }
            }
            if !failed.is_empty() {
                return Err(CliError::GradCheck(format!(
                    "{} tensor(s) above {GRADCHECK_TOLERANCE:e}: {}",
                    failed.len(),
                    failed.join(", ")
                )));
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
            eprintln!("cogr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
