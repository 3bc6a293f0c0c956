use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prompt_adapt::commands;
use prompt_adapt::{CliError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "prompt-adapt", version, about = "Continual test-time adaptation with visual domain prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite an existing source checkpoint.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the clean source train and test sets.
    GenData,
    /// Train and freeze the source classifier.
    TrainSource,
    /// Warm prompts and adapt over the configured domain stream.
    Adapt,
    /// Run one adaptation per value of the configured sweep axis.
    Sweep,
    /// Merge finished runs into a comparison table.
    Report,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <file> is required".into()))?;
    let cfg = RunConfig::load(path)?;
    match cli.command {
        Command::GenData => {
            let out = commands::gen_data(&cfg)?;
            println!("wrote {} ({})", out.train_path.display(), out.train_digest);
            println!("wrote {} ({})", out.test_path.display(), out.test_digest);
        }
        Command::TrainSource => {
            let out = commands::train_source(&cfg, cli.force)?;
            for (epoch, loss) in out.losses.iter().enumerate() {
                println!("epoch {:>3}  loss {loss:.6}", epoch + 1);
            }
            println!("clean test accuracy {:.2}%", 100.0 * out.clean_accuracy);
            println!("wrote {} ({})", out.checkpoint.display(), out.checksum);
        }
        Command::Adapt => {
            let out = commands::adapt(&cfg)?;
            print!("{}", out.summary.render());
            println!("wrote {}", out.dir.display());
        }
        Command::Sweep => {
            let points = commands::sweep(&cfg)?;
            for p in &points {
                println!(
                    "{:<12} mean error {:.2}%  source-only {:.2}%",
                    p.label,
                    100.0 * p.mean_error,
                    100.0 * p.source_only_mean_error
                );
            }
            println!("wrote {}", cfg.output_dir.join(commands::SWEEP_FILE).display());
        }
        Command::Report => {
            print!("{}", commands::report(&cfg)?);
            println!("wrote {}", cfg.output_dir.join(commands::COMPARISON_CSV).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
