use clap::{Parser, Subcommand, ValueEnum};
use spotmarket_cli::{emit_curves, exit, run, verify, Format};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "spotmarket",
    version,
    about = "Nodal spot-market equilibria with pollution, market power, price caps and incentive payments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario under several modes and print a comparison table.
    Run {
        file: PathBuf,
        /// Comma-separated modes: optimal, competitive, oligopolistic, cap=<v>[/<v>...], mechanism.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
    },
    /// Print marginal curves as CSV.
    Curves {
        file: PathBuf,
        /// One-based node index.
        #[arg(long)]
        node: usize,
        /// One-based producer index; the whole node when omitted.
        #[arg(long)]
        producer: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        step: f64,
    },
    /// Validate a scenario file.
    Verify { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { file, modes, format } => {
            let format = match format {
                OutputFormat::Text => Format::Text,
                OutputFormat::Csv => Format::Csv,
            };
            run(&file, modes.as_deref(), format)
        }
        Command::Curves {
            file,
            node,
            producer,
            step,
        } => emit_curves(&file, node, producer, step).map(|s| (s, exit::OK)),
        Command::Verify { file } => verify(&file),
    };
    match result {
        Ok((text, code)) => {
            print!("{text}");
            ExitCode::from(code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
