use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frl_core::ckpt::{analyze_checkpoint, load_tensor_archive, AttentionLayout};
use frl_core::harness::{parse_matrix_csv, plot_traces, run_experiment, ExperimentConfig};
use frl_core::spectra::{spectrum_report, DEFAULT_THRESHOLD};
use frl_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "frl", version, about = "Factorized L2 regularization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a lambda sweep described by a JSON config.
    Run { config: PathBuf },
    /// Plot one column of one or more trace CSVs as SVG.
    Plot {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        y: String,
        #[arg(long)]
        log: bool,
        /// Defaults to `<first trace stem>_<column>.svg` next to the first trace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the spectrum report of a headerless matrix CSV as JSON.
    Spectrum {
        matrix: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Per-head attention diagnostics of a safetensors archive.
    Analyze {
        archive: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            for c in &report.cells {
                match c.diverged_at {
                    Some(step) => eprintln!("cell {} lambda={}: diverged at step {step}", c.index, c.lambda),
                    None => {
                        let last = c.trace.last().expect("completed trace has records");
                        eprintln!(
                            "cell {} lambda={}: reg_gap={:.3e} pseudo_rank={}",
                            c.index, c.lambda, last.reg_gap, last.pseudo_rank
                        );
                    }
                }
            }
            println!("{}", report.summary_path.display());
            if report.any_diverged() {
                return Ok(ExitCode::from(EXIT_DIVERGED));
            }
        }
        Command::Plot { traces, y, log, out } => {
            let out = out.unwrap_or_else(|| {
                let first = &traces[0];
                let stem = first.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                first.with_file_name(format!("{stem}_{y}.svg"))
            });
            plot_traces(&traces, &y, log, &out)?;
            println!("{}", out.display());
        }
        Command::Spectrum { matrix, threshold } => {
            let m = parse_matrix_csv(&matrix)?;
            let report = spectrum_report(&m, threshold)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Analyze {
            archive,
            layout,
            threshold,
            out,
        } => {
            let layout = AttentionLayout::load(&layout)?;
            let archive = load_tensor_archive(&archive)?;
            let report = analyze_checkpoint(&archive, &layout, threshold)?;
            report.write(&out)?;
            eprintln!("analyzed {} heads", report.heads.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which would read as "diverged".
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
