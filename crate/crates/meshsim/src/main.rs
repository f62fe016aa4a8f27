use clap::{Parser, Subcommand};
use meshsim::harness::{self, ScenarioError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "meshsim",
    about = "Deterministic wireless-mesh routing security simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv, metrics.json and
    /// classification.csv into the output directory.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay detection offline over an exported trace.
    Detect {
        #[arg(long)]
        trace: PathBuf,
        /// Scenario file supplying topology and detection parameters.
        #[arg(long)]
        params: PathBuf,
        /// Output file for classification.csv; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario across a seed range (inclusive, "a..b").
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_OVERFLOW: u8 = 3;

fn exit_for(err: &ScenarioError) -> u8 {
    match err {
        ScenarioError::Run(_) => EXIT_OVERFLOW,
        _ => EXIT_VALIDATION,
    }
}

fn write_outputs(dir: &PathBuf, out: &harness::RunOutput) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trace.csv"), &out.trace_csv)?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&out.metrics).expect("serializable") + "\n",
    )?;
    std::fs::write(dir.join("classification.csv"), &out.classification_csv)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    match cli.command {
        Command::Run { scenario, seed, out } => {
            let config = harness::load_scenario(&scenario)
                .map_err(|e| (EXIT_VALIDATION, e.to_string()))?;
            let output = harness::run_scenario(config, seed)
                .map_err(|e| (exit_for(&e), e.to_string()))?;
            for w in &output.warnings {
                eprintln!("warning: {w}");
            }
            write_outputs(&out, &output).map_err(|e| (1, e.to_string()))?;
            let pdrs: Vec<String> = output
                .metrics
                .flows
                .iter()
                .map(|f| match f.pdr {
                    Some(p) => format!("flow {}: pdr {:.3}", f.id, p),
                    None => format!("flow {}: no traffic", f.id),
                })
                .collect();
            println!(
                "run complete: {} events traced{}",
                output.trace_csv.lines().count() - 1,
                if pdrs.is_empty() {
                    String::new()
                } else {
                    format!("; {}", pdrs.join("; "))
                }
            );
            Ok(())
        }
        Command::Detect { trace, params, out } => {
            let trace_text =
                std::fs::read_to_string(&trace).map_err(|e| (1, e.to_string()))?;
            let config = harness::load_scenario(&params)
                .map_err(|e| (EXIT_VALIDATION, e.to_string()))?;
            let csv = harness::detect_offline(&trace_text, config)
                .map_err(|e| (exit_for(&e), e.to_string()))?;
            match out {
                Some(path) => std::fs::write(path, csv).map_err(|e| (1, e.to_string()))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Sweep { scenario, seeds, out } => {
            let (a, b) = seeds
                .split_once("..")
                .ok_or((EXIT_VALIDATION, "seed range must be a..b".to_string()))?;
            let a: u64 = a
                .trim()
                .parse()
                .map_err(|_| (EXIT_VALIDATION, "bad seed range start".to_string()))?;
            let b: u64 = b
                .trim()
                .parse()
                .map_err(|_| (EXIT_VALIDATION, "bad seed range end".to_string()))?;
            let config = harness::load_scenario(&scenario)
                .map_err(|e| (EXIT_VALIDATION, e.to_string()))?;
            // Surface validation problems before spawning workers.
            harness::validate(config.clone()).map_err(|e| (exit_for(&e), e.to_string()))?;
            let results = harness::sweep(&config, a..=b);
            std::fs::create_dir_all(&out).map_err(|e| (1, e.to_string()))?;
            let mut reports = Vec::new();
            for r in results {
                match r.output {
                    Ok(o) => {
                        let dir = out.join(r.seed.to_string());
                        write_outputs(&dir, &o).map_err(|e| (1, e.to_string()))?;
                        reports.push(o.metrics);
                    }
                    Err(e) => return Err((exit_for(&e), format!("seed {}: {e}", r.seed))),
                }
            }
            std::fs::write(
                out.join("summary.json"),
                serde_json::to_string_pretty(&reports).expect("serializable") + "\n",
            )
            .map_err(|e| (1, e.to_string()))?;
            println!("sweep complete: {} seeds", reports.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
