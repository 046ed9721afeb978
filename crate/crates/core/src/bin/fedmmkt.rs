use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedmmkt::protocol::{comm_table, run_experiment, write_outputs};
use fedmmkt::{list_presets, parse_config, preset, ProtocolConfig, Result, Variant};

/// Deterministic federated multimodal knowledge-transfer simulator.
#[derive(Parser)]
#[command(name = "fedmmkt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Name of a shipped preset (see `presets`)
    #[arg(long)]
    preset: Option<String>,
}

impl Source {
    fn load(&self) -> Result<ProtocolConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => parse_config(path),
            (None, Some(name)) => preset(name),
            (None, None) => unreachable!("clap enforces one source"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.jsonl and ledger.csv
    Run {
        #[command(flatten)]
        source: Source,
        /// Override the master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the protocol variant (rep, logit or uni)
        #[arg(long)]
        variant: Option<Variant>,
        /// Also write per-round record traces to <out>/trace/
        #[arg(long)]
        dump_trace: bool,
    },
    /// Print per-round communication cost
    CommCost {
        #[command(flatten)]
        source: Source,
    },
    /// List shipped presets
    Presets,
    /// Print the fully defaulted config as JSON
    DumpConfig {
        #[command(flatten)]
        source: Source,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            source,
            seed,
            out,
            variant,
            dump_trace,
        } => {
            let mut cfg = source.load()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            cfg.validate()?;
            let result = run_experiment(&cfg)?;
            write_outputs(&out, &result, dump_trace)?;
            let last = result.final_metrics();
            println!(
                "variant={} rounds={} mean_acc={:.4} t2i_accuracy={:.4} upload_bytes={} download_bytes={} out={}",
                result.variant.as_str(),
                cfg.rounds,
                last.mean_acc,
                last.t2i_accuracy,
                result.ledger.total_upload(),
                result.ledger.total_download(),
                out.display()
            );
        }
        Command::CommCost { source } => print!("{}", comm_table(&source.load()?)),
        Command::Presets => {
            for p in list_presets() {
                println!("{:<16} {}", p.name, p.description);
            }
        }
        Command::DumpConfig { source } => println!("{}", source.load()?.to_json_pretty()),
    }
    Ok(())
}
