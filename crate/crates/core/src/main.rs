use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mcirsa::harness::{emit_outputs, figure_campaign, run_sweep, Mode, SimConfig, SweepVar};
use mcirsa::receiver::CombinerKind;
use mcirsa::{Error, Result};

#[derive(Parser)]
#[command(name = "mcirsa", version, about = "Multi-cell IRSA massive-MIMO throughput simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep one parameter and write a CSV plus a gnuplot script.
    Run {
        /// TOML configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Variable to sweep: L, tau, N or snr_db.
        #[arg(long, default_value = "L")]
        sweep: String,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        /// multi-cell or single-cell.
        #[arg(long)]
        mode: Option<String>,
        /// mmse or mrc.
        #[arg(long)]
        combiner: Option<String>,
        /// Worker threads; results do not depend on this.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Regenerate every result-figure curve into a directory.
    Reproduce {
        #[arg(long, default_value = "figures")]
        out_dir: PathBuf,
        /// Fine grids and the default run count instead of the desk scale.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

fn parse_kebab<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> Result<T> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(text))
        .map_err(|_| Error::Config(format!("invalid {what} {text:?}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            sweep,
            values,
            runs,
            seed,
            out,
            mode,
            combiner,
            workers,
        } => {
            let mut cfg = match &config {
                Some(p) => SimConfig::load_file(p)?,
                None => SimConfig::default(),
            };
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = parse_kebab::<Mode>("mode", &m)?;
            }
            if let Some(c) = combiner {
                cfg.combiner = parse_kebab::<CombinerKind>("combiner", &c)?;
            }
            cfg.validate()?;
            let var: SweepVar = sweep.parse()?;
            let result = run_sweep(&cfg, var, &values, workers)?;
            let script = emit_outputs(&result, &out)?;
            eprintln!("wrote {} and {}", out.display(), script.display());
            Ok(())
        }
        Command::Reproduce {
            out_dir,
            full,
            seed,
            workers,
        } => {
            std::fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
                path: out_dir.clone(),
                source,
            })?;
            for mut curve in figure_campaign(full) {
                if let Some(s) = seed {
                    curve.base.master_seed = s;
                }
                let result = run_sweep(&curve.base, curve.var, &curve.values, workers)?;
                let out = Path::new(&out_dir).join(format!("{}.csv", curve.name));
                emit_outputs(&result, &out)?;
                eprintln!("{}: {} points", curve.name, result.rows.len());
            }
            Ok(())
        }
    }
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
