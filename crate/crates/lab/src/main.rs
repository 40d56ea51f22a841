use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polaron_lab::{presets, record, run, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "polaron-lab", version, about = "Polaron experiments on periodic insulating crystals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        no_cache: bool,
    },
    /// List the shipped presets, or print one as TOML.
    Presets { name: Option<String> },
    /// Recompute the configuration hash and table digests of a record.
    Verify {
        #[arg(long)]
        record: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out, jobs, no_cache } => {
            if let Some(n) = jobs {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(4);
                }
            }
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(e.exit_code() as u8);
                }
            };
            match run(&cfg, &RunOptions { out, no_cache, cache_root: None }) {
                Ok(rec) => {
                    for a in &rec.assertions {
                        println!("{} {}: {} ({})", if a.passed { "PASS" } else { "FAIL" }, a.name, a.property, a.detail);
                    }
                    if let Some(e) = &rec.error {
                        eprintln!("error: {e}");
                    }
                    println!("{} {:?} in {:.1}s", rec.experiment, rec.status, rec.wall_time_s);
                    rec.status.exit_code()
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Presets { name: None } => {
            for p in presets::PRESETS {
                println!("{:<20} {}", p.name, p.summary);
            }
            0
        }
        Command::Presets { name: Some(n) } => match presets::get(&n) {
            Some(c) => {
                print!("{}", c.to_toml());
                0
            }
            None => {
                eprintln!("error: unknown preset {n}");
                4
            }
        },
        Command::Verify { record: path } => match record::verify(&path) {
            Ok(v) => {
                println!("config hash {}", if v.config_hash_ok { "ok" } else { "MISMATCH" });
                for (file, ok) in &v.tables {
                    println!("{file} {}", if *ok { "ok" } else { "MISMATCH" });
                }
                if v.ok() {
                    0
                } else {
                    2
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    };
    ExitCode::from(code as u8)
}

/// A config file, or a bare preset name.
fn load(path: &std::path::Path) -> Result<ExperimentConfig, polaron_lab::LabError> {
    if !path.exists() {
        if let Some(c) = path.to_str().and_then(presets::get) {
            return Ok(c);
        }
    }
    ExperimentConfig::load(path)
}
