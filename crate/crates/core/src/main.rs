use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use agentspawn::harness::{
    emit_report, generate_synthetic, load_config, load_params, load_workload, parse_config, parse_params,
    parse_workload, run_simulation, save_workload, GeneratorParams, ReportFormat, RunConfig,
};
use agentspawn::protocol::{decode_package, encode_package, Package};

/// Exit status for unreadable or invalid input files.
const EXIT_INVALID: u8 = 3;

#[derive(Parser)]
#[command(name = "agentspawn", version, about = "Adaptive child-agent spawning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Human,
    Machine,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Auto,
    Workload,
    Config,
    Params,
    Package,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload and print its report.
    Run {
        #[arg(long)]
        workload: PathBuf,
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the scheduler event log here.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Write every spawn and resume package into this directory.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Generate a synthetic workload.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML generator parameters; defaults apply when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Write the workload here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check workload, config, params or package files.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Kind::Auto)]
        kind: Kind,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CliResult = Result<(), (u8, String)>;

fn invalid(e: impl std::fmt::Display) -> (u8, String) {
    (EXIT_INVALID, e.to_string())
}

fn write_out(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| (1, format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_checkpoints(dir: &Path, packages: &[Package]) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| (1, format!("cannot create {}: {e}", dir.display())))?;
    for p in packages {
        let name = match p {
            Package::Spawn(s) => format!("spawn_{}.json", s.spawn_id),
            Package::Resume(r) => format!("resume_{}.json", r.spawn_id),
        };
        let path = dir.join(name);
        std::fs::write(&path, encode_package(p)).map_err(|e| (1, format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Run {
            workload,
            config,
            seed,
            format,
            report,
            events,
            checkpoints,
        } => {
            let spec = load_workload(&workload).map_err(invalid)?;
            let config = match config {
                Some(p) => load_config(&p).map_err(invalid)?,
                None => RunConfig::default(),
            };
            let r = run_simulation(&spec, &config, seed).map_err(invalid)?;
            if let Some(p) = events {
                write_out(Some(&p), &r.event_log)?;
            }
            if let Some(dir) = checkpoints {
                write_checkpoints(&dir, &r.packages)?;
            }
            let format = match format {
                Format::Human => ReportFormat::Human,
                Format::Machine => ReportFormat::Machine,
            };
            write_out(report.as_deref(), &emit_report(&r, format))
        }
        Command::Generate { seed, params, out } => {
            let params = match params {
                Some(p) => load_params(&p).map_err(invalid)?,
                None => GeneratorParams::default(),
            };
            let spec = generate_synthetic(seed, &params).map_err(invalid)?;
            match out {
                Some(p) => save_workload(&spec, &p).map_err(|e| (1, e.to_string())),
                None => write_out(None, &spec.to_json()),
            }
        }
        Command::Validate { files, kind } => {
            let mut failed = false;
            for f in &files {
                match validate_file(f, kind) {
                    Ok(what) => println!("{}: ok ({what})", f.display()),
                    Err(e) => {
                        failed = true;
                        println!("{}: {e}", f.display());
                    }
                }
            }
            if failed {
                Err((EXIT_INVALID, "validation failed".into()))
            } else {
                Ok(())
            }
        }
    }
}

fn validate_file(path: &Path, kind: Kind) -> Result<&'static str, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read: {e}"))?;
    let kind = match kind {
        Kind::Auto if path.extension().is_some_and(|e| e == "toml") => {
            // Generator params and run configs share the extension.
            if parse_config(&text).is_ok() || parse_params(&text).is_err() {
                Kind::Config
            } else {
                Kind::Params
            }
        }
        Kind::Auto => match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(v) if v.get("schema").is_some() => Kind::Workload,
            _ => Kind::Package,
        },
        k => k,
    };
    match kind {
        Kind::Workload => parse_workload(&text).map(|_| "workload").map_err(|e| e.to_string()),
        Kind::Config => parse_config(&text).map(|_| "config").map_err(|e| e.to_string()),
        Kind::Params => parse_params(&text).map(|_| "generator params").map_err(|e| e.to_string()),
        Kind::Package | Kind::Auto => match decode_package(text.as_bytes()) {
            Ok(Package::Spawn(_)) => Ok("spawn package"),
            Ok(Package::Resume(_)) => Ok("resume package"),
            Err(e) => Err(e.to_string()),
        },
    }
}
