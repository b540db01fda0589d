use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use mscs_core::attacks::{catalog, CatalogEntry};
use mscs_core::codec::decode;
use mscs_core::detection::DetectorSet;
use mscs_core::risk::{audit_catalog, render_report, ReportFormat};
use mscs_core::sim::{run, ScenarioConfig, SEED_ENV};

/// Maneuver coordination attack and misbehavior detection harness.
#[derive(Parser)]
#[command(name = "mscs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its event log and metrics.
    Run(RunArgs),
    /// Inspect the attack catalog.
    Attacks {
        #[command(subcommand)]
        command: AttacksCommand,
    },
    /// Risk assessment over the attack catalog.
    Risk {
        #[command(subcommand)]
        command: RiskCommand,
    },
    /// Decode one message from a hex or binary file.
    Validate { file: PathBuf },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides MSCS_SEED, which overrides the config.
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Directory for events.jsonl, metrics.json and attribution.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated detector ids, e.g. D1,D5,D7x.
    #[arg(long)]
    detectors: Option<String>,
    #[arg(long)]
    trace_kinematics: bool,
}

#[derive(Subcommand)]
enum AttacksCommand {
    /// Print the sixteen catalog rows.
    List {
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum RiskCommand {
    /// Rule-computed overall ratings against the published labels.
    Report {
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Records,
}

/// Exit code 1.
#[derive(Debug)]
struct ValidationFailure(String);

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run_scenario(args),
        Command::Attacks {
            command: AttacksCommand::List { format },
        } => {
            print!("{}", render_catalog(&catalog(), format));
            Ok(())
        }
        Command::Risk {
            command: RiskCommand::Report { format },
        } => risk_report(format),
        Command::Validate { file } => validate(&file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<ValidationFailure>() => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run_scenario(args: RunArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = ScenarioConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(list) = &args.detectors {
        cfg.detectors.enabled = DetectorSet::parse_list(list)
            .map_err(anyhow::Error::msg)
            .context("--detectors")?;
    }
    cfg.trace_kinematics |= args.trace_kinematics;
    cfg.validate()?;

    let out = run(&cfg)?;
    if let Some(dir) = &args.out {
        write_outputs(dir, &out)?;
    }
    println!("seed: {}", cfg.seed);
    println!("{}", out.metrics);
    println!("digest: {}", out.digest());
    Ok(())
}

fn write_outputs(dir: &Path, out: &mscs_core::sim::RunOutput) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut events = BufWriter::new(fs::File::create(dir.join("events.jsonl"))?);
    out.log.write_jsonl(&mut events)?;
    events.flush()?;
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&out.metrics)?,
    )?;
    fs::write(
        dir.join("attribution.json"),
        serde_json::to_string_pretty(&out.attribution)?,
    )?;
    Ok(())
}

fn render_catalog(entries: &[CatalogEntry], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Table => {
            out.push_str(&format!(
                "{:<4} {:<22} {:<7} {:<7} {:<7} {:<7} description\n",
                "id", "name", "repro", "impact", "stealth", "label"
            ));
            for e in entries {
                out.push_str(&format!(
                    "{:<4} {:<22} {:<7} {:<7} {:<7} {:<7} {}\n",
                    e.id.to_string(),
                    e.id.name(),
                    e.reproducibility.name(),
                    e.impact.name(),
                    e.stealthiness.name(),
                    e.published_label.name(),
                    e.description
                ));
            }
        }
        Format::Records => {
            for e in entries {
                out.push_str(&serde_json::to_string(e).expect("catalog rows serialize"));
                out.push('\n');
            }
        }
    }
    out
}

fn risk_report(format: Format) -> anyhow::Result<()> {
    let audit = audit_catalog(&catalog())?;
    let format = match format {
        Format::Table => ReportFormat::Table,
        Format::Records => ReportFormat::Records,
    };
    print!("{}", render_report(&audit, format));
    Ok(())
}

/// Hex text when the file is nothing but hex digits and whitespace, raw
/// bytes otherwise.
fn read_message(file: &Path) -> anyhow::Result<Vec<u8>> {
    let raw = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let compact: Vec<u8> = raw
        .iter()
        .copied()
        .filter(|b| !b.is_ascii_whitespace())
        .collect();
    if !compact.is_empty() && compact.iter().all(u8::is_ascii_hexdigit) {
        return hex::decode(&compact)
            .map_err(|e| ValidationFailure(format!("invalid hex: {e}")).into());
    }
    Ok(raw)
}

fn validate(file: &Path) -> anyhow::Result<()> {
    let bytes = read_message(file)?;
    match decode(&bytes) {
        Ok(msg) => {
            println!("{}", serde_json::to_string_pretty(&msg)?);
            Ok(())
        }
        Err(e) => Err(ValidationFailure(format!("invalid message: {e}")).into()),
    }
}
