use clap::{Parser, Subcommand};
use singlab::harness::{self, CommandKind, HarnessError, RunManifest};
use std::path::PathBuf;
use std::process::ExitCode;

/// Singular-flow laboratory: simulate, section, quotient, and certify.
///
/// Every subcommand reads one JSON config (defaults apply when --config is
/// omitted), writes CSV artifacts plus manifest.json into --out, and exits
/// 0 on success, 2 on validation errors, 3 on numerical failures.
#[derive(Parser)]
#[command(name = "singlab", version, arg_required_else_help = true)]
struct Cli {
    /// JSON run configuration (defaults used when omitted)
    #[arg(long, global = true, env = "SINGLAB_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (overrides `out` in the config)
    #[arg(long, global = true, env = "SINGLAB_OUT", value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed override for every seeded command
    #[arg(long, global = true, env = "SINGLAB_SEED", value_name = "N")]
    seed: Option<u64>,

    /// Write into a non-empty output directory
    #[arg(long, global = true, env = "SINGLAB_FORCE")]
    force: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate the ambient flow on a uniform time grid
    #[command(after_help = CommandKind::Simulate.schema_help())]
    Simulate,
    /// Place and audit the two wing cross-sections
    #[command(after_help = CommandKind::Sections.schema_help())]
    Sections,
    /// Tabulate the one-dimensional quotient map with return times
    #[command(after_help = CommandKind::Quotient.schema_help())]
    Quotient,
    /// Ulam chain and stationary density of the quotient map
    #[command(after_help = CommandKind::Acim.schema_help())]
    Acim,
    /// Hyperbolic-time records along quotient orbits
    #[command(after_help = CommandKind::Hyptimes.schema_help())]
    Hyptimes,
    /// Lift the base measure to the suspension and test invariance
    #[command(after_help = CommandKind::Suspend.schema_help())]
    Suspend,
    /// Lyapunov spectrum over a seed box
    #[command(after_help = CommandKind::Lyapunov.schema_help())]
    Lyapunov,
    /// Entropy-formula cross-checks and the Abramov relation
    #[command(after_help = CommandKind::Entropy.schema_help())]
    Entropy,
    /// Hit-density profile across unstable bands of a section
    #[command(after_help = CommandKind::DensityProfile.schema_help())]
    DensityProfile,
    /// Expansiveness falsification probe over orbit pairs
    #[command(after_help = CommandKind::Expansive.schema_help())]
    Expansive,
    /// Perturbation separation times against the growth law
    #[command(after_help = CommandKind::Sensitivity.schema_help())]
    Sensitivity,
    /// Run every command above into one output directory
    #[command(after_help = CommandKind::All.schema_help())]
    All,
}

impl Cmd {
    fn kind(&self) -> CommandKind {
        match self {
            Cmd::Simulate => CommandKind::Simulate,
            Cmd::Sections => CommandKind::Sections,
            Cmd::Quotient => CommandKind::Quotient,
            Cmd::Acim => CommandKind::Acim,
            Cmd::Hyptimes => CommandKind::Hyptimes,
            Cmd::Suspend => CommandKind::Suspend,
            Cmd::Lyapunov => CommandKind::Lyapunov,
            Cmd::Entropy => CommandKind::Entropy,
            Cmd::DensityProfile => CommandKind::DensityProfile,
            Cmd::Expansive => CommandKind::Expansive,
            Cmd::Sensitivity => CommandKind::Sensitivity,
            Cmd::All => CommandKind::All,
        }
    }
}

fn execute(cli: &Cli) -> Result<(RunManifest, PathBuf), HarnessError> {
    let mut cfg = harness::load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            HarnessError::Validation(
                "no output directory: pass --out DIR or set `out` in the config".into(),
            )
        })?;
    let manifest = harness::run(cli.command.kind(), &cfg, &out, cli.force)?;
    Ok((manifest, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok((manifest, out)) => {
            println!(
                "{}: {} file(s) in {} (config {})",
                manifest.command,
                manifest.files.len(),
                out.display(),
                &manifest.config_sha256[..12]
            );
            for file in &manifest.files {
                println!("  {} ({} bytes)", file.path, file.bytes);
            }
            for (name, ms) in &manifest.timings_ms {
                println!("  [{name}] {ms} ms");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
