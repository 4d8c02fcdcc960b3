//! `supenv`: command-line driver.
//!
//! Every subcommand writes a bundle into a fresh run directory under the
//! output root: CSV tables, optional SVG plots and binary grid records, and a
//! `manifest.toml`. Exit status is 0 on success, 1 when `--strict` is set and
//! a check failed, and 2 on any error.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};
use supenv::config::{parse_config, Config};
use supenv::report::RunManifest;

/// Variable naming the default output root.
pub const OUT_ENV: &str = "SUPENV_OUT";

#[derive(Parser, Debug)]
#[command(name = "supenv", version, about = "Superprocesses in random environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root. Defaults to $SUPENV_OUT, then `./runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores), overriding `threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit nonzero when any check fails.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Kernel envelope, positive definiteness and Green integrals.
    KernelCheck,
    /// Covariance factorization and sampled increments.
    FieldCheck,
    /// Particle snapshots plus the linear SPDE on field 0.
    Simulate,
    /// Feynman-Kac oracles: factorization, exponential moment, bounds.
    Duals,
    /// Law of large numbers study.
    Lln,
    /// Central limit study.
    Clt,
    /// Normal limit of the environment martingale.
    Prop,
    /// Particle moments against the moment formulas.
    Moments,
    /// Summarizes the checks of an existing run directory.
    Report {
        /// Run directory; defaults to the newest one under the output root.
        dir: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::KernelCheck => "kernel-check",
            Command::FieldCheck => "field-check",
            Command::Simulate => "simulate",
            Command::Duals => "duals",
            Command::Lln => "lln",
            Command::Clt => "clt",
            Command::Prop => "prop",
            Command::Moments => "moments",
            Command::Report { .. } => "report",
        }
    }
}

fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<command>-<unix millis>[-k]`, created fresh.
fn run_dir(root: &Path, command: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let stem = format!("{command}-{ms}");
    let mut dir = root.join(&stem);
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{stem}-{k}"));
        k += 1;
    }
    std::fs::create_dir(&dir)?;
    Ok(dir)
}

fn load(common: &Common) -> supenv::Result<(Config, Vec<String>)> {
    let (mut cfg, warnings) = match &common.config {
        Some(p) => parse_config(p)?,
        None => (Config::default(), Vec::new()),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    Ok((cfg, warnings))
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = output_root(cli.common.out.as_deref());
    // Resolved before the new run directory exists, so "newest" means an
    // earlier run.
    let target = match &cli.command {
        Command::Report { dir: Some(d) } => Some(d.clone()),
        Command::Report { dir: None } => match commands::newest_run(&root) {
            Ok(d) => Some(d),
            Err(e) => return fail(e),
        },
        _ => None,
    };
    let (cfg, mut warnings) = match load(&cli.common) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if cfg.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global() {
            return fail(e);
        }
    }
    let name = cli.command.name();
    let dir = match run_dir(&root, name) {
        Ok(d) => d,
        Err(e) => return fail(format!("cannot create run directory under {}: {e}", root.display())),
    };
    let start = Instant::now();
    let outcome = match cli.command {
        Command::KernelCheck => commands::kernel_check(&cfg),
        Command::FieldCheck => commands::field_check(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::Duals => commands::duals(&cfg),
        Command::Lln | Command::Clt | Command::Prop | Command::Moments => commands::study(&cfg, name),
        Command::Report { .. } => commands::report(target.as_deref().expect("resolved above")),
    };
    let mut manifest = RunManifest::new(name, &cfg);
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            manifest.warnings = warnings;
            manifest.warnings.push(format!("error: {e}"));
            manifest.wall_time_secs = start.elapsed().as_secs_f64();
            let _ = manifest.write(dir.join("manifest.toml"));
            return fail(e);
        }
    };
    warnings.extend(outcome.warnings.iter().cloned());
    manifest.warnings = warnings;
    if let Err(e) = outcome.write(&dir, &mut manifest) {
        return fail(e);
    }
    manifest.wall_time_secs = start.elapsed().as_secs_f64();
    if let Err(e) = manifest.write(dir.join("manifest.toml")) {
        return fail(e);
    }
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    let failed: Vec<_> = outcome.checks.iter().filter(|c| !c.passed).collect();
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    println!("{}", dir.display());
    if !failed.is_empty() && cli.common.strict {
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
