use clap::{Args, Parser, Subcommand};
use cpdre::harness::{self, presets, HarnessError};
use std::path::PathBuf;
use std::process::ExitCode;

/// Contact processes in dynamical random environments.
#[derive(Parser)]
#[command(name = "cpdre", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment and write CSV tables plus manifest.json.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Worker threads (default: CPDRE_JOBS, then all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check a config and print model diagnostics.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// List the available presets.
    ListPresets,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the defaults of this preset.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `path.to.key=value`, value parsed as JSON; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<harness::ExperimentConfig, HarnessError> {
        let mut ov = self.overrides.clone();
        if let Some(s) = self.seed {
            ov.push(format!("seed={s}"));
        }
        harness::load_config(self.config.as_deref(), self.preset.as_deref(), &ov)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8, HarnessError> {
    match cli.cmd {
        Cmd::ListPresets => {
            for p in presets::PRESETS {
                println!("{:<18} {}", p.name, p.about);
            }
            Ok(0)
        }
        Cmd::Validate { cfg } => {
            let c = cfg.load()?;
            match c.validate()? {
                Some(d) => println!("{}", serde_json::to_string_pretty(&d).expect("json")),
                None => println!("ok (no model)"),
            }
            println!("config_sha256 {}", c.hash());
            Ok(0)
        }
        Cmd::Run { cfg, jobs, out } => {
            let c = cfg.load()?;
            let jobs = harness::resolve_jobs(jobs)?;
            let report = harness::run_preset(&c, &out, jobs)?;
            for ch in &report.checks {
                println!("{} {}: {}", if ch.pass { "PASS" } else { "FAIL" }, ch.name, ch.detail);
            }
            println!("wrote {} files to {}", report.files.len() + 1, out.display());
            Ok(if report.passed() { 0 } else { 3 })
        }
    }
}
