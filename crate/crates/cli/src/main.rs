use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cftp_core::experiments::{
    cmd_conditions, cmd_coupling_diag, cmd_sample, cmd_schedule_build, cmd_tails, ExperimentConfig, Overrides,
};

#[derive(Parser)]
#[command(name = "cftp", version, about = "Perfect sampling of lattice Markov random fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check high-noise, Dobrushin and disagreement-percolation conditions.
    Conditions(Common),
    /// Draw perfect samples; on a torus, test them against the exact law.
    Sample(Common),
    /// Survival curve of the coalescence time.
    Tails(Common),
    /// Coincidence, kappa and contraction sweep of a grand coupling.
    CouplingDiag(Common),
    /// Build a fixed or growing schedule and print its parameters.
    ScheduleBuild(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<u64>,
    /// Output path; per-draw records go to `<out>.jsonl`, tables to `<out>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `torus:WxH` or `window`.
    #[arg(long)]
    substrate: Option<String>,
    #[arg(long)]
    horizon_cap: Option<u32>,
    #[arg(long)]
    exhaustion_limit: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let ov = Overrides {
            seed: self.seed,
            replicas: self.replicas,
            out: self.out.clone(),
            substrate: self.substrate.clone(),
            horizon_cap: self.horizon_cap,
            exhaustion_limit: self.exhaustion_limit,
        };
        ExperimentConfig::load(&self.config, &ov).with_context(|| format!("reading {}", self.config.display()))
    }
}

fn with_ext(p: &Path, ext: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn emit(cfg: &ExperimentConfig, summary: &str, lines: &[String], csv: Option<String>) -> Result<()> {
    println!("{summary}");
    if let Some(out) = &cfg.out {
        fs::write(with_ext(out, "json"), format!("{summary}\n")).context("writing summary")?;
        if !lines.is_empty() {
            let mut f = fs::File::create(with_ext(out, "jsonl")).context("creating records file")?;
            for l in lines {
                writeln!(f, "{l}")?;
            }
        }
        if let Some(c) = csv {
            fs::write(with_ext(out, "csv"), c).context("writing table")?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Conditions(c) => {
            let cfg = c.load()?;
            let r = cmd_conditions(&cfg)?;
            emit(&cfg, &serde_json::to_string_pretty(&r)?, &[], None)
        }
        Command::Sample(c) => {
            let cfg = c.load()?;
            let r = cmd_sample(&cfg)?;
            emit(&cfg, &serde_json::to_string_pretty(&r)?, &r.lines, None)
        }
        Command::Tails(c) => {
            let cfg = c.load()?;
            let r = cmd_tails(&cfg)?;
            let csv = r.table.to_csv();
            emit(&cfg, &serde_json::to_string_pretty(&r)?, &[], Some(csv))
        }
        Command::CouplingDiag(c) => {
            let cfg = c.load()?;
            let (r, lines) = cmd_coupling_diag(&cfg)?;
            emit(&cfg, &serde_json::to_string_pretty(&r)?, &lines, None)
        }
        Command::ScheduleBuild(c) => {
            let cfg = c.load()?;
            let r = cmd_schedule_build(&cfg)?;
            emit(&cfg, &serde_json::to_string_pretty(&r)?, &[], None)?;
            if let (Some(text), Some(out)) = (&r.config_text, &cfg.out) {
                fs::write(with_ext(out, "conf"), text).context("writing plan config")?;
            }
            Ok(())
        }
    }
}
