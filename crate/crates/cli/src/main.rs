//! `machest`: run channel-estimation trials and sweeps.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use machest_core::experiment::{
    aggregate, estimate, run_trial_detailed, simulate_trial, trial_rng, write_aggregate_csv, write_raw_csv,
    write_sweep, write_trace_csv, AxisValue, RunOptions, SweepAxis,
};
use machest_core::pilot::PilotRecord;
use machest_core::ExperimentConfig;

#[derive(Parser)]
#[command(name = "machest", version, about = "Wideband movable-antenna channel estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML or JSON configuration; defaults apply to missing fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, env = "MACHEST_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.sweep.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo sweep over one axis; writes raw and aggregate CSVs.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// snr, mc, region or layout.
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Record wall-clock time per trial in the raw CSV.
        #[arg(long)]
        timing: bool,
    },
    /// One trial with all intermediate artifacts written as JSON.
    Trial {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        trial: u32,
    },
    /// Sample a scene and its pilots; writes scene.json and pilots.json.
    Scene {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        trial: u32,
    },
    /// Estimate the channel from a pilots.json file.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Pilot record written by `scene` or `trial`.
        #[arg(long)]
        pilots: PathBuf,
    },
    /// Print the default configuration as TOML.
    Config,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    machest_core::linalg::use_sequential_kernels();
    match cli.command {
        Command::Sweep {
            common,
            axis,
            values,
            trials,
            threads,
            timing,
        } => {
            let mut cfg = common.load()?;
            if axis.is_some() {
                cfg.sweep.axis = axis;
            }
            if !values.is_empty() {
                cfg.sweep.values = values.iter().map(|v| AxisValue::parse(v)).collect();
            }
            if let Some(t) = trials {
                cfg.sweep.trials = t;
            }
            let (files, records) = write_sweep(&cfg, RunOptions { threads, timing }, &common.out)?;
            let failed = records
                .iter()
                .filter(|r| r.warn_flags.split(';').any(|w| w == "trial_failed"))
                .count();
            println!("{} trials ({failed} failed)", records.len());
            println!("{}", files.raw.display());
            println!("{}", files.aggregate.display());
        }
        Command::Trial { common, trial } => {
            let cfg = common.load()?;
            let d = run_trial_detailed(&cfg, "base", 0, trial)?;
            let dir = &common.out;
            create_dir(dir)?;
            write_json(&dir.join("scene.json"), &d.scene)?;
            write_json(&dir.join("pilots.json"), &d.pilots)?;
            write_json(&dir.join("somp.json"), &d.somp)?;
            write_json(&dir.join("refined.json"), &d.refined)?;
            write_trace_csv(&dir.join("trace.csv"), &d.trace)?;
            let records = [d.record];
            write_raw_csv(&dir.join("trial_raw.csv"), &records)?;
            write_aggregate_csv(&dir.join("trial_aggregate.csv"), &aggregate(&records))?;
            println!("{}", serde_json::to_string_pretty(&records[0])?);
        }
        Command::Scene { common, trial } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let mut rng = trial_rng(cfg.sweep.seed, 0, trial);
            let (scene, pilots) = simulate_trial(&cfg, &mut rng)?;
            create_dir(&common.out)?;
            write_json(&common.out.join("scene.json"), &scene)?;
            write_json(&common.out.join("pilots.json"), &pilots)?;
        }
        Command::Estimate { common, pilots } => {
            let cfg = common.load()?;
            let text = std::fs::read_to_string(&pilots).with_context(|| format!("reading {}", pilots.display()))?;
            let rec: PilotRecord = serde_json::from_str(&text).context("parsing pilot record")?;
            rec.validate()?;
            if rec.system != cfg.system {
                bail!("pilot record was generated with different system parameters than the configuration");
            }
            let est = estimate(&cfg, &rec)?;
            create_dir(&common.out)?;
            write_json(&common.out.join("somp.json"), &est.somp)?;
            write_json(&common.out.join("refined.json"), &est.refined)?;
            write_trace_csv(&common.out.join("trace.csv"), &est.trace)?;
            if !est.warnings.is_empty() {
                eprintln!("warnings: {}", est.warnings);
            }
        }
        Command::Config => {
            print!("{}", toml::to_string_pretty(&ExperimentConfig::default())?);
        }
    }
    Ok(())
}
