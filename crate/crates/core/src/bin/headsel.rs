use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headsel::experiment::{self, ExperimentConfig};
use headsel::Result;

#[derive(Parser)]
#[command(name = "headsel", version, about = "Attention head selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds for sweeps and ablations.
    #[arg(long)]
    seeds: Option<String>,
    /// shared, subset, group or adapter.
    #[arg(long)]
    strategy: Option<String>,
    /// Candidate heads per layer (H'); a comma list for sweep-hprime.
    #[arg(long)]
    hprime: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// interference or zero_shot.
    #[arg(long)]
    suite: Option<String>,
    /// KL weight.
    #[arg(long)]
    beta: Option<f64>,
    /// `fixed:T` or `linear:FROM:TO:FRACTION`.
    #[arg(long)]
    tau_schedule: Option<String>,
    /// Any other config key, e.g. `--set d_model=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a results directory.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train subset or group models over a list of H' values and seeds.
    SweepHprime(Common),
    /// Selection in encoder+decoder vs encoder only vs decoder only.
    AblationEncdec(Common),
    /// Sharing matrices, head load and balance for run directories.
    Analyze {
        dirs: Vec<PathBuf>,
        /// Also write combined long-format tables here.
        #[arg(long)]
        combined: Option<PathBuf>,
    },
    /// Write generated datasets as TSV.
    DumpData(Common),
}

impl Common {
    fn resolve(&self, sweep: bool) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut set = |k: &str, v: String| c.set(k, &v);
        if let Some(v) = &self.suite {
            set("suite", v.clone())?;
        }
        if let Some(v) = &self.strategy {
            set("strategy", v.clone())?;
        }
        if let Some(v) = self.seed {
            set("seed", v.to_string())?;
        }
        if let Some(v) = &self.seeds {
            set("seeds", v.clone())?;
        }
        if let Some(v) = &self.hprime {
            set(if sweep { "hprimes" } else { "hprime" }, v.clone())?;
        }
        if let Some(v) = &self.out {
            set("out", v.display().to_string())?;
        }
        if let Some(v) = self.beta {
            set("beta", v.to_string())?;
        }
        if let Some(v) = &self.tau_schedule {
            set("tau_schedule", v.clone())?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| headsel::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            set(k.trim(), v.trim().to_string())?;
        }
        Ok(c)
    }
}

fn print_metrics(rows: &[headsel::analysis::TaskMetrics]) {
    print!("{}", headsel::analysis::metrics_csv(rows));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let out = experiment::cmd_train(&common.resolve(false)?)?;
            print_metrics(&out.metrics);
            eprintln!("results in {}", out.dir.display());
        }
        Command::Eval { common, checkpoint } => {
            print_metrics(&experiment::cmd_eval(&common.resolve(false)?, &checkpoint)?);
        }
        Command::SweepHprime(common) => {
            let rows = experiment::cmd_sweep_hprime(&common.resolve(true)?)?;
            print!("{}", experiment::sweep_csv(&rows));
        }
        Command::AblationEncdec(common) => {
            for r in experiment::cmd_ablation_encdec(&common.resolve(false)?)? {
                println!(
                    "{}\tseed {}\tacc {:.4}\tedit {:.4}",
                    r.variant, r.seed, r.sequence_accuracy, r.edit_error
                );
            }
        }
        Command::Analyze { dirs, combined } => {
            let mut failed = 0;
            for (dir, res) in dirs.iter().zip(experiment::cmd_analyze(&dirs, combined.as_deref())?) {
                match res {
                    Ok(a) => println!("{}\tbalance {:?}", dir.display(), a.balance),
                    Err(e) => {
                        failed += 1;
                        eprintln!("{}: {e}", dir.display());
                    }
                }
            }
            if failed > 0 {
                return Err(headsel::Error::Input(format!(
                    "{failed} of {} directories failed",
                    dirs.len()
                )));
            }
        }
        Command::DumpData(common) => {
            for p in experiment::cmd_dump_data(&common.resolve(false)?)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
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
