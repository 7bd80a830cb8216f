use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use autolr::autolr::AutoLrConfig;
use autolr::harness::experiment::{
    compare_schedulers, run_experiment, run_pretrain, run_prune, write_charts,
};
use autolr::harness::trace::{read_trace_csv, validate_trace};
use autolr::harness::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "autolr",
    version,
    about = "Depth pruning and per-block LR tuning for transfer learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full network on the source task and write `pretrained.alrs`.
    Pretrain(Common),
    /// Pretrain, then select the depth by pruning top blocks.
    Prune(Common),
    /// Full pipeline: pretrain, optional pruning, fine-tune under the configured policy.
    Finetune(Common),
    /// Fine-tune the same start under every baseline schedule and AutoLR.
    CompareSchedulers(Common),
    /// Rebuild charts and a summary from an existing `trace.csv`.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Uses the built-in reference config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Omit wall-clock fields so repeated runs write identical files.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?
            }
            None => ExperimentConfig::reference(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        cfg.run.deterministic |= self.deterministic;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        match (&cfg.run.out_dir, self.out.as_path() == Path::new("out")) {
            (Some(dir), true) => dir.clone(),
            _ => self.out.clone(),
        }
    }
}

fn report(common: &Common) -> Result<()> {
    let out = &common.out;
    let tau = match &common.config {
        Some(_) => common.load()?.autolr.unwrap_or_default().tau_s,
        None => AutoLrConfig::default().tau_s,
    };
    let path = out.join("trace.csv");
    let rows = read_trace_csv(&path).with_context(|| format!("reading {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    validate_trace(&rows, tau)?;
    write_charts(&rows, out, "")?;

    let mut epochs: Vec<(usize, usize, bool)> = Vec::new();
    for r in &rows {
        match epochs.last_mut() {
            Some(e) if e.0 == r.epoch => {
                e.1 = e.1.max(r.trial);
                e.2 |= r.accepted;
            }
            _ => epochs.push((r.epoch, r.trial, r.accepted)),
        }
    }
    let accepted = epochs.iter().filter(|e| e.2).count();
    let summary = serde_json::json!({
        "epochs": epochs.len(),
        "accepted_epochs": accepted,
        "accepted_fraction": accepted as f64 / epochs.len() as f64,
        "trials_per_epoch": epochs.iter().map(|e| e.1).collect::<Vec<_>>(),
        "rows": rows.len(),
    });
    let path = out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Pretrain(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            let s = run_pretrain(&cfg, &out)?;
            info!(
                "source test accuracy {:.4}; snapshot {}",
                s.source_test_accuracy, s.snapshot_hash
            );
        }
        Command::Prune(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            let r = run_prune(&cfg, &out)?;
            info!(
                "selected depth {} ({} blocks removed), score {:.4}",
                r.selected_depth, r.selected_blocks_removed, r.best_score
            );
        }
        Command::Finetune(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            let s = run_experiment(&cfg, &out)?;
            info!(
                "final test accuracy {:.4}, recall@1 {:.4}, accepted epochs {:.2}",
                s.finetune.final_test_accuracy, s.finetune.final_recall_at_1, s.accepted_fraction
            );
            for w in &s.warnings {
                log::warn!("{w}");
            }
        }
        Command::CompareSchedulers(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            let s = compare_schedulers(&cfg, &out)?;
            for r in &s.rows {
                println!(
                    "{:<11} acc {:.4}  recall@1 {:.4}",
                    r.policy, r.final_test_accuracy, r.final_recall_at_1
                );
            }
        }
        Command::Report(c) => report(c)?,
    }
    Ok(())
}
