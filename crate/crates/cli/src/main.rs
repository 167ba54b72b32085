use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use maskadapt::config::RunConfig;
use maskadapt::models::ModelKind;
use maskadapt_cli as run;

#[derive(Parser)]
#[command(name = "maskadapt", version, about = "Feature-mask training and state-aware feature weighting for CTR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set mask.k=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out={}", toml_string(&out.display().to_string())));
        }
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, train_log and resolved_config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train once per `trainer.lr_grid` entry and keep the best on validation.
        #[arg(long)]
        tune: bool,
    },
    /// Score a split with a checkpoint and write a report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file (default: <out>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report of a baseline run; adds RelaImpr lines.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Write adaptive-weight heatmaps and state-bucketed metrics.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of the training loss under all four ablations.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check every base model instead of `model.kind`.
        #[arg(long)]
        all_models: bool,
        /// Scale analytic gradients by this factor before comparing.
        #[arg(long, hide = true, default_value_t = 1.0)]
        corrupt_gradient: f64,
    },
    /// Write a synthetic dataset as columnar text.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
}

fn checkpoint_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join(run::CHECKPOINT))
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Train { common, tune } => {
            let (cfg, out) = common.resolve()?;
            let data = run::prepare(&cfg)?;
            let trained = if tune {
                let (best, scores) = run::tune_model(&cfg, &data)?;
                for (lr, auc) in scores {
                    println!("lr {lr:<8} val AUC {}", maskadapt::metrics::fmt_metric(auc));
                }
                best
            } else {
                run::train_model(&cfg, &data)?
            };
            let mut resolved = cfg.clone();
            resolved.trainer.lr = trained.lr;
            run::write_train_artifacts(&out, &resolved, &trained)?;
            println!(
                "trained {} ({}), best epoch {}, val AUC {}; artifacts in {}",
                cfg.model.kind.name(),
                cfg.effective_ablation().name(),
                trained.fit.best_epoch,
                maskadapt::metrics::fmt_metric(trained.fit.best_val_auc),
                out.display()
            );
            Ok(true)
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            baseline,
        } => {
            let (cfg, out) = common.resolve()?;
            let split = run::parse_split(&split)?;
            let data = run::prepare(&cfg)?;
            let loaded = run::load_checkpoint(&checkpoint_path(&checkpoint, &out), &data)?;
            let mut report = run::evaluate(&cfg, &data, &loaded.net, &loaded.store, split)?;
            if let Some(b) = baseline {
                run::attach_baseline(&mut report, &b)?;
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            report.save(&out.join(run::REPORT))?;
            run::write_resolved_config(&out, &cfg)?;
            print!("{}", report.render());
            Ok(true)
        }
        Command::Analyze { common, checkpoint, split } => {
            let (cfg, out) = common.resolve()?;
            let split = run::parse_split(&split)?;
            let data = run::prepare(&cfg)?;
            let loaded = run::load_checkpoint(&checkpoint_path(&checkpoint, &out), &data)?;
            let analysis = run::analyze(&cfg, &data, &loaded.net, &loaded.store, split)?;
            run::write_analysis(&out, &analysis)?;
            run::write_resolved_config(&out, &cfg)?;
            println!("user-state weights\n{}", analysis.user.to_csv());
            println!("item-state weights\n{}", analysis.item.to_csv());
            print!("{}", analysis.report.render());
            Ok(true)
        }
        Command::Gradcheck {
            common,
            all_models,
            corrupt_gradient,
        } => {
            let (cfg, _) = common.resolve()?;
            let models = if all_models {
                vec![ModelKind::Mlp, ModelKind::Fm, ModelKind::TwoTower]
            } else {
                vec![cfg.model.kind]
            };
            let rows = run::gradcheck(cfg.seed, &models, corrupt_gradient)?;
            for r in &rows {
                println!(
                    "{:<10} {:<13} max rel error {:.3e} over {} coords  {}",
                    r.model.name(),
                    r.ablation.name(),
                    r.max_rel_error,
                    r.coords,
                    if r.pass { "PASS" } else { "FAIL" }
                );
            }
            Ok(rows.iter().all(|r| r.pass))
        }
        Command::GenSynth { common } => {
            let (cfg, out) = common.resolve()?;
            run::gen_synth(&cfg, &out)?;
            println!("synthetic splits written to {}", out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
