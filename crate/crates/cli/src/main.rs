//! `layershift`: train, calibrate and evaluate the layer-shift adversarial
//! example detector.
//!
//! Exit codes: 0 success, 1 internal failure, 2 user/config error.

use clap::{Args, Parser, Subcommand};
use layershift_core::attacks::AttackKind;
use layershift_core::config::{Profile, RunConfig};
use layershift_core::error::Error;
use layershift_core::eval::{SweepKey, SweepSpec};
use layershift_core::fusion::Measure;
use layershift_core::pipeline;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "layershift",
    about = "Layer-wise adversarial example detection: recovery testing, logit probing, fused scoring",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run-config JSON; omit to use the built-in profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile when no config file is given.
    #[arg(long, default_value = "ci")]
    profile: String,
    /// Run seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => {
                let profile = Profile::parse(&self.profile)?;
                let out = self
                    .out
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(format!("runs/{}", profile.name())));
                RunConfig::default_for(profile, self.seed.unwrap_or(0), &out)
            }
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier and every detector component, fit score CDFs
    /// and thresholds, and persist the artifacts.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate adversarial batches against the calibrated model.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated subset of attacks (fgsm,pgd,cw,adaptive);
        /// default: everything configured.
        #[arg(long)]
        attack: Option<String>,
    },
    /// Score adversarial batches and emit the evaluation report + figures.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Explicit adversarial batch files (defaults to the run's attacks
        /// directory; accepts externally generated batches).
        #[arg(long)]
        adv: Vec<PathBuf>,
        /// Print only this measure's rows (rt, lt, rlt).
        #[arg(long)]
        measure: Option<String>,
        /// Print only robust-accuracy rows at this false-positive rate.
        #[arg(long)]
        fpr: Option<f64>,
    },
    /// Layer-shift profile comparison between benign and attacked inputs.
    ValidateAssumption {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        adv: Vec<PathBuf>,
    },
    /// Sweep one knob (depth, hidden_dim, g, k, epsilon, term_removal)
    /// across a value grid.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// The swept knob.
        #[arg(long)]
        sweep: String,
        /// Comma-separated values, e.g. "2,3,4,5" or "0.01,0.02".
        #[arg(long)]
        values: String,
    },
}

fn parse_attacks(s: &str) -> anyhow::Result<Vec<AttackKind>> {
    s.split(',')
        .map(|tok| match tok.trim() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "cw" => Ok(AttackKind::Cw),
            "adaptive" => Ok(AttackKind::Adaptive),
            other => Err(Error::Config(format!("unknown attack {other:?}")).into()),
        })
        .collect()
}

fn parse_measure(s: &str) -> anyhow::Result<Measure> {
    match s {
        "rt" => Ok(Measure::Rt),
        "lt" => Ok(Measure::Lt),
        "rlt" => Ok(Measure::Rlt),
        other => Err(Error::Config(format!("unknown measure {other:?}")).into()),
    }
}

fn parse_sweep_values(key: SweepKey, raw: &str) -> anyhow::Result<Vec<serde_json::Value>> {
    raw.split(',')
        .map(|tok| {
            let tok = tok.trim();
            Ok(match key {
                SweepKey::Epsilon => serde_json::json!(tok.parse::<f64>().map_err(|_| {
                    Error::Config(format!("sweep value {tok:?} is not a number"))
                })?),
                SweepKey::TermRemoval => serde_json::json!(tok),
                _ => serde_json::json!(tok.parse::<u64>().map_err(|_| {
                    Error::Config(format!("sweep value {tok:?} is not an integer"))
                })?),
            })
        })
        .collect()
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Calibrate { common } => {
            let cfg = common.resolve()?;
            let (_, summary, manifest) = pipeline::cmd_calibrate(&cfg)?;
            println!("calibrated ({} profile, seed {})", summary.profile, summary.seed);
            println!("  clean test accuracy      {:.4}", summary.clean_accuracy);
            println!(
                "  recovery holdout loss    {:.6} -> {:.6}",
                summary.recovery_init_holdout_loss, summary.recovery_final_holdout_loss
            );
            println!(
                "  augment holdout LT       {:.4} -> {:.4}",
                summary.augment_init_holdout_lt, summary.augment_final_holdout_lt
            );
            println!(
                "  benign RT mean/sd        {:.4} / {:.4}",
                summary.benign_rt.mean, summary.benign_rt.sd
            );
            println!(
                "  benign LT mean/sd        {:.4} / {:.4}",
                summary.benign_lt.mean, summary.benign_lt.sd
            );
            println!(
                "  held-out benign E[RLT]   {:.4} (n = {})",
                summary.heldout_benign_rlt_mean, summary.heldout_benign_n
            );
            println!("  model fingerprint        {}", summary.model_fingerprint);
            println!("  manifest hash            {}", manifest.combined_hash()?);
        }
        Command::Attack { common, attack } => {
            let cfg = common.resolve()?;
            let kinds = attack.as_deref().map(parse_attacks).transpose()?;
            let outputs = pipeline::cmd_attack(&cfg, kinds.as_deref())?;
            for (kind, path) in outputs {
                println!("{}: {}", kind.name(), path.display());
            }
        }
        Command::Evaluate {
            common,
            adv,
            measure,
            fpr,
        } => {
            let cfg = common.resolve()?;
            let paths = if adv.is_empty() { None } else { Some(adv.as_slice()) };
            let report = pipeline::cmd_evaluate(&cfg, paths)?;
            let measure_filter = measure.as_deref().map(parse_measure).transpose()?;
            println!(
                "evaluated {} attack(s); clean accuracy {:.4}, benign E[RLT] {:.3}",
                report.attack_stats.len(),
                report.clean_accuracy,
                report.benign_rlt_mean
            );
            println!("AUC:");
            for e in &report.auc {
                if measure_filter.map_or(true, |m| m == e.measure) {
                    println!(
                        "  {:10} {:4}  {:.4}  (n_adv = {})",
                        e.attack,
                        e.measure.name(),
                        e.auc,
                        e.n_adversarial
                    );
                }
            }
            println!("robust accuracy:");
            for e in &report.robust_accuracy {
                if measure_filter.map_or(true, |m| m == e.measure)
                    && fpr.map_or(true, |f| (f - e.fpr).abs() < 1e-12)
                {
                    println!(
                        "  {:10} {:4} @fpr{:<5} RA {:.4} (flagged {:.3}, correct {:.3})",
                        e.attack,
                        e.measure.name(),
                        e.fpr,
                        e.ra,
                        e.flagged_fraction,
                        e.correct_fraction
                    );
                }
            }
        }
        Command::ValidateAssumption { common, adv } => {
            let cfg = common.resolve()?;
            let paths = if adv.is_empty() { None } else { Some(adv.as_slice()) };
            let report = pipeline::cmd_validate_assumption(&cfg, paths)?;
            println!("layer-shift flatness (max mean error mass):");
            for (pop, flat) in &report.flatness {
                println!("  {pop:12} {flat:.4}");
            }
            println!("LT vs RT AUC per attack:");
            for (attack, lt, rt) in &report.auc_comparison {
                println!("  {attack:12} LT {lt:.4}  RT {rt:.4}");
            }
        }
        Command::Ablate {
            common,
            sweep,
            values,
        } => {
            let cfg = common.resolve()?;
            let key = SweepKey::parse(&sweep)?;
            let spec = SweepSpec {
                key,
                values: parse_sweep_values(key, &values)?,
            };
            let report = pipeline::cmd_ablate(&cfg, &spec)?;
            println!("ablation over {sweep} ({} cells):", report.cells.len());
            for cell in &report.cells {
                let mean_rlt: Vec<f64> = cell
                    .auc
                    .iter()
                    .filter(|e| e.measure == Measure::Rlt)
                    .map(|e| e.auc)
                    .collect();
                let mean = mean_rlt.iter().sum::<f64>() / mean_rlt.len().max(1) as f64;
                println!("  {:16} mean RLT AUC {:.4}", cell.label, mean);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let user_error = err
                .downcast_ref::<Error>()
                .map(|e| e.is_user_error())
                .unwrap_or(false);
            if user_error {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
