use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use memfuse::runner::{
    load_fusion_config, rebalance_with, run_fusion, run_hgbt, BundleDir, MetricReport, ModelKind, Pipeline,
    RunDescriptor, RunnerError,
};
use memfuse::{audit_leakage, run_experiment, ExperimentConfig};
use memfuse_core::corpus::{generate_synthetic, load_dataset, summarize_dataset, write_dataset, SyntheticSpec, Target};
use memfuse_core::features::{write_bundles, FeatureConfig, FoldContext, Providers};
use memfuse_core::hgbt::{FeatureSet, SearchSpace, TunerConfig};
use memfuse_core::splits::{nested_split, NestedSplits, SplitParams};
use memfuse_fusion::{FusionConfig, PromptKind, TrainMode};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "memfuse", version, about = "Commercial memorability prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a planted signal.
    Synth {
        /// TOML or JSON synthetic spec; a balanced default is used when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        channels: usize,
        #[arg(long, default_value_t = 340)]
        total: usize,
    },
    /// Print corpus statistics and target quantile edges.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        bins: usize,
    },
    /// Rebalance channels and write nested grouped splits.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: Target,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        max_fraction: f64,
        #[arg(long, default_value_t = 64)]
        embedding_dim: usize,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Assemble feature bundles for one fold context, or all of them.
    Features {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, default_value_t = 0)]
        outer: usize,
        /// Inner split; omit for the full outer training set.
        #[arg(long)]
        inner: Option<usize>,
        /// Write every outer and inner context.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        embedding_dim: usize,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Tune and evaluate the gradient-boosted baseline on stored bundles.
    TrainHgbt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        target: Option<Target>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        pca_components: usize,
        /// Comma-separated streams: text, numeric, visual, summary, rationale.
        #[arg(long, default_value = "text,numeric,visual,summary")]
        streams: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate the fusion model on stored bundles.
    TrainFusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        target: Option<Target>,
        #[arg(long)]
        prompt: Option<PromptKind>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        /// Flat TOML fusion config; the tiny preset is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for per-fold checkpoints.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a full experiment from a TOML config and write report.json / report.md.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    match s {
        "frozen" => Ok(TrainMode::Frozen),
        "lora" => Ok(TrainMode::Lora),
        other => Err(format!("unknown mode '{other}' (expected frozen or lora)")),
    }
}

fn parse_streams(s: &str) -> Result<FeatureSet> {
    let mut set = FeatureSet {
        text: false,
        numeric: false,
        visual: false,
        summary: false,
        rationale: false,
    };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "text" => set.text = true,
            "numeric" => set.numeric = true,
            "visual" => set.visual = true,
            "summary" => set.summary = true,
            "rationale" => set.rationale = true,
            other => bail!("unknown stream '{other}'"),
        }
    }
    Ok(set)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn providers(dim: usize, cache: Option<&Path>) -> Result<Providers> {
    Ok(match cache {
        Some(dir) => Providers::mock_cached(dir, dim)?,
        None => Providers::mock(dim),
    })
}

fn load_splits(path: &Path, target: Option<Target>) -> Result<NestedSplits> {
    let splits = NestedSplits::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(t) = target {
        if t != splits.target {
            bail!(
                "splits were built for target {}, not {}",
                splits.target.as_str(),
                t.as_str()
            );
        }
    }
    let violations = audit_leakage(&splits, &splits.groups);
    if !violations.is_empty() {
        return Err(RunnerError::LeakageDetected(violations).into());
    }
    Ok(splits)
}

fn load_synth_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    })
}

#[derive(Serialize)]
struct FusionFoldSummary {
    outer: usize,
    best_epoch: usize,
    best_valid_srcc: f64,
    history: Vec<memfuse_fusion::train::EpochRecord>,
    test_srcc: f64,
    test_rmse: f64,
}

#[derive(Serialize)]
struct FusionReport {
    metrics: MetricReport,
    config: FusionConfig,
    folds: Vec<FusionFoldSummary>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            spec,
            out,
            seed,
            channels,
            total,
        } => {
            let spec = match spec {
                Some(p) => load_synth_spec(&p)?,
                None => SyntheticSpec::balanced(seed, channels, total),
            };
            let ds = generate_synthetic(&spec)?;
            write_dataset(&ds, &out)?;
            println!("wrote {} records to {}", ds.len(), out.display());
        }
        Command::Stats { data, bins } => {
            let ds = load_dataset(&data)?;
            println!("{}", serde_json::to_string_pretty(&summarize_dataset(&ds, bins)?)?);
        }
        Command::Split {
            data,
            target,
            seed,
            out,
            max_fraction,
            embedding_dim,
            cache,
        } => {
            let ds = load_dataset(&data)?;
            let p = providers(embedding_dim, cache.as_deref())?;
            let groups = rebalance_with(&ds, &p, max_fraction)?;
            let params = SplitParams {
                seed,
                ..SplitParams::default()
            };
            let splits = nested_split(&ds, &groups, target, params)?;
            let violations = audit_leakage(&splits, &groups);
            if !violations.is_empty() {
                return Err(RunnerError::LeakageDetected(violations).into());
            }
            splits.save(&out)?;
            let n_groups = groups.values().collect::<std::collections::BTreeSet<_>>().len();
            println!(
                "wrote {} outer folds over {n_groups} groups to {}",
                splits.outer_folds.len(),
                out.display()
            );
        }
        Command::Features {
            data,
            splits,
            outer,
            inner,
            all,
            out,
            embedding_dim,
            cache,
        } => {
            let ds = load_dataset(&data)?;
            let splits = load_splits(&splits, None)?;
            let mut pipe = Pipeline::new(
                &ds,
                providers(embedding_dim, cache.as_deref())?,
                FeatureConfig::default(),
            )?;
            let contexts: Vec<FoldContext> = if all {
                (0..splits.outer_folds.len())
                    .flat_map(|o| {
                        let n = splits.outer_folds[o].inner_splits.len();
                        std::iter::once(FoldContext { outer: o, inner: None }).chain((0..n).map(move |i| FoldContext {
                            outer: o,
                            inner: Some(i),
                        }))
                    })
                    .collect()
            } else {
                vec![FoldContext { outer, inner }]
            };
            std::fs::create_dir_all(&out)?;
            for ctx in contexts {
                let set = pipe.bundle_set(&splits, ctx)?;
                let path = BundleDir::path_for(&out, ctx);
                write_bundles(&path, &set.bundles)?;
                println!("wrote {}", path.display());
            }
        }
        Command::TrainHgbt {
            data,
            bundles,
            splits,
            target,
            trials,
            seed,
            pca_components,
            streams,
            report,
        } => {
            let ds = load_dataset(&data)?;
            let splits = load_splits(&splits, target)?;
            let set = parse_streams(&streams)?;
            let tuner = TunerConfig {
                n_trials: trials,
                seed,
                space: SearchSpace::default(),
            };
            let mut source = BundleDir::new(bundles);
            let scores = run_hgbt(&ds, &mut source, &splits, set, pca_components, &tuner)?;
            let descriptor = RunDescriptor {
                target: splits.target,
                model: ModelKind::Hgbt,
                features: set.describe(),
                prompt: None,
                pooling: None,
                label: format!("HGBT ({})", set.describe()),
            };
            let metrics = metric_report(descriptor, &scores);
            println!("CV SRCC {:.4}, CV RMSE {:.4}", metrics.cv_srcc, metrics.cv_rmse);
            write_json(&report, &metrics)?;
        }
        Command::TrainFusion {
            data,
            bundles,
            splits,
            target,
            prompt,
            mode,
            config,
            checkpoints,
            report,
        } => {
            let ds = load_dataset(&data)?;
            let splits = load_splits(&splits, target)?;
            let mut cfg = match config {
                Some(p) => load_fusion_config(&p)?,
                None => FusionConfig::tiny(),
            };
            if let Some(p) = prompt {
                cfg.prompt = p;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cfg.validate()?;
            let mut source = BundleDir::new(bundles);
            let (scores, run) = run_fusion(&ds, &mut source, &splits, &cfg)?;
            if let Some(dir) = checkpoints {
                std::fs::create_dir_all(&dir)?;
                for (o, m) in run.models.iter().enumerate() {
                    m.save_checkpoint(dir.join(format!("outer{o}.ckpt")))?;
                }
            }
            let run_cfg = memfuse::runner::RunConfig {
                target: splits.target,
                model: ModelKind::Fusion,
                features: FeatureSet::default(),
                prompt: Some(cfg.prompt),
                pooling: Some(cfg.pooling),
                trials: 0,
                tuner_seed: 0,
                pca_components: 0,
                fusion: Some(cfg.clone()),
                fusion_config: None,
            };
            let metrics = metric_report(run_cfg.descriptor()?, &scores);
            println!("CV SRCC {:.4}, CV RMSE {:.4}", metrics.cv_srcc, metrics.cv_rmse);
            let folds = run
                .folds
                .iter()
                .map(|f| FusionFoldSummary {
                    outer: f.outer,
                    best_epoch: f.outcome.best_epoch,
                    best_valid_srcc: f.outcome.best_valid_srcc,
                    history: f.outcome.history.clone(),
                    test_srcc: f.srcc,
                    test_rmse: f.rmse,
                })
                .collect();
            write_json(
                &report,
                &FusionReport {
                    metrics,
                    config: cfg,
                    folds,
                },
            )?;
        }
        Command::Report { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            report.write(&out)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn metric_report(descriptor: RunDescriptor, scores: &[memfuse::runner::FoldScore]) -> MetricReport {
    let degenerate = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.degenerate)
        .map(|(i, _)| i)
        .collect();
    MetricReport::from_folds(
        descriptor,
        scores.iter().map(|s| s.srcc).collect(),
        scores.iter().map(|s| s.rmse).collect(),
        degenerate,
    )
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(RunnerError::LeakageDetected(v)) = e.downcast_ref::<RunnerError>() {
                for violation in v {
                    eprintln!("  {}", violation.detail);
                }
                return ExitCode::from(2);
            }
            ExitCode::FAILURE
        }
    }
}
