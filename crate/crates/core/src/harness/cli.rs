use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::{apply_overrides, load_config};
use super::pipeline::{run_experiment, RunOptions, Stage, Summary, SUMMARY_FILE};
use crate::classifier::{load_classifier, predict};
use crate::data::synth::{synth_benchmark, SynthConfig};
use crate::data::{balance_report, load_manifest, load_samples, Split};
use crate::error::{Error, Result};
use crate::eval::{compare_regimes, curve_report, recall_at, write_curves, write_metrics_table, ScoredSet};

#[derive(Parser, Debug)]
#[command(name = "cyclebalance", version, about = "GAN complement balancing experiments")]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dotted override, e.g. `--set gan.epochs=30`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Skip completed stages and continue interrupted GAN training.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic blob benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional TOML file with synthetic benchmark settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Load the configured datasets and write manifests and balance reports.
    Ingest(ConfigArgs),
    /// Run the pipeline through GAN training.
    TrainGan(ConfigArgs),
    /// Run the pipeline through augmentation.
    Augment(ConfigArgs),
    /// Run the pipeline through classifier training.
    TrainClf(ConfigArgs),
    /// Score classifier checkpoints on one validation manifest and plot the
    /// comparison.
    Eval {
        /// Manifest whose validation split is scored (all rows if it has none).
        #[arg(long)]
        manifest: PathBuf,
        /// `regime=path/to/classifier.ckpt`. Repeatable.
        #[arg(long = "checkpoint", value_name = "REGIME=PATH", required = true)]
        checkpoints: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full experiment.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        /// Stop after this stage: ingest, gan, augment, classifier or eval.
        #[arg(long)]
        until: Option<String>,
    },
    /// Print the summary of a finished experiment directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command. Exit codes: 0 on
/// success, 1 on usage or configuration errors, 2 on runtime failures.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run_until(args: &ConfigArgs, until: Option<Stage>, quiet: bool) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let opts = RunOptions {
        resume: args.resume,
        until,
        quiet,
    };
    let summary = run_experiment(&cfg, &opts)?;
    if !quiet {
        print_summary(&summary);
        println!("experiment directory: {}", cfg.output_dir.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Synth {
            out,
            seed,
            config,
            overrides,
        } => {
            let base = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            let cfg = apply_overrides(&base, &overrides)?;
            let o = synth_benchmark(&cfg, seed, &out)?;
            let report = balance_report(&o.manifest);
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Ingest(a) => run_until(&a, Some(Stage::Ingest), quiet),
        Command::TrainGan(a) => run_until(&a, Some(Stage::Gan), quiet),
        Command::Augment(a) => run_until(&a, Some(Stage::Augment), quiet),
        Command::TrainClf(a) => run_until(&a, Some(Stage::Classifier), quiet),
        Command::Run { args, until } => {
            let until = until
                .map(|u| Stage::parse(&u).ok_or_else(|| Error::Config(format!("unknown stage {u:?} for --until"))))
                .transpose()?;
            run_until(&args, until, quiet)
        }
        Command::Eval {
            manifest,
            checkpoints,
            out,
        } => eval_checkpoints(&manifest, &checkpoints, &out, quiet),
        Command::Report { dir } => {
            let p = dir.join(SUMMARY_FILE);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let summary: Summary = serde_json::from_str(&text)?;
            print_summary(&summary);
            for sub in ["plots/curves.svg", "plots/curves.png", "metrics/metrics.csv"] {
                if dir.join(sub).exists() {
                    println!("{}", dir.join(sub).display());
                }
            }
            Ok(())
        }
    }
}

fn print_summary(s: &Summary) {
    println!("status: {}", s.status);
    if let Some(f) = &s.failure {
        println!("failed stage: {} ({})", f.stage, f.message);
    }
    if let Some(d) = &s.data {
        println!(
            "train counts {:?} ratio {}, validation counts {:?}",
            d.train,
            d.train_ratio.map_or("inf".into(), |r| format!("{r:.2}")),
            d.validation
        );
    }
    for (name, g) in &s.gans {
        println!(
            "{name}: {} epochs, probe cycle {:.4} -> {:.4}",
            g.epochs, g.initial_probe_cycle, g.final_probe_cycle
        );
    }
    if !s.regimes.is_empty() {
        println!("{:<16} {:>10} {:>8} {:>8} {:>8}", "regime", "train", "roc_auc", "pr_auc", "recall");
    }
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for (name, r) in &s.regimes {
        println!(
            "{:<16} {:>10} {:>8} {:>8} {:>8}",
            name,
            format!("{}/{}", r.train_counts[0], r.train_counts[1]),
            opt(r.roc_auc),
            opt(r.pr_auc),
            opt(r.minority_recall)
        );
    }
    if let Some(c) = &s.cam {
        println!(
            "cam ({}): argmax inside blob for {}/{} positives",
            c.regime, c.inside, c.positives
        );
    }
}

fn eval_checkpoints(manifest: &Path, checkpoints: &[String], out: &Path, quiet: bool) -> Result<()> {
    let m = load_manifest(manifest)?;
    let val = m.filter_split(Split::Validation);
    let val = if val.n() > 0 { val } else { m };
    let mut scored = Vec::new();
    for spec in checkpoints {
        let (regime, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--checkpoint {spec:?} is not REGIME=PATH")))?;
        let (model, _) = load_classifier::<f32>(Path::new(path))?;
        let samples = load_samples::<f32>(&val, None, model.config.resolution, model.config.channels)?;
        let probs = predict(&model, &samples, 32)?;
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let ids = samples.iter().map(|s| s.id.clone()).collect();
        let recall = recall_at(&probs, &labels, 0.5)?;
        let set = ScoredSet::new(regime, ids, probs, labels)?;
        let rep = curve_report(&set)?;
        if !quiet {
            println!(
                "{regime}: roc_auc={:.4} pr_auc={:.4} recall@0.5={recall:.3}",
                rep.roc_auc, rep.pr_auc
            );
        }
        scored.push((set, rep));
    }
    if scored.len() >= 2 {
        let art = compare_regimes(&scored, &out.join("metrics"), &out.join("plots"))?;
        if !quiet {
            for f in art.files {
                println!("{}", f.display());
            }
        }
    } else {
        write_metrics_table(&scored, &out.join("metrics"))?;
        write_curves(&scored, &out.join("metrics"))?;
    }
    Ok(())
}
