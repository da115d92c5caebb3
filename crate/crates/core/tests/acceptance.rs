//! Acceptance suite. Runs every acceptance criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! `cargo test -p cyclebalance --test acceptance -- <filter>...` runs only
//! criteria whose name contains one of the filters. Set `ACCEPTANCE_DIR` to
//! keep the toy experiment directories.

mod common;

use std::cell::OnceCell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context as _, Result};
use cyclebalance::augment::{augment, save_augmented};
use cyclebalance::classifier::{bce_loss, load_classifier, save_classifier, train_classifier, ClassifierConfig, Stem};
use cyclebalance::data::synth::{synth_benchmark, ClassCounts, SynthConfig};
use cyclebalance::data::{balance_report, load_samples, Sample, Split};
use cyclebalance::eval::{pr_auc, roc_auc};
use cyclebalance::gan::{
    cycle_loss, load_gan_checkpoint, lsgan_losses, save_gan_checkpoint, train_gan, GanConfig, GanTrainState,
    GeneratorPair,
};
use cyclebalance::harness::{load_config, run_experiment, RunOptions, Stage, Summary, SUMMARY_FILE};
use cyclebalance::nn::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOY_SEEDS: [u64; 3] = [1, 2, 3];
const GAN_BUDGET_SECS: f64 = 15.0 * 60.0;
const END_TO_END_BUDGET_SECS: f64 = 30.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

struct ToyRun {
    summary: Summary,
    /// Wall-clock seconds per stage name, from the event log.
    stage_secs: Vec<(String, f64)>,
    total_secs: f64,
}

impl ToyRun {
    fn stage(&self, name: &str) -> f64 {
        self.stage_secs.iter().filter(|(n, _)| n == name).map(|(_, s)| s).sum()
    }
}

struct Suite {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    toy: OnceCell<Vec<ToyRun>>,
}

impl Suite {
    fn new() -> Result<Self> {
        let (root, tmp) = match std::env::var_os("ACCEPTANCE_DIR") {
            Some(d) => (PathBuf::from(d), None),
            None => {
                let t = tempfile::tempdir()?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            _tmp: tmp,
            toy: OnceCell::new(),
        })
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// The desk-scale experiment (configs/toy.toml, baseline and same-data
    /// augmentation) for every toy seed, run once and shared.
    fn toy(&self) -> Result<&[ToyRun]> {
        if self.toy.get().is_none() {
            let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
            let mut runs = Vec::new();
            for seed in TOY_SEEDS {
                let out = self.dir(&format!("toy-seed{seed}"));
                let cfg = load_config(
                    &config,
                    &[
                        format!("seed={seed}"),
                        format!("output_dir={:?}", out.display().to_string()),
                        "regimes=[\"baseline\",\"aug_same_data\"]".into(),
                    ],
                )?;
                eprintln!("  running toy experiment seed {seed} in {}", out.display());
                let t = Instant::now();
                let summary = run_experiment(
                    &cfg,
                    &RunOptions {
                        quiet: true,
                        ..RunOptions::default()
                    },
                )?;
                let total_secs = t.elapsed().as_secs_f64();
                let stage_secs = stage_durations(&out.join("events.log"))?;
                eprintln!("  seed {seed} finished in {total_secs:.0}s");
                runs.push(ToyRun {
                    summary,
                    stage_secs,
                    total_secs,
                });
            }
            let _ = self.toy.set(runs);
        }
        Ok(self.toy.get().expect("set above"))
    }
}

fn stage_durations(events: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(events)?;
    let mut open: Vec<(String, f64)> = Vec::new();
    let mut out = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let ts = v["ts"].as_f64().context("ts")?;
        let stage = v["stage"].as_str().unwrap_or_default().to_string();
        match v["event"].as_str() {
            Some("stage_start") => open.push((stage, ts)),
            Some("stage_done") => {
                if let Some(i) = open.iter().position(|(s, _)| *s == stage) {
                    let (_, start) = open.remove(i);
                    out.push((stage, ts - start));
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- criteria

fn exact_balance(_: &Suite) -> Result<Outcome> {
    let pair = GeneratorPair::<f32>::new(
        &GanConfig {
            ngf: 2,
            ndf: 2,
            res_blocks: 1,
            downsamplings: 1,
            disc_layers: 1,
            ..GanConfig::default()
        },
        1,
        8,
        1,
    )?;
    let mut parts = Vec::new();
    let mut pass = true;
    for (c0, c1) in [(90, 10), (9, 1), (10, 10), (1, 1), (7, 0), (0, 5), (3, 7), (30, 70)] {
        let train: Vec<Sample<f32>> = (0..c0 + c1)
            .map(|i| {
                let img = Tensor::from_fn(&[1, 8, 8], |k| ((k + 3 * i) as f32 * 0.37).sin() * 0.8);
                Sample::original(format!("s{i:03}"), img, u8::from(i >= c0), Split::Train)
            })
            .collect();
        let aug = augment(&train, &pair, 7)?;
        let n = c0 + c1;
        let counts = aug.class_counts();
        let ok = counts == [n, n];
        pass &= ok;
        parts.push(format!("{c0}:{c1}->{}:{}", counts[0], counts[1]));
    }
    // the persisted manifest reports ratio exactly 1
    let d = tempfile::tempdir()?;
    let src = synth_benchmark(
        &SynthConfig {
            size: 8,
            train: ClassCounts { class0: 9, class1: 1 },
            validation: ClassCounts { class0: 0, class1: 0 },
            blob_sigma: 1.0,
            ..SynthConfig::default()
        },
        1,
        &d.path().join("src"),
    )?;
    let train = load_samples::<f32>(&src.manifest, Some(Split::Train), 8, 1)?;
    let mut aug = augment(&train, &pair, 4)?;
    let written = save_augmented(&mut aug, &src.manifest, &d.path().join("aug"))?;
    let ratio = balance_report(&written).ratio(Split::Train);
    pass &= ratio == Some(1.0);
    parts.push(format!("saved manifest ratio {ratio:?}"));
    outcome(pass, parts.join(", "))
}

/// Pairwise Mann–Whitney count with ties credited one half.
fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Average precision by enumerating every distinct threshold: the precision
/// at each threshold weighted by the recall gained there.
fn exhaustive_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let (mut tp, mut k) = (0.0, 0.0);
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                k += 1.0;
                if *l == 1 {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / pos;
        ap += (recall - prev_recall) * (tp / k);
        prev_recall = recall;
    }
    ap
}

/// Random scored set of length 2..=200 with both classes present and heavy
/// ties (scores on a coarse grid).
fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    let grid = rng.random_range(1..=40) as f64;
    let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..=grid) as f64).round() / grid).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    labels[0] = 0;
    labels[1] = 1;
    labels.shuffle(rng);
    (scores, labels)
}

fn metric_oracle(_: &Suite) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_roc, mut worst_pr) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (s, l) = random_set(&mut rng);
        worst_roc = worst_roc.max((roc_auc(&s, &l)?.auc - mann_whitney(&s, &l)).abs());
        worst_pr = worst_pr.max((pr_auc(&s, &l)?.average_precision - exhaustive_ap(&s, &l)).abs());
    }
    outcome(
        worst_roc <= 1e-9 && worst_pr <= 1e-9,
        format!("1000 sets, max |roc - mann_whitney| {worst_roc:.1e}, max |pr - exhaustive| {worst_pr:.1e} (tol 1e-9)"),
    )
}

fn monotone_invariance(_: &Suite) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut worst_mono, mut worst_comp) = (0.0f64, 0.0f64);
    let mut integer_exact = true;
    for _ in 0..1000 {
        let (s, l) = random_set(&mut rng);
        let base = roc_auc(&s, &l)?;
        let cube: Vec<f64> = s.iter().map(|x| x * x * x).collect();
        let logistic: Vec<f64> = s.iter().map(|x| 1.0 / (1.0 + (-(5.0 * x - 2.5)).exp())).collect();
        for t in [cube, logistic] {
            worst_mono = worst_mono.max((roc_auc(&t, &l)?.auc - base.auc).abs());
        }
        let flipped: Vec<u8> = l.iter().map(|v| 1 - v).collect();
        let comp = roc_auc(&s, &flipped)?;
        integer_exact &= base.twice_u + comp.twice_u == 2 * (base.positives * base.negatives) as u128;
        worst_comp = worst_comp.max((base.auc + comp.auc - 1.0).abs());
    }
    outcome(
        worst_mono <= 1e-12 && integer_exact && worst_comp <= 1e-12,
        format!(
            "max AUC change under x^3 / logistic {worst_mono:.1e} (tol 1e-12); complement exact in pair counts: {integer_exact}, float deviation {worst_comp:.1e}"
        ),
    )
}

fn loss_identities(_: &Suite) -> Result<Outcome> {
    let ident = |x: &Tensor<f64>| x.clone();
    let x0 = Tensor::from_fn(&[3, 1, 6, 6], |i| (i as f64 * 0.3).sin());
    let x1 = Tensor::from_fn(&[2, 1, 6, 6], |i| (i as f64 * 0.7).cos());
    let cyc = cycle_loss(&ident, &ident, &x0, &x1)?;
    let bce = bce_loss(&[0.5, 0.5], &[0, 1])?;
    let half = Tensor::full(&[2, 1, 3, 3], 0.5f64);
    let (d, g) = lsgan_losses(&half, &half)?;
    let pass = cyc == 0.0 && (bce - std::f64::consts::LN_2).abs() <= 1e-9 && d == 0.5 && g == 0.25;
    outcome(
        pass,
        format!("cycle(identity) {cyc}, bce((.5,.5),(0,1)) - ln2 {:.1e}, lsgan(0.5) d {d} g {g}", bce - std::f64::consts::LN_2),
    )
}

fn gradient_checks(_: &Suite) -> Result<Outcome> {
    let (gp, gx) = common::grad::generator();
    let obj = common::grad::generator_objective();
    let disc = common::grad::discriminator();
    let (clf, probed) = common::grad::classifier();
    let worst = [gp, gx, obj, disc, clf].into_iter().fold(0.0, f64::max);
    outcome(
        worst < common::grad::TOL,
        format!(
            "max rel error: generator {gp:.1e} (input {gx:.1e}), generator objective {obj:.1e}, discriminator {disc:.1e}, classifier {clf:.1e} over {probed} coords (tol 1e-3)"
        ),
    )
}

fn toy_gan(s: &Suite) -> Result<Outcome> {
    let runs = s.toy()?;
    let mut pass = true;
    let mut parts = Vec::new();
    let mut secs = 0.0;
    for (seed, r) in TOY_SEEDS.iter().zip(runs) {
        let g = r.summary.gans.get("gan_same_data").context("gan_same_data missing")?;
        let ratio = g.final_probe_cycle / g.initial_probe_cycle;
        pass &= g.epochs == 30 && ratio < 0.5;
        secs += r.stage("gan_same_data");
        parts.push(format!(
            "seed {seed}: {:.4}->{:.4} (x{ratio:.3})",
            g.initial_probe_cycle, g.final_probe_cycle
        ));
    }
    pass &= secs <= GAN_BUDGET_SECS;
    parts.push(format!("GAN time {secs:.0}s (budget {GAN_BUDGET_SECS:.0}s)"));
    outcome(pass, parts.join(", "))
}

fn toy_end_to_end(s: &Suite) -> Result<Outcome> {
    let runs = s.toy()?;
    let get = |r: &ToyRun, regime: &str| -> Result<(f64, f64)> {
        let m = r.summary.regimes.get(regime).with_context(|| format!("{regime} missing"))?;
        Ok((m.roc_auc.context("roc_auc")?, m.minority_recall.context("recall")?))
    };
    let mut base = (Vec::new(), Vec::new());
    let mut aug = (Vec::new(), Vec::new());
    let mut ratios_ok = true;
    for r in runs {
        let (a, b) = get(r, "baseline")?;
        base.0.push(a);
        base.1.push(b);
        let (a, b) = get(r, "aug_same_data")?;
        aug.0.push(a);
        aug.1.push(b);
        ratios_ok &= r.summary.regimes["baseline"].balance_ratio == Some(9.0)
            && r.summary.regimes["aug_same_data"].balance_ratio == Some(1.0);
    }
    let secs: f64 = runs.iter().map(|r| r.total_secs).sum();
    let (mb, ma) = (median(base.0.clone()), median(aug.0.clone()));
    let (rb, ra) = (median(base.1.clone()), median(aug.1.clone()));
    outcome(
        ma >= mb && rb <= ra && ratios_ok && secs <= END_TO_END_BUDGET_SECS,
        format!(
            "median ROC AUC baseline {mb:.4} vs augmented {ma:.4} (per seed {:?} vs {:?}); median recall@0.5 baseline {rb:.3} vs augmented {ra:.3}; train ratios 9:1 -> 1:1 {ratios_ok}; total {secs:.0}s (budget {END_TO_END_BUDGET_SECS:.0}s)",
            base.0, aug.0
        ),
    )
}

fn cam_localization(s: &Suite) -> Result<Outcome> {
    let runs = s.toy()?;
    let (mut inside, mut positives) = (0, 0);
    let mut parts = Vec::new();
    for (seed, r) in TOY_SEEDS.iter().zip(runs) {
        let c = r.summary.cam.as_ref().context("cam summary missing")?;
        inside += c.inside;
        positives += c.positives;
        parts.push(format!("seed {seed} ({}): {}/{}", c.regime, c.inside, c.positives));
    }
    ensure!(positives > 0, "no validation positives");
    let frac = inside as f64 / positives as f64;
    outcome(
        frac >= 0.8,
        format!("argmax inside blob box {inside}/{positives} = {frac:.2} (need >= 0.80); {}", parts.join(", ")),
    )
}

fn determinism_and_persistence(s: &Suite) -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;

    let (a, b) = (s.dir("det-a"), s.dir("det-b"));
    let quiet = RunOptions {
        quiet: true,
        ..RunOptions::default()
    };
    run_experiment(&common::tiny_config(&a, &[]), &quiet)?;
    run_experiment(&common::tiny_config(&b, &[]), &quiet)?;
    let same = std::fs::read(a.join(SUMMARY_FILE))? == std::fs::read(b.join(SUMMARY_FILE))?;
    pass &= same;
    parts.push(format!("summary identical across runs: {same}"));

    // stop after GAN training, then resume the rest
    let c = s.dir("det-c");
    let cfg = common::tiny_config(&c, &[]);
    run_experiment(
        &cfg,
        &RunOptions {
            until: Some(Stage::Gan),
            quiet: true,
            ..RunOptions::default()
        },
    )?;
    run_experiment(
        &cfg,
        &RunOptions {
            resume: true,
            quiet: true,
            ..RunOptions::default()
        },
    )?;
    let resumed = std::fs::read(a.join(SUMMARY_FILE))? == std::fs::read(c.join(SUMMARY_FILE))?;
    pass &= resumed;
    parts.push(format!("staged resume summary identical: {resumed}"));

    // GAN: checkpoint round trip and resume from an epoch checkpoint
    let d = tempfile::tempdir()?;
    let synth = synth_benchmark(
        &SynthConfig {
            size: 16,
            train: ClassCounts { class0: 10, class1: 4 },
            validation: ClassCounts { class0: 4, class1: 4 },
            blob_sigma: 1.5,
            ..SynthConfig::default()
        },
        3,
        &d.path().join("data"),
    )?;
    let train = load_samples::<f32>(&synth.manifest, Some(Split::Train), 16, 1)?;
    let val = load_samples::<f32>(&synth.manifest, Some(Split::Validation), 16, 1)?;
    let gcfg = GanConfig {
        epochs: 3,
        ngf: 2,
        ndf: 2,
        res_blocks: 1,
        downsamplings: 1,
        disc_layers: 1,
        batch_size: 2,
        probe_size: 2,
        checkpoint_every: 1,
        ..GanConfig::default()
    };
    let ck = d.path().join("gan");
    let full = train_gan(&train, &gcfg, 5, Some(&ck), &mut |_| {})?;
    let p = d.path().join("roundtrip.ckpt");
    save_gan_checkpoint(&full, &p)?;
    let back: GanTrainState<f32> = load_gan_checkpoint(&p)?;
    let gan_exact = back.pair.max_abs_diff(&full.pair) == 0.0 && back.history == full.history;
    let mut resumed: GanTrainState<f32> = load_gan_checkpoint(&ck.join("gan_epoch0001.ckpt"))?;
    resumed.run(&train, None, &mut |_| {})?;
    let gan_resume = resumed.history == full.history && resumed.pair.max_abs_diff(&full.pair) == 0.0;
    pass &= gan_exact && gan_resume;
    parts.push(format!(
        "GAN checkpoint exact: {gan_exact}, GAN resume history identical ({} steps): {gan_resume}",
        full.history.len()
    ));

    // classifier: checkpoint round trip
    let ccfg = ClassifierConfig {
        epochs: 1,
        batch_size: 4,
        init_features: 4,
        growth_rate: 2,
        block_config: vec![1, 1],
        stem: Stem::Small,
        ..ClassifierConfig::default()
    };
    let out = train_classifier(&train, &val, &ccfg, 2, &mut |_| {})?;
    let p = d.path().join("clf.ckpt");
    save_classifier(&out.model, Some(&out.record), &p)?;
    let (m, rec) = load_classifier::<f32>(&p)?;
    let clf_exact = m.params.iter().zip(out.model.params.iter()).all(|(x, y)| x.name == y.name && x.value == y.value)
        && rec.as_ref() == Some(&out.record);
    pass &= clf_exact;
    parts.push(format!("classifier checkpoint exact: {clf_exact}"));
    outcome(pass, parts.join(", "))
}

type Criterion = fn(&Suite) -> Result<Outcome>;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Criterion); 9] = [
        ("exact_balance", exact_balance),
        ("metric_oracle_equivalence", metric_oracle),
        ("monotone_invariance", monotone_invariance),
        ("loss_identities", loss_identities),
        ("gradient_checks", gradient_checks),
        ("determinism_and_persistence", determinism_and_persistence),
        ("toy_gan_training", toy_gan),
        ("toy_end_to_end_effect", toy_end_to_end),
        ("cam_localization", cam_localization),
    ];
    let suite = match Suite::new() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("acceptance setup failed: {e:#}");
            std::process::exit(1);
        }
    };
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|flt| name.contains(flt.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let (pass, detail) = match f(&suite) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        println!(
            "{} {name} [{:.1}s]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(name);
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
