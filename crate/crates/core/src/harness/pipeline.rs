use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{content_hash, ExperimentConfig, Regime, SourceConfig};
use crate::augment::{augment, difference_image, load_augmented, save_augmented};
use crate::classifier::{load_classifier, predict, save_classifier, train_classifier, TrainRecord};
use crate::data::synth::{load_blobs, synth_benchmark, BLOBS_FILE};
use crate::data::{
    balance_report, ensure_parent, load_manifest, load_samples, sample_id, save_gray_png, save_manifest,
    DatasetManifest, Sample, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    cam_overlay, compare_regimes, compute_cam, curve_report, recall_at, write_curves, write_metrics_table,
    CurveReport, ScoredSet,
};
use crate::gan::{load_gan_checkpoint, save_gan_checkpoint, write_loss_csv, EpochRecord, GanConfig, GanTrainState};
use crate::seed;

pub const SUMMARY_FILE: &str = "summary.json";
pub const SCHEMA_VERSION: u32 = 1;
/// Threshold for the minority-class recall reported per regime.
pub const RECALL_THRESHOLD: f64 = 0.5;

/// Pipeline checkpoints that `--until` can stop after.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Gan,
    Augment,
    Classifier,
    Eval,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ingest" => Stage::Ingest,
            "gan" => Stage::Gan,
            "augment" => Stage::Augment,
            "classifier" => Stage::Classifier,
            "eval" => Stage::Eval,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Skip stages whose completion marker exists and continue interrupted GAN
    /// training from its latest epoch checkpoint.
    pub resume: bool,
    pub until: Option<Stage>,
    /// Suppress console progress (events.log is always written).
    pub quiet: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub key: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: [usize; 2],
    pub validation: [usize; 2],
    /// Majority/minority ratio; `null` when a class is absent.
    pub train_ratio: Option<f64>,
    pub validation_ratio: Option<f64>,
    /// sha256 over the validation ids and labels every regime is scored on.
    pub validation_digest: String,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanSummary {
    pub key: String,
    pub epochs: usize,
    pub initial_probe_cycle: f64,
    pub final_probe_cycle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub train_counts: [usize; 2],
    pub balance_ratio: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub initial_train_loss: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub minority_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamSummary {
    pub regime: String,
    pub positives: usize,
    pub inside: usize,
    pub fraction_inside: f64,
}

/// `summary.json`. Holds no timestamps or absolute paths, so a fixed seed
/// yields byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// `complete`, `partial` (stopped by `--until`) or `failed`.
    pub status: String,
    pub failure: Option<Failure>,
    pub data: Option<DataSummary>,
    pub gans: BTreeMap<String, GanSummary>,
    pub regimes: BTreeMap<String, RegimeSummary>,
    pub cam: Option<CamSummary>,
    pub stages: Vec<StageSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IngestResult {
    /// Manifest of the full source dataset, relative to the experiment root
    /// when it lives inside it.
    manifest: String,
    blobs: Option<String>,
    train: [usize; 2],
    validation: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GanResult {
    checkpoint: String,
    epochs: Vec<EpochRecord>,
    initial_probe_cycle: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AugmentResult {
    manifest: String,
    counts: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierResult {
    checkpoint: String,
    train_counts: [usize; 2],
    record: TrainRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EvalResult {
    metrics: BTreeMap<String, (f64, f64, f64)>,
    cam: Option<CamSummary>,
}

#[derive(Serialize, Deserialize)]
struct Marker<R> {
    stage: String,
    key: String,
    result: R,
}

/// Experiment directory owned by this process; removed on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Invalid(format!(
                "{} exists: another process owns this experiment directory",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn derived_seed(master: u64, label: &str) -> u64 {
    let b = seed::derive_seed(master, label);
    u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
}

fn ratio(c: [usize; 2]) -> Option<f64> {
    let (hi, lo) = (c[0].max(c[1]), c[0].min(c[1]));
    (lo > 0).then(|| hi as f64 / lo as f64)
}

fn counts<T>(samples: &[Sample<T>]) -> [usize; 2] {
    let mut c = [0, 0];
    for s in samples {
        c[s.label as usize] += 1;
    }
    c
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn flat_name(id: &str) -> String {
    id.trim_start_matches('/').replace(['/', '\\'], "_")
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    root: PathBuf,
    events: File,
    stages: Vec<StageSummary>,
    current: String,
}

impl Ctx<'_> {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .map(|r| r.to_string_lossy().into_owned())
            .unwrap_or_else(|_| p.to_string_lossy().into_owned())
    }

    fn abs(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn emit(&mut self, event: &str, fields: serde_json::Value) {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let mut obj = serde_json::json!({ "ts": ts, "event": event });
        if let (Some(o), serde_json::Value::Object(f)) = (obj.as_object_mut(), fields) {
            o.extend(f);
        }
        let _ = writeln!(self.events, "{obj}");
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.opts.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Runs `body` unless a completion marker for `(name, key)` exists and the
    /// run is resuming, in which case the recorded result is returned.
    fn stage<R, F>(&mut self, name: &str, key: &str, body: F) -> Result<R>
    where
        R: Serialize + DeserializeOwned,
        F: FnOnce(&mut Self) -> Result<R>,
    {
        let marker = self.dir("stages").join(format!("{name}-{key}.json"));
        self.stages.push(StageSummary {
            name: name.into(),
            key: key.into(),
        });
        self.current = name.to_string();
        if self.opts.resume && marker.exists() {
            let text = std::fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
            let m: Marker<R> = serde_json::from_str(&text)?;
            self.emit("stage_skipped", serde_json::json!({ "stage": name, "key": key }));
            self.say(format!("[{name}] already complete ({key}), skipping"));
            return Ok(m.result);
        }
        self.emit("stage_start", serde_json::json!({ "stage": name, "key": key }));
        self.say(format!("[{name}] start ({key})"));
        let result = body(self)?;
        let m = Marker {
            stage: name.to_string(),
            key: key.to_string(),
            result,
        };
        ensure_parent(&marker)?;
        std::fs::write(&marker, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&marker, e))?;
        self.emit("stage_done", serde_json::json!({ "stage": name, "key": key }));
        Ok(m.result)
    }
}

/// Full experiment: ingest → GAN training → augmentation → one classifier per
/// regime → evaluation on the shared validation split → `summary.json`.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<Summary> {
    config.validate()?;
    let root = std::path::absolute(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let _lock = Lock::acquire(&root)?;
    if !opts.resume {
        let stages = root.join("stages");
        if stages.exists() {
            std::fs::remove_dir_all(&stages).map_err(|e| Error::io(&stages, e))?;
        }
    }
    let summary_path = root.join(SUMMARY_FILE);
    if summary_path.exists() {
        std::fs::remove_file(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    }
    std::fs::write(root.join("config.toml"), config.to_toml()?).map_err(|e| Error::io(&root, e))?;
    let events_path = root.join("events.log");
    let events = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&events_path)
        .map_err(|e| Error::io(&events_path, e))?;
    let mut ctx = Ctx {
        cfg: config,
        opts,
        root,
        events,
        stages: Vec::new(),
        current: "setup".into(),
    };
    let mut summary = Summary {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        // the output location does not change results
        config_hash: content_hash(&ExperimentConfig {
            output_dir: PathBuf::new(),
            ..config.clone()
        })?,
        status: "partial".into(),
        failure: None,
        data: None,
        gans: BTreeMap::new(),
        regimes: BTreeMap::new(),
        cam: None,
        stages: Vec::new(),
    };
    ctx.emit(
        "experiment_start",
        serde_json::json!({ "config_hash": summary.config_hash, "resume": opts.resume }),
    );
    let outcome = pipeline(&mut ctx, &mut summary);
    summary.stages = ctx.stages.clone();
    match &outcome {
        Ok(done) => {
            if *done {
                summary.status = "complete".into();
            }
        }
        Err(e) => {
            summary.status = "failed".into();
            summary.failure = Some(Failure {
                stage: ctx.current.clone(),
                message: e.to_string(),
            });
            let stage = ctx.current.clone();
            ctx.emit("stage_failed", serde_json::json!({ "stage": stage, "error": e.to_string() }));
            ctx.say(format!("[{stage}] failed: {e}"));
        }
    }
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| Error::io(&summary_path, e))?;
    ctx.emit("experiment_end", serde_json::json!({ "status": summary.status }));
    outcome.map(|_| summary)
}

fn ingest(ctx: &mut Ctx, name: &str, src: &SourceConfig) -> Result<(String, IngestResult)> {
    let cfg = ctx.cfg;
    let descriptor = match (&src.manifest, &src.synth) {
        (Some(m), _) => serde_json::json!({ "manifest": file_digest(m)? }),
        (None, Some(s)) => serde_json::json!({ "synth": s }),
        (None, None) => return Err(Error::Config(format!("data.{name} is not configured"))),
    };
    let key = content_hash(&serde_json::json!({
        "source": descriptor,
        "seed": cfg.seed,
        "resolution": cfg.resolution,
        "channels": cfg.channels,
    }))?;
    let stage = format!("ingest_{name}");
    let src = src.clone();
    let result = ctx.stage(&stage, &key, |ctx| {
        let (manifest, blobs) = match (&src.manifest, &src.synth) {
            (Some(m), _) => (load_manifest(m)?, src.blobs.clone()),
            (None, Some(s)) => {
                let dir = ctx.dir("data").join(format!("{name}-{key}"));
                let out = synth_benchmark(s, derived_seed(ctx.cfg.seed, &format!("data/{name}")), &dir)?;
                (out.manifest, Some(dir.join(BLOBS_FILE)))
            }
            (None, None) => unreachable!(),
        };
        let manifests = ctx.dir("manifests");
        save_manifest(&manifest, &manifests.join(format!("{name}.csv")))?;
        for split in [Split::Train, Split::Validation] {
            save_manifest(
                &manifest.filter_split(split),
                &manifests.join(format!("{name}_{split}.csv")),
            )?;
        }
        let report = balance_report(&manifest);
        let balance = ctx.dir("metrics").join(format!("balance_{name}.json"));
        ensure_parent(&balance)?;
        std::fs::write(&balance, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&balance, e))?;
        for w in &report.warnings {
            ctx.say(format!("[ingest_{name}] warning: {w}"));
        }
        let cc = manifest.class_counts();
        let src_path = src
            .manifest
            .clone()
            .unwrap_or_else(|| manifest.root.join(crate::data::synth::MANIFEST_FILE));
        Ok(IngestResult {
            manifest: ctx.rel(&std::path::absolute(&src_path).map_err(|e| Error::io(&src_path, e))?),
            blobs: blobs.map(|b| ctx.rel(&b)),
            train: cc.get(&Split::Train).copied().unwrap_or_default(),
            validation: cc.get(&Split::Validation).copied().unwrap_or_default(),
        })
    })?;
    Ok((key, result))
}

fn load_split(ctx: &Ctx, ing: &IngestResult, split: Split) -> Result<(DatasetManifest, Vec<Sample<f32>>)> {
    let m = load_manifest(&ctx.abs(&ing.manifest))?.filter_split(split);
    let s = load_samples(&m, None, ctx.cfg.resolution, ctx.cfg.channels)?;
    Ok((m, s))
}

fn latest_epoch_checkpoint(dir: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let n = e.file_name().to_string_lossy().into_owned();
            let epoch: usize = n.strip_prefix("gan_epoch")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((epoch, e.path()))
        })
        .max_by_key(|(e, _)| *e)
        .map(|(_, p)| p)
}

/// Trains (or, when resuming, continues) one GAN and writes its checkpoint
/// and loss logs.
fn gan_stage(
    ctx: &mut Ctx,
    name: &str,
    key: &str,
    train: &[Sample<f32>],
    init: &dyn Fn() -> Result<GanTrainState<f32>>,
) -> Result<GanResult> {
    let name = name.to_string();
    ctx.stage(&name.clone(), key, |ctx| {
        let dir = ctx.dir("checkpoints").join(format!("{name}-{key}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let resumed = if ctx.opts.resume {
            latest_epoch_checkpoint(&dir).map(|p| load_gan_checkpoint::<f32>(&p)).transpose()?
        } else {
            None
        };
        let mut state = match resumed {
            Some(s) => {
                ctx.emit("gan_resumed", serde_json::json!({ "stage": name, "epoch": s.epochs_done() }));
                ctx.say(format!("[{name}] continuing from epoch {}", s.epochs_done()));
                s
            }
            None => init()?,
        };
        state.run(train, Some(&dir), &mut |r| {
            let v = serde_json::to_value(r).unwrap_or_default();
            ctx.emit("gan_epoch", serde_json::json!({ "stage": name, "record": v }));
            ctx.say(format!("[{name}] {r}"));
        })?;
        let ck = dir.join("gan_final.ckpt");
        save_gan_checkpoint(&state, &ck)?;
        let metrics = ctx.dir("metrics");
        write_loss_csv(&state.history, &metrics.join(format!("{name}_losses.csv")))?;
        let mut csv = String::from("epoch,lr,d0_loss,d1_loss,g_adv,g_cyc,g_total,probe_cycle\n");
        for e in &state.epochs {
            csv += &format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch, e.lr, e.d0_loss, e.d1_loss, e.g_adv, e.g_cyc, e.g_total, e.probe_cycle
            );
        }
        let p = metrics.join(format!("{name}_epochs.csv"));
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        Ok(GanResult {
            checkpoint: ctx.rel(&ck),
            epochs: state.epochs.clone(),
            initial_probe_cycle: state.initial_probe_cycle,
        })
    })
}

fn gan_summary(key: &str, r: &GanResult) -> GanSummary {
    GanSummary {
        key: key.to_string(),
        epochs: r.epochs.len(),
        initial_probe_cycle: r.initial_probe_cycle,
        final_probe_cycle: r.epochs.last().map_or(r.initial_probe_cycle, |e| e.probe_cycle),
    }
}

/// `Ok(true)` when every stage ran, `Ok(false)` when stopped by `--until`.
fn pipeline(ctx: &mut Ctx, summary: &mut Summary) -> Result<bool> {
    let cfg = ctx.cfg;
    let until = ctx.opts.until;
    let stop = |s: Stage| until == Some(s);

    let (ingest_key, primary) = ingest(ctx, "primary", &cfg.data.primary)?;
    let (train_manifest, train) = load_split(ctx, &primary, Split::Train)?;
    let (val_manifest, val) = load_split(ctx, &primary, Split::Validation)?;
    let mut digest = Sha256::new();
    for s in &val {
        digest.update(s.id.as_bytes());
        digest.update([0, s.label]);
    }
    summary.data = Some(DataSummary {
        train: primary.train,
        validation: primary.validation,
        train_ratio: ratio(primary.train),
        validation_ratio: ratio(primary.validation),
        validation_digest: hex::encode(digest.finalize()),
        warnings: balance_report(&train_manifest)
            .warnings
            .into_iter()
            .chain(balance_report(&val_manifest).warnings)
            .collect(),
    });
    let pretrain = if cfg.regimes.contains(&Regime::AugPretrained) {
        Some(ingest(ctx, "pretrain", &cfg.data.pretrain)?)
    } else {
        None
    };
    if stop(Stage::Ingest) {
        return Ok(false);
    }

    let gan_cfg = GanConfig {
        finetune_epochs: 0,
        ..cfg.gan.clone()
    };
    let gan_seed = derived_seed(cfg.seed, "gan");
    let mut gans: Vec<(Regime, String, String, GanResult)> = Vec::new();
    if cfg.regimes.contains(&Regime::AugSameData) {
        let key = content_hash(&serde_json::json!({ "data": ingest_key, "gan": gan_cfg, "seed": gan_seed }))?;
        let r = gan_stage(ctx, "gan_same_data", &key, &train, &|| {
            GanTrainState::init(&train, &gan_cfg, gan_seed)
        })?;
        summary.gans.insert("gan_same_data".into(), gan_summary(&key, &r));
        gans.push((Regime::AugSameData, "gan_same_data".into(), key, r));
    }
    if let Some((pre_key, pre)) = &pretrain {
        let (_, pre_train) = load_split(ctx, pre, Split::Train)?;
        let key = content_hash(&serde_json::json!({ "data": pre_key, "gan": gan_cfg, "seed": gan_seed }))?;
        let r = gan_stage(ctx, "gan_pretrained", &key, &pre_train, &|| {
            GanTrainState::init(&pre_train, &gan_cfg, gan_seed)
        })?;
        summary.gans.insert("gan_pretrained".into(), gan_summary(&key, &r));
        let (name, key, r) = if cfg.gan.finetune_epochs > 0 {
            let ft_cfg = GanConfig {
                epochs: cfg.gan.finetune_epochs,
                finetune_epochs: 0,
                ..cfg.gan.clone()
            };
            let ft_seed = derived_seed(cfg.seed, "gan/finetune");
            let ft_key = content_hash(&serde_json::json!({
                "pretrained": key, "data": ingest_key, "gan": ft_cfg, "seed": ft_seed,
            }))?;
            let ck = ctx.abs(&r.checkpoint);
            let ft = gan_stage(ctx, "gan_finetuned", &ft_key, &train, &|| {
                let pair = load_gan_checkpoint::<f32>(&ck)?.pair;
                GanTrainState::from_pair(pair, &train, &ft_cfg, ft_seed)
            })?;
            summary.gans.insert("gan_finetuned".into(), gan_summary(&ft_key, &ft));
            ("gan_finetuned".to_string(), ft_key, ft)
        } else {
            ("gan_pretrained".to_string(), key, r)
        };
        gans.push((Regime::AugPretrained, name, key, r));
    }
    if stop(Stage::Gan) {
        return Ok(false);
    }

    let mut train_sets: Vec<(Regime, String, Option<AugmentResult>)> = Vec::new();
    if cfg.regimes.contains(&Regime::Baseline) {
        train_sets.push((Regime::Baseline, ingest_key.clone(), None));
    }
    for (regime, gan_name, gan_key, gan) in &gans {
        let key = content_hash(&serde_json::json!({ "gan": gan_key, "batch_size": cfg.augment.batch_size }))?;
        let stage = format!("augment_{gan_name}");
        let ck = ctx.abs(&gan.checkpoint);
        let gan_name = gan_name.clone();
        let r = ctx.stage(&stage, &key, |ctx| {
            let pair = load_gan_checkpoint::<f32>(&ck)?.pair;
            let mut aug = augment(&train, &pair, ctx.cfg.augment.batch_size)?;
            let dir = ctx.dir("generated").join(format!("{gan_name}-{key}"));
            let m = save_augmented(&mut aug, &train_manifest, &dir)?;
            let diff_dir = ctx.dir("plots").join("difference").join(&gan_name);
            for (orig, gen) in aug.originals.iter().zip(&aug.generated).take(ctx.cfg.augment.difference_images) {
                write_triptych(orig, gen, &diff_dir.join(format!("{}.png", flat_name(&orig.id))))?;
            }
            Ok(AugmentResult {
                manifest: ctx.rel(&m.root.join("manifest.csv")),
                counts: aug.class_counts(),
            })
        })?;
        train_sets.push((*regime, key, Some(r)));
    }
    if stop(Stage::Augment) {
        return Ok(false);
    }

    let clf_seed = derived_seed(cfg.seed, "classifier");
    let pretrained_digest = cfg.classifier.pretrained.as_deref().map(file_digest).transpose()?;
    let mut classifiers: Vec<(Regime, String, ClassifierResult)> = Vec::new();
    for (regime, data_key, aug) in &train_sets {
        let key = content_hash(&serde_json::json!({
            "train": data_key, "validation": ingest_key, "classifier": cfg.classifier,
            "pretrained": pretrained_digest, "seed": clf_seed,
        }))?;
        let stage = format!("classifier_{regime}");
        let regime = *regime;
        let aug = aug.clone();
        let r = ctx.stage(&stage, &key, |ctx| {
            let samples = match &aug {
                None => train.clone(),
                Some(a) => {
                    let m = load_manifest(&ctx.abs(&a.manifest))?;
                    load_augmented::<f32>(&m, ctx.cfg.resolution, ctx.cfg.channels)?
                        .samples()
                        .cloned()
                        .collect()
                }
            };
            let clf_cfg = ctx.cfg.classifier.clone();
            let out = train_classifier(&samples, &val, &clf_cfg, clf_seed, &mut |m| {
                let v = serde_json::to_value(m).unwrap_or_default();
                ctx.emit("classifier_epoch", serde_json::json!({ "regime": regime, "record": v }));
                ctx.say(format!("[classifier_{regime}] {m}"));
            })?;
            let ck = ctx.dir("checkpoints").join(format!("classifier_{regime}-{key}.ckpt"));
            save_classifier(&out.model, Some(&out.record), &ck)?;
            out.record
                .write_csv(&ctx.dir("metrics").join(format!("classifier_{regime}_epochs.csv")))?;
            Ok(ClassifierResult {
                checkpoint: ctx.rel(&ck),
                train_counts: counts(&samples),
                record: out.record,
            })
        })?;
        summary.regimes.insert(
            regime.to_string(),
            RegimeSummary {
                train_counts: r.train_counts,
                balance_ratio: ratio(r.train_counts),
                epochs_run: r.record.epochs.len(),
                best_epoch: r.record.best_epoch,
                initial_train_loss: r.record.initial_train_loss,
                roc_auc: None,
                pr_auc: None,
                minority_recall: None,
            },
        );
        classifiers.push((regime, key, r));
    }
    if stop(Stage::Classifier) {
        return Ok(false);
    }

    let eval_key = content_hash(&serde_json::json!({
        "classifiers": classifiers.iter().map(|c| &c.1).collect::<Vec<_>>(),
        "cam": cfg.cam,
    }))?;
    let blobs = primary.blobs.clone();
    let result = ctx.stage("eval", &eval_key, |ctx| {
        let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
        let ids: Vec<String> = val.iter().map(|s| s.id.clone()).collect();
        let mut scored: Vec<(ScoredSet, CurveReport)> = Vec::new();
        let mut metrics = BTreeMap::new();
        let mut models = Vec::new();
        for (regime, _, r) in &classifiers {
            let (model, _) = load_classifier::<f32>(&ctx.abs(&r.checkpoint))?;
            let probs = predict(&model, &val, ctx.cfg.classifier.eval_batch_size)?;
            write_scores(&ctx.dir("metrics").join(format!("scores_{regime}.csv")), &ids, &probs, &labels)?;
            let set = ScoredSet::new(regime.as_str(), ids.clone(), probs.clone(), labels.clone())?;
            let rep = curve_report(&set)?;
            let recall = recall_at(&probs, &labels, RECALL_THRESHOLD)?;
            ctx.say(format!(
                "[eval] {regime}: roc_auc={:.4} pr_auc={:.4} recall@{RECALL_THRESHOLD}={recall:.3}",
                rep.roc_auc, rep.pr_auc
            ));
            metrics.insert(regime.to_string(), (rep.roc_auc, rep.pr_auc, recall));
            scored.push((set, rep));
            models.push((*regime, model));
        }
        let mdir = ctx.dir("metrics");
        if scored.len() >= 2 {
            compare_regimes(&scored, &mdir, &ctx.dir("plots"))?;
        } else {
            write_metrics_table(&scored, &mdir)?;
            write_curves(&scored, &mdir)?;
        }
        let cam = match (&blobs, ctx.cfg.cam.enabled) {
            (Some(b), true) => {
                let (regime, model) = models
                    .iter()
                    .find(|(r, _)| *r == Regime::Baseline)
                    .unwrap_or(&models[0]);
                Some(cam_stage(ctx, *regime, model, &val, &val_manifest, &ctx.abs(b))?)
            }
            _ => None,
        };
        Ok(EvalResult { metrics, cam })
    })?;
    for (regime, (roc, pr, recall)) in &result.metrics {
        if let Some(r) = summary.regimes.get_mut(regime) {
            r.roc_auc = Some(*roc);
            r.pr_auc = Some(*pr);
            r.minority_recall = Some(*recall);
        }
    }
    summary.cam = result.cam;
    Ok(true)
}

fn write_scores(path: &Path, ids: &[String], probs: &[f64], labels: &[u8]) -> Result<()> {
    let mut s = String::from("id,label,probability\n");
    for ((id, p), l) in ids.iter().zip(probs).zip(labels) {
        s += &format!("{id},{l},{p}\n");
    }
    ensure_parent(path)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Original | generated | normalised difference, side by side in grayscale.
fn write_triptych(orig: &Sample<f32>, gen: &Sample<f32>, path: &Path) -> Result<()> {
    let diff = difference_image(orig, gen)?;
    let s = orig.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let gray = |img: &Sample<f32>, y: usize, x: usize| {
        (0..c).map(|ch| img.image.data()[ch * h * w + y * w + x] as f64).sum::<f64>() / c as f64 * 0.5 + 0.5
    };
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            px.push(gray(orig, y, x));
        }
        for x in 0..w {
            px.push(gray(gen, y, x));
        }
        for x in 0..w {
            px.push(diff.data()[y * w + x]);
        }
    }
    save_gray_png(&px, h, 3 * w, path)
}

fn cam_stage(
    ctx: &Ctx,
    regime: Regime,
    model: &crate::classifier::DenseNet<f32>,
    val: &[Sample<f32>],
    val_manifest: &DatasetManifest,
    blobs_path: &Path,
) -> Result<CamSummary> {
    let blobs = load_blobs(blobs_path)?;
    let path_of: BTreeMap<String, &str> = val_manifest
        .records
        .iter()
        .map(|r| (sample_id(&r.path), r.path.as_str()))
        .collect();
    let source_size = ctx.cfg.data.primary.synth.as_ref().map_or(ctx.cfg.resolution, |s| s.size);
    let scale = source_size as f64 / ctx.cfg.resolution as f64;
    let dir = ctx.dir("plots").join("cam").join(regime.as_str());
    let (mut positives, mut inside) = (0, 0);
    for s in val.iter().filter(|s| s.label == 1) {
        let Some(blob) = path_of.get(&s.id).and_then(|p| blobs.get(*p)) else {
            continue;
        };
        let cam = compute_cam(model, s)?;
        let (x, y) = cam.argmax();
        positives += 1;
        // blob boxes are in source pixels; map the argmax back from the
        // classifier grid
        let to_src = |v: usize| (((v as f64 + 0.5) * scale - 0.5).round().max(0.0)) as usize;
        if blob.contains(to_src(x), to_src(y), source_size) {
            inside += 1;
        }
        if positives <= ctx.cfg.cam.overlays {
            cam_overlay(s, &cam, ctx.cfg.cam.alpha, &dir.join(format!("{}.png", flat_name(&s.id))))?;
        }
    }
    let summary = CamSummary {
        regime: regime.to_string(),
        positives,
        inside,
        fraction_inside: if positives > 0 { inside as f64 / positives as f64 } else { 0.0 },
    };
    let p = ctx.dir("metrics").join("cam.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}
