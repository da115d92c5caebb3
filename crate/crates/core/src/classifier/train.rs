use std::fmt;
use std::path::{Path, PathBuf};

use cyclebalance_nn::{Adam, Checkpoint, Scalar};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{DenseNet, DenseNetConfig, Stem};
use crate::data::{batch_of, Sample};
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::seed;

pub const CHECKPOINT_KIND: &str = "classifier";
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Learning-rate multiplier applied when validation loss stalls.
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub init_features: usize,
    pub growth_rate: usize,
    pub block_config: Vec<usize>,
    pub bn_size: usize,
    pub compression: f64,
    pub stem: Stem,
    pub input_mean: f64,
    pub input_std: f64,
    /// Checkpoint whose matching backbone tensors replace the random init.
    pub pretrained: Option<PathBuf>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let d = DenseNetConfig::densenet121(3);
        Self {
            epochs: 10,
            batch_size: 16,
            eval_batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            plateau_factor: 0.1,
            plateau_patience: 2,
            early_stop_patience: 5,
            init_features: d.init_features,
            growth_rate: d.growth_rate,
            block_config: d.block_config,
            bn_size: d.bn_size,
            compression: d.compression,
            stem: d.stem,
            input_mean: d.input_mean,
            input_std: d.input_std,
            pretrained: None,
        }
    }
}

impl ClassifierConfig {
    pub fn model_config(&self, channels: usize, resolution: usize) -> DenseNetConfig {
        DenseNetConfig {
            channels,
            resolution,
            init_features: self.init_features,
            growth_rate: self.growth_rate,
            block_config: self.block_config.clone(),
            bn_size: self.bn_size,
            compression: self.compression,
            stem: self.stem,
            input_mean: self.input_mean,
            input_std: self.input_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("classifier batch sizes must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("classifier.lr must be finite and >= 0".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("classifier patience values must be positive".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1-ε]`.
pub fn bce_loss(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(Error::Invalid("bce of an empty batch".into()));
    }
    let mut total = 0.0;
    for (&p, &l) in probabilities.iter().zip(labels) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total += match l {
            0 => -(1.0 - p).ln(),
            1 => -p.ln(),
            other => return Err(Error::Invalid(format!("label {other} outside {{0,1}}"))),
        };
    }
    Ok(total / probabilities.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_roc_auc: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "clf epoch={} lr={:.6e} train_loss={:.6} val_loss={:.6} val_roc_auc={:.6}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.val_roc_auc
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept (0 if no epoch ran).
    pub best_epoch: usize,
    /// Mean training loss of the initial parameters, measured the same way as
    /// the per-epoch training loss.
    pub initial_train_loss: f64,
}

impl TrainRecord {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::data::ensure_parent(path)?;
        let mut out = String::from("epoch,lr,train_loss,val_loss,val_roc_auc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.lr, e.train_loss, e.val_loss, e.val_roc_auc
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome<T> {
    pub model: DenseNet<T>,
    pub record: TrainRecord,
}

/// Inference-mode probabilities for `samples`, in order.
pub fn predict<T: Scalar>(model: &DenseNet<T>, samples: &[Sample<T>], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let f = model.forward(&batch_of(&refs)?, false)?;
        out.extend(f.probabilities.iter().map(|p| p.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(out)
}

fn labels_of<T>(samples: &[Sample<T>]) -> Vec<u8> {
    samples.iter().map(|s| s.label).collect()
}

/// One training-mode pass over `batches` of `train`; with `update`, takes an
/// optimiser step per batch. Returns the size-weighted mean loss.
fn pass<T: Scalar>(
    model: &mut DenseNet<T>,
    opt: Option<&mut Adam<T>>,
    train: &[Sample<T>],
    batches: &[Vec<usize>],
    step: &mut u64,
) -> Result<f64> {
    let mut opt = opt;
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in batches {
        let refs: Vec<&Sample<T>> = idx.iter().map(|&i| &train[i]).collect();
        let x = batch_of(&refs)?;
        let labels: Vec<u8> = refs.iter().map(|s| s.label).collect();
        if opt.is_some() {
            model.params.zero_grads();
        }
        let (logits, cache) = model.forward_train(&x);
        let probs: Vec<f64> = logits
            .iter()
            .map(|&z| super::model::sigmoid(z).to_f64().unwrap_or(f64::NAN))
            .collect();
        let loss = bce_loss(&probs, &labels)?;
        *step += 1;
        if !loss.is_finite() {
            let bad = logits.iter().filter(|z| !z.is_finite()).count();
            return Err(Error::NonFinite {
                step: *step,
                detail: format!("bce_loss={loss} non_finite_logits={bad} batch={}", idx.len()),
            });
        }
        if let Some(o) = opt.as_deref_mut() {
            let n = T::from_usize(idx.len()).expect("batch");
            let dlogits: Vec<T> = logits
                .iter()
                .zip(&labels)
                .map(|(&z, &l)| (super::model::sigmoid(z) - T::from_u8(l).expect("label")) / n)
                .collect();
            model.backward(&cache, &dlogits);
            o.step(&mut model.params);
        }
        total += loss * idx.len() as f64;
        count += idx.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Copies every backbone tensor of a checkpoint whose name and shape match.
/// Returns how many tensors were loaded.
pub fn load_pretrained_backbone<T: Scalar>(model: &mut DenseNet<T>, path: &Path) -> Result<usize> {
    let ck = Checkpoint::load(path)?;
    let mut loaded = 0;
    for p in model.params.iter_mut() {
        if p.name.starts_with("head.") {
            continue;
        }
        let key = format!("model.{}", p.name);
        if ck.contains(&key) {
            let t = ck.get(&key)?;
            if t.shape() == p.value.shape() {
                p.value = t;
                loaded += 1;
            }
        }
    }
    if loaded == 0 {
        return Err(Error::Invalid(format!(
            "{}: no backbone tensor matches the model",
            path.display()
        )));
    }
    Ok(loaded)
}

/// Mini-batch Adam on BCE; keeps the parameters of the epoch with the best
/// validation ROC AUC (ties go to the lower validation loss, then the earlier
/// epoch).
pub fn train_classifier<T: Scalar>(
    train: &[Sample<T>],
    val: &[Sample<T>],
    config: &ClassifierConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let val_labels = labels_of(val);
    if !(val_labels.contains(&0) && val_labels.contains(&1)) {
        return Err(Error::Invalid("validation split needs both classes".into()));
    }
    let s = train[0].image.shape();
    let mut model = DenseNet::new(config.model_config(s[0], s[1]), &mut seed::stream(seed, "clf/init"))?;
    if let Some(p) = &config.pretrained {
        load_pretrained_backbone(&mut model, p)?;
    }
    let mut opt = Adam::new(&model.params, config.lr, config.beta1, config.beta2);
    let mut rng = seed::stream(seed, "clf/shuffle");
    let mut step = 0u64;

    let sorted: Vec<usize> = (0..train.len()).collect();
    let initial_batches: Vec<Vec<usize>> = sorted.chunks(config.batch_size).map(<[usize]>::to_vec).collect();
    let initial_train_loss = pass(&mut model.clone(), None, train, &initial_batches, &mut 0)?;

    let mut record = TrainRecord {
        epochs: Vec::new(),
        best_epoch: 0,
        initial_train_loss,
    };
    let mut best = model.clone();
    let mut best_key = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_val_loss = f64::INFINITY;
    let (mut stalled, mut since_reduce) = (0usize, 0usize);
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let batches: Vec<Vec<usize>> = order
            .chunks(config.batch_size)
            .map(|c| {
                let mut b = c.to_vec();
                b.sort_unstable();
                b
            })
            .collect();
        let lr = opt.lr;
        let train_loss = pass(&mut model, Some(&mut opt), train, &batches, &mut step)?;
        let probs = predict(&model, val, config.eval_batch_size)?;
        let val_loss = bce_loss(&probs, &val_labels)?;
        let val_roc_auc = roc_auc(&probs, &val_labels)?.auc;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_roc_auc,
        };
        on_epoch(&m);
        record.epochs.push(m);
        if val_roc_auc > best_key.0 || (val_roc_auc == best_key.0 && val_loss < best_key.1) {
            best_key = (val_roc_auc, val_loss);
            best = model.clone();
            record.best_epoch = epoch;
        }
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            stalled = 0;
            since_reduce = 0;
        } else {
            stalled += 1;
            since_reduce += 1;
            if since_reduce >= config.plateau_patience {
                opt.lr *= config.plateau_factor;
                since_reduce = 0;
            }
            if stalled >= config.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { model: best, record })
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: DenseNetConfig,
    record: Option<TrainRecord>,
}

pub fn save_classifier<T: Scalar>(model: &DenseNet<T>, record: Option<&TrainRecord>, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new(CHECKPOINT_KIND);
    ck.put_store("model", &model.params);
    ck.meta = serde_json::to_string(&Meta {
        config: model.config.clone(),
        record: record.cloned(),
    })?;
    crate::data::ensure_parent(path)?;
    ck.save(path)?;
    Ok(())
}

pub fn load_classifier<T: Scalar>(path: &Path) -> Result<(DenseNet<T>, Option<TrainRecord>)> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != CHECKPOINT_KIND {
        return Err(Error::Invalid(format!(
            "{}: expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
            path.display(),
            ck.kind
        )));
    }
    let meta: Meta = serde_json::from_str(&ck.meta)?;
    let mut model = DenseNet::new(meta.config, &mut seed::stream(0, "clf/load"))?;
    ck.load_store("model", &mut model.params)?;
    Ok((model, meta.record))
}
