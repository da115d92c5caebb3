use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use cyclebalance_nn::{Adam, Checkpoint, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{cycle_loss, l1_with_grad, lsgan_with_grad};
use super::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::data::{Sample, Split};
use crate::error::{Error, Result};
use crate::seed::{self, RngState};

pub const CHECKPOINT_KIND: &str = "gan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub epochs: usize,
    /// Steps per epoch; `0` means one pass over the larger class.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_cyc: f64,
    /// Adds the identity-mapping term weighted `0.5 * lambda_cyc`.
    pub identity: bool,
    pub pool_capacity: usize,
    pub ngf: usize,
    pub downsamplings: usize,
    pub res_blocks: usize,
    pub ndf: usize,
    pub disc_layers: usize,
    /// Images per class in the fixed batch used to track cycle loss.
    pub probe_size: usize,
    /// Write an intermediate checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    /// Extra epochs on the primary data after loading a pretrained pair.
    pub finetune_epochs: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 0,
            batch_size: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_cyc: 10.0,
            identity: false,
            pool_capacity: 50,
            ngf: 64,
            downsamplings: 2,
            res_blocks: 9,
            ndf: 64,
            disc_layers: 3,
            probe_size: 8,
            checkpoint_every: 0,
            finetune_epochs: 10,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("gan.batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("gan.lr must be finite and >= 0".into()));
        }
        if !(self.lambda_cyc >= 0.0 && self.lambda_cyc.is_finite()) {
            return Err(Error::Config("gan.lambda_cyc must be finite and >= 0".into()));
        }
        if self.probe_size == 0 {
            return Err(Error::Config("gan.probe_size must be positive".into()));
        }
        Ok(())
    }

    fn generator(&self, channels: usize, resolution: usize) -> GeneratorConfig {
        GeneratorConfig {
            channels,
            resolution,
            ngf: self.ngf,
            downsamplings: self.downsamplings,
            res_blocks: self.res_blocks,
        }
    }

    fn discriminator(&self, channels: usize, resolution: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels,
            resolution,
            ndf: self.ndf,
            layers: self.disc_layers,
        }
    }

    /// Learning-rate multiplier: constant for the first half, then linear decay towards zero.
    pub fn lr_factor(epoch: usize, total: usize) -> f64 {
        let hold = total / 2;
        let decay = (total - hold) as f64 + 1.0;
        1.0 - (epoch + 1).saturating_sub(hold) as f64 / decay
    }
}

/// The two translators and the two domain discriminators.
#[derive(Clone, Debug)]
pub struct GeneratorPair<T> {
    /// class 0 → class 1
    pub g01: Generator<T>,
    /// class 1 → class 0
    pub g10: Generator<T>,
    /// judges class-0 images
    pub d0: Discriminator<T>,
    /// judges class-1 images
    pub d1: Discriminator<T>,
    pub step: u64,
}

impl<T: Scalar> GeneratorPair<T> {
    pub fn new(config: &GanConfig, channels: usize, resolution: usize, seed: u64) -> Result<Self> {
        let g = config.generator(channels, resolution);
        let d = config.discriminator(channels, resolution);
        Ok(Self {
            g01: Generator::new(g.clone(), &mut seed::stream(seed, "init/g01"))?,
            g10: Generator::new(g, &mut seed::stream(seed, "init/g10"))?,
            d0: Discriminator::new(d.clone(), &mut seed::stream(seed, "init/d0"))?,
            d1: Discriminator::new(d, &mut seed::stream(seed, "init/d1"))?,
            step: 0,
        })
    }

    pub fn resolution(&self) -> usize {
        self.g01.config.resolution
    }

    pub fn channels(&self) -> usize {
        self.g01.config.channels
    }

    /// Largest absolute parameter difference over all four networks.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        [
            self.g01.params.max_abs_diff(&other.g01.params),
            self.g10.params.max_abs_diff(&other.g10.params),
            self.d0.params.max_abs_diff(&other.d0.params),
            self.d1.params.max_abs_diff(&other.d1.params),
        ]
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .fold(0.0, f64::max)
    }
}

/// Fixed-capacity pool of past generated images, one image per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T> {
    pub capacity: usize,
    pub images: Vec<Tensor<T>>,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::new(),
        }
    }

    /// Returns the batch the discriminator should see. Until the pool is full
    /// every image is stored and passed through; afterwards each image is, with
    /// probability 1/2, swapped for a random stored one.
    pub fn query(&mut self, batch: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
        if self.capacity == 0 {
            return batch.clone();
        }
        let n = batch.shape()[0];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let img = batch.slice_batch(i);
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if rng.random::<f64>() < 0.5 {
                let j = rng.random_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[j], img));
            } else {
                out.push(img);
            }
        }
        Tensor::stack_batch(&out).expect("same shape")
    }
}

/// Losses of one update step. `g_cyc` is the unweighted cycle loss; `g_total`
/// is the objective the generators minimised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub d0_loss: f64,
    pub d1_loss: f64,
    pub g_adv: f64,
    pub g_cyc: f64,
    pub g_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub d0_loss: f64,
    pub d1_loss: f64,
    pub g_adv: f64,
    pub g_cyc: f64,
    pub g_total: f64,
    pub probe_cycle: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gan epoch={} lr={:.6e} d0_loss={:.6} d1_loss={:.6} g_adv={:.6} g_cyc={:.6} g_total={:.6} probe_cycle={:.6}",
            self.epoch, self.lr, self.d0_loss, self.d1_loss, self.g_adv, self.g_cyc, self.g_total, self.probe_cycle
        )
    }
}

#[derive(Clone, Debug)]
pub struct GanTrainState<T> {
    pub config: GanConfig,
    pub seed: u64,
    pub pair: GeneratorPair<T>,
    opt_g01: Adam<T>,
    opt_g10: Adam<T>,
    opt_d0: Adam<T>,
    opt_d1: Adam<T>,
    pub pool0: ReplayBuffer<T>,
    pub pool1: ReplayBuffer<T>,
    pub history: Vec<LossRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Cycle loss on the probe batch before any update.
    pub initial_probe_cycle: f64,
    data_rng: ChaCha8Rng,
    pool_rng: ChaCha8Rng,
}

/// Train-split images of each class, in input order.
fn domains<T: Scalar>(train: &[Sample<T>]) -> Result<[Vec<&Tensor<T>>; 2]> {
    let mut out = [Vec::new(), Vec::new()];
    for s in train.iter().filter(|s| s.split == Split::Train) {
        out[usize::from(s.label == 1)].push(&s.image);
    }
    for (label, d) in out.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::Invalid(format!("class {label} has no training samples")));
        }
    }
    Ok(out)
}

fn stack<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let parts = images
        .iter()
        .map(|im| {
            let mut shape = vec![1];
            shape.extend_from_slice(im.shape());
            (*im).clone().reshape(&shape)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Tensor::stack_batch(&parts)?)
}

fn probe_batches<T: Scalar>(doms: &[Vec<&Tensor<T>>; 2], size: usize) -> Result<[Tensor<T>; 2]> {
    Ok([
        stack(&doms[0][..size.min(doms[0].len())])?,
        stack(&doms[1][..size.min(doms[1].len())])?,
    ])
}

fn f64_of<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

impl<T: Scalar> GanTrainState<T> {
    /// Fresh networks and optimisers for the images in `train`.
    pub fn init(train: &[Sample<T>], config: &GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let doms = domains(train)?;
        let s = doms[0][0].shape();
        let pair = GeneratorPair::new(config, s[0], s[1], seed)?;
        Self::from_pair(pair, train, config, seed)
    }

    /// Continues from existing networks with fresh optimisers, pools and history.
    pub fn from_pair(mut pair: GeneratorPair<T>, train: &[Sample<T>], config: &GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let doms = domains(train)?;
        let probe = probe_batches(&doms, config.probe_size)?;
        let initial = f64_of(cycle_loss(&pair.g01, &pair.g10, &probe[0], &probe[1])?);
        pair.step = 0;
        let opt = |ps| Adam::new(ps, config.lr, config.beta1, config.beta2);
        Ok(Self {
            opt_g01: opt(&pair.g01.params),
            opt_g10: opt(&pair.g10.params),
            opt_d0: opt(&pair.d0.params),
            opt_d1: opt(&pair.d1.params),
            pair,
            config: config.clone(),
            seed,
            pool0: ReplayBuffer::new(config.pool_capacity),
            pool1: ReplayBuffer::new(config.pool_capacity),
            history: Vec::new(),
            epochs: Vec::new(),
            initial_probe_cycle: initial,
            data_rng: seed::stream(seed, "gan/data"),
            pool_rng: seed::stream(seed, "gan/pool"),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs.len()
    }

    pub fn probe_cycle(&self, train: &[Sample<T>]) -> Result<f64> {
        let doms = domains(train)?;
        let probe = probe_batches(&doms, self.config.probe_size)?;
        Ok(f64_of(cycle_loss(&self.pair.g01, &self.pair.g10, &probe[0], &probe[1])?))
    }

    /// Runs epochs until `config.epochs` are done, reporting each finished epoch.
    /// With `checkpoint_dir`, writes `gan_epoch<NNNN>.ckpt` every
    /// `checkpoint_every` epochs.
    pub fn run(
        &mut self,
        train: &[Sample<T>],
        checkpoint_dir: Option<&Path>,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<()> {
        let doms = domains(train)?;
        let probe = probe_batches(&doms, self.config.probe_size)?;
        while self.epochs_done() < self.config.epochs {
            let rec = self.epoch(&doms, &probe)?;
            on_epoch(&rec);
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.epochs_done() % every == 0 {
                    save_gan_checkpoint(self, &dir.join(format!("gan_epoch{:04}.ckpt", self.epochs_done())))?;
                }
            }
        }
        Ok(())
    }

    fn epoch(&mut self, doms: &[Vec<&Tensor<T>>; 2], probe: &[Tensor<T>; 2]) -> Result<EpochRecord> {
        let cfg = self.config.clone();
        let e = self.epochs_done();
        let lr = cfg.lr * GanConfig::lr_factor(e, cfg.epochs);
        for opt in [&mut self.opt_g01, &mut self.opt_g10, &mut self.opt_d0, &mut self.opt_d1] {
            opt.lr = lr;
        }
        let b = cfg.batch_size;
        let steps = if cfg.steps_per_epoch > 0 {
            cfg.steps_per_epoch
        } else {
            doms[0].len().max(doms[1].len()).div_ceil(b)
        };
        let order0 = self.draw_order(doms[0].len(), steps * b);
        let order1 = self.draw_order(doms[1].len(), steps * b);
        let mut sums = [0.0; 5];
        for s in 0..steps {
            let pick = |d: &Vec<&Tensor<T>>, order: &[usize]| {
                stack(&order[s * b..(s + 1) * b].iter().map(|&i| d[i]).collect::<Vec<_>>())
            };
            let x0 = pick(&doms[0], &order0)?;
            let x1 = pick(&doms[1], &order1)?;
            let rec = self.step(&x0, &x1)?;
            for (acc, v) in sums.iter_mut().zip([rec.d0_loss, rec.d1_loss, rec.g_adv, rec.g_cyc, rec.g_total]) {
                *acc += v;
            }
            self.history.push(rec);
        }
        let n = steps.max(1) as f64;
        let probe_cycle = f64_of(cycle_loss(&self.pair.g01, &self.pair.g10, &probe[0], &probe[1])?);
        let rec = EpochRecord {
            epoch: e + 1,
            lr,
            d0_loss: sums[0] / n,
            d1_loss: sums[1] / n,
            g_adv: sums[2] / n,
            g_cyc: sums[3] / n,
            g_total: sums[4] / n,
            probe_cycle,
        };
        self.epochs.push(rec.clone());
        Ok(rec)
    }

    /// `len` indices into a domain of size `n`, concatenating fresh shuffles.
    fn draw_order(&mut self, n: usize, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len + n);
        while out.len() < len {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut self.data_rng);
            out.extend(perm);
        }
        out.truncate(len);
        out
    }

    /// One generator update followed by one update of each discriminator.
    pub fn step(&mut self, x0: &Tensor<T>, x1: &Tensor<T>) -> Result<LossRecord> {
        let step = self.pair.step + 1;
        let cfg = &self.config;
        let lam = T::from_f64_lossy(cfg.lambda_cyc);
        let p = &mut self.pair;
        for ps in [&mut p.g01.params, &mut p.g10.params, &mut p.d0.params, &mut p.d1.params] {
            ps.zero_grads();
        }

        let (fake1, c_fake1) = p.g01.forward(x0);
        let (rec0, c_rec0) = p.g10.forward(&fake1);
        let (fake0, c_fake0) = p.g10.forward(x1);
        let (rec1, c_rec1) = p.g01.forward(&fake0);

        let (s1, c_s1) = p.d1.forward(&fake1);
        let (s0, c_s0) = p.d0.forward(&fake0);
        let (adv1, da1) = lsgan_with_grad(&s1, T::one());
        let (adv0, da0) = lsgan_with_grad(&s0, T::one());
        let (cyc0, dc0) = l1_with_grad(&rec0, x0);
        let (cyc1, dc1) = l1_with_grad(&rec1, x1);
        let g_adv = adv0 + adv1;
        let g_cyc = cyc0 + cyc1;
        let mut g_total = g_adv + lam * g_cyc;

        // grads of the discriminators from this pass are discarded below
        let mut dfake1 = p.d1.backward(&c_s1, &da1, true).expect("dx");
        let mut dfake0 = p.d0.backward(&c_s0, &da0, true).expect("dx");
        dfake1.add_assign(&p.g10.backward(&c_rec0, &dc0.map(|g| g * lam), true).expect("dx"));
        dfake0.add_assign(&p.g01.backward(&c_rec1, &dc1.map(|g| g * lam), true).expect("dx"));
        p.g01.backward(&c_fake1, &dfake1, false);
        p.g10.backward(&c_fake0, &dfake0, false);

        if cfg.identity {
            let w = lam * T::from_f64_lossy(0.5);
            let (id1, c_id1) = p.g01.forward(x1);
            let (id0, c_id0) = p.g10.forward(x0);
            let (l1, d1) = l1_with_grad(&id1, x1);
            let (l0, d0) = l1_with_grad(&id0, x0);
            g_total += w * (l0 + l1);
            p.g01.backward(&c_id1, &d1.map(|g| g * w), false);
            p.g10.backward(&c_id0, &d0.map(|g| g * w), false);
        }

        let pooled0 = self.pool0.query(&fake0, &mut self.pool_rng);
        let pooled1 = self.pool1.query(&fake1, &mut self.pool_rng);
        let d0_loss = disc_grads(&mut p.d0, x0, &pooled0);
        let d1_loss = disc_grads(&mut p.d1, x1, &pooled1);

        let rec = LossRecord {
            step,
            d0_loss: f64_of(d0_loss),
            d1_loss: f64_of(d1_loss),
            g_adv: f64_of(g_adv),
            g_cyc: f64_of(g_cyc),
            g_total: f64_of(g_total),
        };
        if ![rec.d0_loss, rec.d1_loss, rec.g_adv, rec.g_cyc, rec.g_total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "d0_loss={} d1_loss={} g_adv={} g_cyc={} g_total={}",
                    rec.d0_loss, rec.d1_loss, rec.g_adv, rec.g_cyc, rec.g_total
                ),
            });
        }
        self.opt_g01.step(&mut p.g01.params);
        self.opt_g10.step(&mut p.g10.params);
        self.opt_d0.step(&mut p.d0.params);
        self.opt_d1.step(&mut p.d1.params);
        p.step = step;
        Ok(rec)
    }
}

/// Zeroes the discriminator's gradients, then accumulates those of
/// `0.5 * d_loss`. Returns `d_loss`.
fn disc_grads<T: Scalar>(d: &mut Discriminator<T>, real: &Tensor<T>, fake: &Tensor<T>) -> T {
    d.params.zero_grads();
    let half = T::from_f64_lossy(0.5);
    let (sr, cr) = d.forward(real);
    let (sf, cf) = d.forward(fake);
    let (lr, gr) = lsgan_with_grad(&sr, T::one());
    let (lf, gf) = lsgan_with_grad(&sf, T::zero());
    d.backward(&cr, &gr.map(|g| g * half), false);
    d.backward(&cf, &gf.map(|g| g * half), false);
    lr + lf
}

/// Initialises and trains for `config.epochs` epochs; writes `gan_final.ckpt`
/// (and periodic checkpoints) when `checkpoint_dir` is given.
pub fn train_gan<T: Scalar>(
    train: &[Sample<T>],
    config: &GanConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<GanTrainState<T>> {
    let mut state = GanTrainState::init(train, config, seed)?;
    state.run(train, checkpoint_dir, on_epoch)?;
    if let Some(dir) = checkpoint_dir {
        save_gan_checkpoint(&state, &dir.join("gan_final.ckpt"))?;
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: GanConfig,
    seed: u64,
    channels: usize,
    resolution: usize,
    step: u64,
    adam_t: [u64; 4],
    adam_lr: f64,
    initial_probe_cycle: f64,
    epochs: Vec<EpochRecord>,
    data_rng: RngState,
    pool_rng: RngState,
}

const NETS: [&str; 4] = ["g01", "g10", "d0", "d1"];

pub fn save_gan_checkpoint<T: Scalar>(state: &GanTrainState<T>, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new(CHECKPOINT_KIND);
    let p = &state.pair;
    let stores = [&p.g01.params, &p.g10.params, &p.d0.params, &p.d1.params];
    let opts = [&state.opt_g01, &state.opt_g10, &state.opt_d0, &state.opt_d1];
    for ((name, ps), opt) in NETS.iter().zip(stores).zip(opts) {
        ck.put_store(name, ps);
        opt.save(ps, &format!("adam.{name}"), &mut ck);
    }
    for (name, pool) in [("pool0", &state.pool0), ("pool1", &state.pool1)] {
        for (i, img) in pool.images.iter().enumerate() {
            ck.put(format!("{name}.{i:04}"), img);
        }
    }
    let hist: Vec<f64> = state
        .history
        .iter()
        .flat_map(|r| [r.step as f64, r.d0_loss, r.d1_loss, r.g_adv, r.g_cyc, r.g_total])
        .collect();
    ck.put("history", &Tensor::from_vec(&[state.history.len(), 6], hist)?);
    let meta = Meta {
        config: state.config.clone(),
        seed: state.seed,
        channels: p.channels(),
        resolution: p.resolution(),
        step: p.step,
        adam_t: opts.map(|o| o.t),
        adam_lr: state.opt_g01.lr,
        initial_probe_cycle: state.initial_probe_cycle,
        epochs: state.epochs.clone(),
        data_rng: RngState::capture(&state.data_rng),
        pool_rng: RngState::capture(&state.pool_rng),
    };
    ck.meta = serde_json::to_string(&meta)?;
    crate::data::ensure_parent(path)?;
    ck.save(path)?;
    Ok(())
}

pub fn load_gan_checkpoint<T: Scalar>(path: &Path) -> Result<GanTrainState<T>> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != CHECKPOINT_KIND {
        return Err(Error::Invalid(format!(
            "{}: expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
            path.display(),
            ck.kind
        )));
    }
    let meta: Meta = serde_json::from_str(&ck.meta)?;
    let cfg = &meta.config;
    let mut pair = GeneratorPair::new(cfg, meta.channels, meta.resolution, meta.seed)?;
    pair.step = meta.step;
    {
        let stores = [
            &mut pair.g01.params,
            &mut pair.g10.params,
            &mut pair.d0.params,
            &mut pair.d1.params,
        ];
        for (name, ps) in NETS.iter().zip(stores) {
            ck.load_store(name, ps)?;
        }
    }
    let opt = |ps, name: &str, t| Adam::load(ps, &format!("adam.{name}"), &ck, meta.adam_lr, cfg.beta1, cfg.beta2, t);
    let opt_g01 = opt(&pair.g01.params, "g01", meta.adam_t[0])?;
    let opt_g10 = opt(&pair.g10.params, "g10", meta.adam_t[1])?;
    let opt_d0 = opt(&pair.d0.params, "d0", meta.adam_t[2])?;
    let opt_d1 = opt(&pair.d1.params, "d1", meta.adam_t[3])?;
    let pool = |name: &str| -> Result<ReplayBuffer<T>> {
        let mut b = ReplayBuffer::new(cfg.pool_capacity);
        for i in 0.. {
            let key = format!("{name}.{i:04}");
            if !ck.contains(&key) {
                break;
            }
            b.images.push(ck.get(&key)?);
        }
        Ok(b)
    };
    let hist: Tensor<f64> = ck.get("history")?;
    let history = hist
        .data()
        .chunks(6)
        .map(|r| LossRecord {
            step: r[0] as u64,
            d0_loss: r[1],
            d1_loss: r[2],
            g_adv: r[3],
            g_cyc: r[4],
            g_total: r[5],
        })
        .collect();
    let bad_rng = || Error::Invalid(format!("{}: corrupt rng state", path.display()));
    Ok(GanTrainState {
        config: meta.config.clone(),
        seed: meta.seed,
        pair,
        opt_g01,
        opt_g10,
        opt_d0,
        opt_d1,
        pool0: pool("pool0")?,
        pool1: pool("pool1")?,
        history,
        epochs: meta.epochs,
        initial_probe_cycle: meta.initial_probe_cycle,
        data_rng: meta.data_rng.restore().ok_or_else(bad_rng)?,
        pool_rng: meta.pool_rng.restore().ok_or_else(bad_rng)?,
    })
}

/// Per-step CSV: `step,d0_loss,d1_loss,g_adv,g_cyc,g_total`.
pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<PathBuf> {
    crate::data::ensure_parent(path)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("step,d0_loss,d1_loss,g_adv,g_cyc,g_total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.d0_loss, r.d1_loss, r.g_adv, r.g_cyc, r.g_total
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}
