//! Finite-difference checks of the hand-written backward passes on tiny
//! stand-in networks in f64. Each returns the worst relative error found.

use cyclebalance::classifier::{DenseNet, DenseNetConfig, Stem};
use cyclebalance::gan::{
    l1_with_grad, lsgan_with_grad, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use cyclebalance::nn::gradcheck::check_store;
use cyclebalance::nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-3;

fn input(shape: &[usize], phase: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| (i as f64 * 0.61 + phase).sin() * 0.9)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn tiny_generator(seed: u64) -> Generator<f64> {
    let cfg = GeneratorConfig {
        channels: 1,
        resolution: 8,
        ngf: 2,
        downsamplings: 1,
        res_blocks: 1,
    };
    Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn tiny_discriminator(seed: u64) -> Discriminator<f64> {
    let cfg = DiscriminatorConfig {
        channels: 1,
        resolution: 8,
        ndf: 2,
        layers: 1,
    };
    Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Parameter and input gradients of a generator under a fixed linear loss.
pub fn generator() -> (f64, f64) {
    let mut g = tiny_generator(1);
    let x = input(&[2, 1, 8, 8], 0.3);
    let (y, cache) = g.forward(&x);
    let c = input(y.shape(), 1.7);
    let dx = g.backward(&cache, &c, true).unwrap();
    let template = g.clone();
    let r = check_store(&mut g.params, 6, 1e-6, 1e-7, |ps| {
        let mut m = template.clone();
        m.params = ps.clone();
        dot(&m.forward(&x).0, &c)
    });

    let eps = 1e-6;
    let mut worst_input = 0.0f64;
    for i in (0..x.len()).step_by(7) {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let up = dot(&template.forward(&xp).0, &c);
        xp.data_mut()[i] -= 2.0 * eps;
        let down = dot(&template.forward(&xp).0, &c);
        let num = (up - down) / (2.0 * eps);
        let rel = (num - dx.data()[i]).abs() / (num.abs() + dx.data()[i].abs()).max(1e-7);
        worst_input = worst_input.max(rel);
    }
    (r.max_rel_error, worst_input)
}

pub fn discriminator() -> f64 {
    let mut d = tiny_discriminator(2);
    let x = input(&[2, 1, 8, 8], 0.9);
    let (s, cache) = d.forward(&x);
    let (_, ds) = lsgan_with_grad(&s, 1.0);
    d.backward(&cache, &ds, false);
    let template = d.clone();
    check_store(&mut d.params, 8, 1e-6, 1e-7, |ps| {
        let mut m = template.clone();
        m.params = ps.clone();
        lsgan_with_grad(&m.forward(&x).0, 1.0).0
    })
    .max_rel_error
}

/// Generator objective for one direction: adversarial term through a fixed
/// discriminator plus a weighted cycle term through the reverse generator.
pub fn generator_objective() -> f64 {
    let mut g01 = tiny_generator(3);
    let mut g10 = tiny_generator(4);
    let mut d1 = tiny_discriminator(5);
    let lambda = 10.0;
    let x = input(&[2, 1, 8, 8], 2.1);
    let objective = |g01: &Generator<f64>, g10: &Generator<f64>, d1: &Discriminator<f64>| {
        let (y, _) = g01.forward(&x);
        let adv = lsgan_with_grad(&d1.forward(&y).0, 1.0).0;
        let cyc = l1_with_grad(&g10.forward(&y).0, &x).0;
        adv + lambda * cyc
    };

    let (y, gc) = g01.forward(&x);
    let (s, dc) = d1.forward(&y);
    let (_, ds) = lsgan_with_grad(&s, 1.0);
    let mut dy = d1.backward(&dc, &ds, true).unwrap();
    let (rec, rc) = g10.forward(&y);
    let (_, drec) = l1_with_grad(&rec, &x);
    let drec = drec.map(|v| v * lambda);
    dy.add_assign(&g10.backward(&rc, &drec, true).unwrap());
    g01.backward(&gc, &dy, false);

    let (t10, td1) = (g10.clone(), d1.clone());
    let template = g01.clone();
    check_store(&mut g01.params, 6, 1e-6, 1e-7, |ps| {
        let mut m = template.clone();
        m.params = ps.clone();
        objective(&m, &t10, &td1)
    })
    .max_rel_error
}

fn bce_from_logits(z: &[f64], labels: &[u8]) -> f64 {
    z.iter()
        .zip(labels)
        .map(|(&z, &l)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(l as f64 * p.ln() + (1.0 - l as f64) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / z.len() as f64
}

/// Classifier in training mode under binary cross-entropy. Returns the worst
/// relative error and how many coordinates were probed.
pub fn classifier() -> (f64, usize) {
    let cfg = DenseNetConfig {
        channels: 1,
        resolution: 8,
        init_features: 4,
        growth_rate: 2,
        block_config: vec![2, 1],
        bn_size: 2,
        compression: 0.5,
        stem: Stem::Small,
        input_mean: 0.5,
        input_std: 0.5,
    };
    let mut model = DenseNet::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    // a larger head than the default init so the signal is not tiny
    for (i, w) in model.head_weights_mut().iter_mut().enumerate() {
        *w = 0.5 * ((i as f64) * 1.1).sin();
    }
    let x = input(&[4, 1, 8, 8], 0.4);
    let labels = [1u8, 0, 0, 1];
    let template = model.clone();
    let (z, cache) = model.forward_train(&x);
    let n = z.len() as f64;
    let dz: Vec<f64> = z
        .iter()
        .zip(&labels)
        .map(|(&z, &l)| (1.0 / (1.0 + (-z).exp()) - l as f64) / n)
        .collect();
    model.backward(&cache, &dz);
    let r = check_store(&mut model.params, 6, 1e-6, 1e-7, |ps| {
        let mut m = template.clone();
        m.params = ps.clone();
        bce_from_logits(&m.forward_train(&x).0, &labels)
    });
    (r.max_rel_error, r.probed)
}
