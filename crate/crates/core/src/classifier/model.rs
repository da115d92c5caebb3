use cyclebalance_nn::{ops, BatchNorm2d, BatchNormCache, Conv2d, Init, Linear, ParamStore, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 7×7 stride-2 conv followed by 3×3 stride-2 max pooling.
    Full,
    /// 3×3 stride-2 conv, no pooling; for small inputs.
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub channels: usize,
    pub resolution: usize,
    pub init_features: usize,
    pub growth_rate: usize,
    pub block_config: Vec<usize>,
    pub bn_size: usize,
    pub compression: f64,
    pub stem: Stem,
    /// Inputs in `[-1, 1]` are mapped to `(x/2 + 1/2 - mean) / std` first.
    pub input_mean: f64,
    pub input_std: f64,
}

impl DenseNetConfig {
    /// The 121-layer configuration at 224×224.
    pub fn densenet121(channels: usize) -> Self {
        Self {
            channels,
            resolution: 224,
            init_features: 64,
            growth_rate: 32,
            block_config: vec![6, 12, 24, 16],
            bn_size: 4,
            compression: 0.5,
            stem: Stem::Full,
            input_mean: 0.5,
            input_std: 0.5,
        }
    }

    /// Channels of the final feature block.
    pub fn feature_channels(&self) -> usize {
        let mut c = self.init_features;
        for (i, &n) in self.block_config.iter().enumerate() {
            c += n * self.growth_rate;
            if i + 1 < self.block_config.len() {
                c = transition_width(c, self.compression);
            }
        }
        c
    }

    /// Spatial size of the final feature maps.
    pub fn feature_size(&self) -> usize {
        let mut s = ops::out_size(self.resolution, self.stem_kernel(), 2, self.stem_kernel() / 2);
        if self.stem == Stem::Full {
            s = ops::out_size(s, 3, 2, 1);
        }
        for _ in 1..self.block_config.len() {
            s /= 2;
        }
        s
    }

    fn stem_kernel(&self) -> usize {
        match self.stem {
            Stem::Full => 7,
            Stem::Small => 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.block_config.is_empty() || self.growth_rate == 0 || self.init_features == 0 || self.bn_size == 0 {
            return Err(Error::Invalid("dense network needs blocks and positive widths".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Invalid(format!("compression {} outside (0, 1]", self.compression)));
        }
        if !(self.input_std > 0.0) {
            return Err(Error::Invalid("input_std must be positive".into()));
        }
        if self.feature_size() == 0 || self.resolution < 4 {
            return Err(Error::Invalid(format!(
                "resolution {} too small for {} blocks",
                self.resolution,
                self.block_config.len()
            )));
        }
        Ok(())
    }
}

fn transition_width(c: usize, compression: f64) -> usize {
    ((c as f64 * compression).floor() as usize).max(1)
}

#[derive(Clone, Debug)]
struct DenseLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

#[derive(Clone, Debug)]
struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

/// Dense-connectivity backbone with a single-logit linear head on the
/// globally pooled final features.
#[derive(Clone, Debug)]
pub struct DenseNet<T> {
    pub config: DenseNetConfig,
    pub params: ParamStore<T>,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm2d,
    head: Linear,
}

#[derive(Clone, Debug)]
struct BnRelu<T> {
    bn: Option<BatchNormCache<T>>,
    out: Tensor<T>,
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    a1: BnRelu<T>,
    a2: BnRelu<T>,
}

#[derive(Clone, Debug)]
struct TransitionCache<T> {
    a: BnRelu<T>,
    conv_out_shape: Vec<usize>,
}

/// Activations kept by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct DenseNetCache<T> {
    stem_in: Tensor<T>,
    stem: BnRelu<T>,
    pool: Option<(Vec<usize>, Vec<usize>)>,
    blocks: Vec<(usize, Vec<LayerCache<T>>)>,
    transitions: Vec<TransitionCache<T>>,
    features: BnRelu<T>,
    pooled: Tensor<T>,
}

/// Result of an inference pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
    /// Final post-activation feature maps `[B, K, h, w]` when requested.
    pub features: Option<Tensor<T>>,
}

enum Ps<'a, T> {
    Eval(&'a ParamStore<T>),
    Train(&'a mut ParamStore<T>),
}

impl<T: Scalar> Ps<'_, T> {
    fn get(&self) -> &ParamStore<T> {
        match self {
            Ps::Eval(p) => p,
            Ps::Train(p) => p,
        }
    }

    fn bn_relu(&mut self, bn: &BatchNorm2d, x: &Tensor<T>) -> BnRelu<T> {
        let (y, cache) = match self {
            Ps::Eval(p) => (bn.forward_eval(p, x), None),
            Ps::Train(p) => {
                let (y, c) = bn.forward_train(p, x);
                (y, Some(c))
            }
        };
        BnRelu {
            bn: cache,
            out: ops::relu(&y),
        }
    }
}

fn bn_relu_backward<T: Scalar>(bn: &BatchNorm2d, ps: &mut ParamStore<T>, c: &BnRelu<T>, dy: &Tensor<T>) -> Tensor<T> {
    let dz = ops::relu_backward(&c.out, dy);
    bn.backward(ps, c.bn.as_ref().expect("training-mode cache"), &dz)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    ops::sigmoid_scalar(z)
}

impl<T: Scalar> DenseNet<T> {
    pub fn new(config: DenseNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let k = config.stem_kernel();
        let stem_conv = Conv2d::new(
            &mut ps,
            "stem.conv",
            config.channels,
            config.init_features,
            k,
            2,
            k / 2,
            false,
            Init::KaimingNormal,
            rng,
        );
        let stem_bn = BatchNorm2d::new(&mut ps, "stem.norm", config.init_features);
        let mut c = config.init_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let inner = config.bn_size * config.growth_rate;
        for (b, &n) in config.block_config.iter().enumerate() {
            let mut layers = Vec::new();
            for l in 0..n {
                let p = format!("block{b}.layer{l}");
                layers.push(DenseLayer {
                    bn1: BatchNorm2d::new(&mut ps, &format!("{p}.norm1"), c),
                    conv1: Conv2d::new(&mut ps, &format!("{p}.conv1"), c, inner, 1, 1, 0, false, Init::KaimingNormal, rng),
                    bn2: BatchNorm2d::new(&mut ps, &format!("{p}.norm2"), inner),
                    conv2: Conv2d::new(
                        &mut ps,
                        &format!("{p}.conv2"),
                        inner,
                        config.growth_rate,
                        3,
                        1,
                        1,
                        false,
                        Init::KaimingNormal,
                        rng,
                    ),
                });
                c += config.growth_rate;
            }
            blocks.push(layers);
            if b + 1 < config.block_config.len() {
                let out = transition_width(c, config.compression);
                transitions.push(Transition {
                    bn: BatchNorm2d::new(&mut ps, &format!("transition{b}.norm"), c),
                    conv: Conv2d::new(&mut ps, &format!("transition{b}.conv"), c, out, 1, 1, 0, false, Init::KaimingNormal, rng),
                });
                c = out;
            }
        }
        let final_bn = BatchNorm2d::new(&mut ps, "final.norm", c);
        let head = Linear::new(&mut ps, "head", c, 1, Init::Normal(0.01), rng);
        Ok(Self {
            config,
            params: ps,
            stem_conv,
            stem_bn,
            blocks,
            transitions,
            final_bn,
            head,
        })
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let c = &self.config;
        if s.len() != 4 || s[0] == 0 || s[1] != c.channels || s[2] != c.resolution || s[3] != c.resolution {
            return Err(Error::Shape(format!(
                "classifier expects [B, {}, {}, {}], got {:?}",
                c.channels, c.resolution, c.resolution, s
            )));
        }
        if !x.all_finite() {
            return Err(Error::Invalid("non-finite classifier input".into()));
        }
        Ok(())
    }

    /// Head weights, one per final feature channel.
    pub fn head_weights(&self) -> &[T] {
        self.params.value(self.head.weight).data()
    }

    pub fn head_weights_mut(&mut self) -> &mut [T] {
        self.params.value_mut(self.head.weight).data_mut()
    }

    pub fn head_bias(&self) -> T {
        self.params.value(self.head.bias).data()[0]
    }

    pub fn set_head_bias(&mut self, b: T) {
        self.params.value_mut(self.head.bias).data_mut()[0] = b;
    }

    fn walk(&self, mut ps: Ps<'_, T>, x: &Tensor<T>) -> (Vec<T>, DenseNetCache<T>) {
        let scale = T::from_f64_lossy(0.5 / self.config.input_std);
        let shift = T::from_f64_lossy((0.5 - self.config.input_mean) / self.config.input_std);
        let stem_in = x.map(|v| v * scale + shift);
        let z = self.stem_conv.forward(ps.get(), &stem_in);
        let stem = ps.bn_relu(&self.stem_bn, &z);
        let (mut h, pool) = if self.config.stem == Stem::Full {
            let (y, arg) = ops::max_pool(&stem.out, 3, 2, 1);
            (y, Some((arg, stem.out.shape().to_vec())))
        } else {
            (stem.out.clone(), None)
        };
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, layers) in self.blocks.iter().enumerate() {
            let c0 = h.shape()[1];
            let mut pieces = vec![h];
            let mut caches = Vec::with_capacity(layers.len());
            for layer in layers {
                let input = ops::concat_channels(&pieces.iter().collect::<Vec<_>>());
                let a1 = ps.bn_relu(&layer.bn1, &input);
                let z1 = layer.conv1.forward(ps.get(), &a1.out);
                let a2 = ps.bn_relu(&layer.bn2, &z1);
                let new = layer.conv2.forward(ps.get(), &a2.out);
                pieces.push(new);
                caches.push(LayerCache { a1, a2 });
            }
            h = ops::concat_channels(&pieces.iter().collect::<Vec<_>>());
            blocks.push((c0, caches));
            if let Some(t) = self.transitions.get(b) {
                let a = ps.bn_relu(&t.bn, &h);
                let z = t.conv.forward(ps.get(), &a.out);
                let conv_out_shape = z.shape().to_vec();
                h = ops::avg_pool2(&z);
                transitions.push(TransitionCache { a, conv_out_shape });
            }
        }
        let features = ps.bn_relu(&self.final_bn, &h);
        let pooled = ops::global_avg_pool(&features.out);
        let n = pooled.shape()[0];
        let pooled = { let l = pooled.len(); pooled.reshape(&[n, l / n]).expect("pooled shape") };
        let logits = self.head.forward(ps.get(), &pooled).into_vec();
        (
            logits,
            DenseNetCache {
                stem_in,
                stem,
                pool,
                blocks,
                transitions,
                features,
                pooled,
            },
        )
    }

    /// Inference with running batch-norm statistics.
    pub fn forward(&self, x: &Tensor<T>, want_features: bool) -> Result<ForwardOutput<T>> {
        self.check_input(x)?;
        let (logits, cache) = self.walk(Ps::Eval(&self.params), x);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("non-finite classifier activations".into()));
        }
        Ok(ForwardOutput {
            probabilities: logits.iter().map(|&z| sigmoid(z)).collect(),
            logits,
            features: want_features.then_some(cache.features.out),
        })
    }

    /// Training-mode pass: batch statistics, running averages updated.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Vec<T>, DenseNetCache<T>) {
        let mut ps = std::mem::take(&mut self.params);
        let out = self.walk(Ps::Train(&mut ps), x);
        self.params = ps;
        out
    }

    /// Accumulates parameter gradients for `dlogits = ∂L/∂logit`.
    pub fn backward(&mut self, cache: &DenseNetCache<T>, dlogits: &[T]) {
        let ps = &mut self.params;
        let n = dlogits.len();
        let dy = Tensor::from_vec(&[n, 1], dlogits.to_vec()).expect("logit grad shape");
        let dpooled = self.head.backward(ps, &cache.pooled, &dy);
        let fshape = cache.features.out.shape().to_vec();
        let dpooled = dpooled.reshape(&[n, fshape[1], 1, 1]).expect("pooled grad");
        let dfeat = ops::global_avg_pool_backward(&dpooled, &fshape);
        let mut dh = bn_relu_backward(&self.final_bn, ps, &cache.features, &dfeat);
        for b in (0..self.blocks.len()).rev() {
            if let Some(t) = self.transitions.get(b) {
                let tc = &cache.transitions[b];
                let dz = ops::avg_pool2_backward(&dh, &tc.conv_out_shape);
                let da = t.conv.backward(ps, &tc.a.out, &dz, true).expect("dx");
                dh = bn_relu_backward(&t.bn, ps, &tc.a, &da);
            }
            let (c0, caches) = &cache.blocks[b];
            let g = self.config.growth_rate;
            let mut sizes = vec![*c0];
            sizes.extend(std::iter::repeat_n(g, caches.len()));
            let mut grads = ops::split_channels(&dh, &sizes);
            for (l, (layer, lc)) in self.blocks[b].iter().zip(caches).enumerate().rev() {
                let dnew = grads.pop().expect("piece");
                let da2 = layer.conv2.backward(ps, &lc.a2.out, &dnew, true).expect("dx");
                let dz1 = bn_relu_backward(&layer.bn2, ps, &lc.a2, &da2);
                let da1 = layer.conv1.backward(ps, &lc.a1.out, &dz1, true).expect("dx");
                let dinput = bn_relu_backward(&layer.bn1, ps, &lc.a1, &da1);
                let mut in_sizes = vec![*c0];
                in_sizes.extend(std::iter::repeat_n(g, l));
                for (acc, part) in grads.iter_mut().zip(ops::split_channels(&dinput, &in_sizes)) {
                    acc.add_assign(&part);
                }
            }
            dh = grads.pop().expect("block input grad");
        }
        if let Some((arg, shape)) = &cache.pool {
            dh = ops::max_pool_backward(&dh, arg, shape);
        }
        let dz = bn_relu_backward(&self.stem_bn, ps, &cache.stem, &dh);
        self.stem_conv.backward(ps, &cache.stem_in, &dz, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    pub(crate) fn toy(resolution: usize) -> DenseNetConfig {
        DenseNetConfig {
            channels: 1,
            resolution,
            init_features: 4,
            growth_rate: 2,
            block_config: vec![2, 2],
            bn_size: 2,
            compression: 0.5,
            stem: Stem::Small,
            input_mean: 0.5,
            input_std: 0.5,
        }
    }

    #[test]
    fn densenet121_parameter_count() {
        let cfg = DenseNetConfig::densenet121(3);
        assert_eq!(cfg.feature_channels(), 1024);
        assert_eq!(cfg.feature_size(), 7);
        let m: DenseNet<f32> = DenseNet::new(cfg, &mut seed::stream(0, "m")).unwrap();
        // 6,953,856 in the feature extractor plus 1024 weights and a bias in the head
        assert_eq!(m.params.num_trainable(), 6_954_881);
        assert_eq!(m.head_weights().len(), 1024);
    }

    #[test]
    fn outputs_are_probabilities_and_features_have_head_width() {
        let m: DenseNet<f64> = DenseNet::new(toy(16), &mut seed::stream(1, "m")).unwrap();
        let x = Tensor::from_fn(&[3, 1, 16, 16], |i| (i as f64 * 0.71).sin());
        let out = m.forward(&x, true).unwrap();
        assert_eq!(out.probabilities.len(), 3);
        assert!(out.probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
        let f = out.features.unwrap();
        assert_eq!(f.shape(), &[3, m.head_weights().len(), 4, 4]);
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut m: DenseNet<f64> = DenseNet::new(toy(16), &mut seed::stream(1, "m")).unwrap();
        m.head_weights_mut().iter_mut().for_each(|w| *w = 0.0);
        m.set_head_bias(0.0);
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| (i as f64 * 0.3).cos());
        assert!(m.forward(&x, false).unwrap().probabilities.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn rejects_wrong_resolution() {
        let m: DenseNet<f64> = DenseNet::new(toy(16), &mut seed::stream(1, "m")).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(&[1, 1, 8, 8]), false), Err(Error::Shape(_))));
    }
}
