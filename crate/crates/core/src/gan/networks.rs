use cyclebalance_nn::{ops, Conv2d, Init, ParamStore, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IN_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

/// Residual translation network: 7×7 stem, strided downsampling, residual
/// blocks, nearest-upsample + 3×3 conv, 7×7 head with `tanh`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub resolution: usize,
    pub ngf: usize,
    pub downsamplings: usize,
    pub res_blocks: usize,
}

/// Patch discriminator: strided 4×4 convs with leaky ReLU, one score per patch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub resolution: usize,
    pub ndf: usize,
    pub layers: usize,
}

/// Conv → instance norm → activation, with what backward needs.
#[derive(Clone, Debug)]
struct NormAct<T> {
    conv_in: Tensor<T>,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    out: Tensor<T>,
}

fn conv_norm_relu<T: Scalar>(conv: &Conv2d, ps: &ParamStore<T>, conv_in: Tensor<T>) -> NormAct<T> {
    let z = conv.forward(ps, &conv_in);
    let (xhat, inv_std) = ops::instance_norm(&z, T::from_f64_lossy(IN_EPS));
    let out = ops::relu(&xhat);
    NormAct {
        conv_in,
        xhat,
        inv_std,
        out,
    }
}

fn conv_norm_relu_backward<T: Scalar>(
    conv: &Conv2d,
    ps: &mut ParamStore<T>,
    c: &NormAct<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let dn = ops::relu_backward(&c.out, dy);
    let dz = ops::instance_norm_backward(&c.xhat, &c.inv_std, &dn);
    conv.backward(ps, &c.conv_in, &dz, need_dx)
}

#[derive(Clone, Debug)]
struct ResCache<T> {
    first: NormAct<T>,
    second_in: Tensor<T>,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// Activations of one generator forward pass.
#[derive(Clone, Debug)]
pub struct GeneratorCache<T> {
    stem: NormAct<T>,
    downs: Vec<NormAct<T>>,
    res: Vec<ResCache<T>>,
    ups: Vec<NormAct<T>>,
    head_in: Tensor<T>,
    out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    res: Vec<[Conv2d; 2]>,
    ups: Vec<Conv2d>,
    head: Conv2d,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        let factor = 1usize << config.downsamplings;
        if config.resolution % factor != 0 || config.resolution / factor < 2 {
            return Err(Error::Invalid(format!(
                "resolution {} incompatible with {} downsamplings",
                config.resolution, config.downsamplings
            )));
        }
        if config.resolution < 4 || config.ngf == 0 || config.channels == 0 {
            return Err(Error::Invalid("generator needs resolution >= 4 and positive widths".into()));
        }
        let init = Init::Normal(0.02);
        let mut ps = ParamStore::new();
        let ngf = config.ngf;
        let stem = Conv2d::new(&mut ps, "stem", config.channels, ngf, 7, 1, 0, false, init, rng);
        let mut ch = ngf;
        let mut downs = Vec::new();
        for i in 0..config.downsamplings {
            downs.push(Conv2d::new(&mut ps, &format!("down{i}"), ch, ch * 2, 3, 2, 1, false, init, rng));
            ch *= 2;
        }
        let res = (0..config.res_blocks)
            .map(|i| {
                [
                    Conv2d::new(&mut ps, &format!("res{i}.conv1"), ch, ch, 3, 1, 0, false, init, rng),
                    Conv2d::new(&mut ps, &format!("res{i}.conv2"), ch, ch, 3, 1, 0, false, init, rng),
                ]
            })
            .collect();
        let mut ups = Vec::new();
        for i in 0..config.downsamplings {
            ups.push(Conv2d::new(&mut ps, &format!("up{i}"), ch, ch / 2, 3, 1, 1, false, init, rng));
            ch /= 2;
        }
        let head = Conv2d::new(&mut ps, "head", ch, config.channels, 7, 1, 0, true, init, rng);
        Ok(Self {
            config,
            params: ps,
            stem,
            downs,
            res,
            ups,
            head,
        })
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.channels || s[2] != c.resolution || s[3] != c.resolution {
            return Err(Error::Shape(format!(
                "generator expects [B, {}, {}, {}], got {:?}",
                c.channels, c.resolution, c.resolution, s
            )));
        }
        if !x.all_finite() {
            return Err(Error::Invalid("non-finite generator input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, GeneratorCache<T>) {
        let ps = &self.params;
        let stem = conv_norm_relu(&self.stem, ps, ops::reflect_pad(x, 3));
        let mut h = stem.out.clone();
        let mut downs = Vec::with_capacity(self.downs.len());
        for conv in &self.downs {
            let c = conv_norm_relu(conv, ps, h);
            h = c.out.clone();
            downs.push(c);
        }
        let mut res = Vec::with_capacity(self.res.len());
        for [c1, c2] in &self.res {
            let first = conv_norm_relu(c1, ps, ops::reflect_pad(&h, 1));
            let second_in = ops::reflect_pad(&first.out, 1);
            let z = c2.forward(ps, &second_in);
            let (xhat, inv_std) = ops::instance_norm(&z, T::from_f64_lossy(IN_EPS));
            h.add_assign(&xhat);
            res.push(ResCache {
                first,
                second_in,
                xhat,
                inv_std,
            });
        }
        let mut ups = Vec::with_capacity(self.ups.len());
        for conv in &self.ups {
            let c = conv_norm_relu(conv, ps, ops::upsample_nearest2x(&h));
            h = c.out.clone();
            ups.push(c);
        }
        let head_in = ops::reflect_pad(&h, 3);
        let out = ops::tanh(&self.head.forward(ps, &head_in));
        (
            out.clone(),
            GeneratorCache {
                stem,
                downs,
                res,
                ups,
                head_in,
                out,
            },
        )
    }

    /// Accumulates parameter gradients for `dy = ∂L/∂output`; returns `∂L/∂input` if asked.
    pub fn backward(&mut self, cache: &GeneratorCache<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let ps = &mut self.params;
        let dz = ops::tanh_backward(&cache.out, dy);
        let dhead = self.head.backward(ps, &cache.head_in, &dz, true).expect("dx");
        let mut dh = ops::reflect_pad_backward(&dhead, 3);
        for (conv, c) in self.ups.iter().zip(&cache.ups).rev() {
            let dup = conv_norm_relu_backward(conv, ps, c, &dh, true).expect("dx");
            dh = ops::upsample_nearest2x_backward(&dup);
        }
        for ([c1, c2], rc) in self.res.iter().zip(&cache.res).rev() {
            let dz2 = ops::instance_norm_backward(&rc.xhat, &rc.inv_std, &dh);
            let dq2 = c2.backward(ps, &rc.second_in, &dz2, true).expect("dx");
            let da = ops::reflect_pad_backward(&dq2, 1);
            let dq1 = conv_norm_relu_backward(c1, ps, &rc.first, &da, true).expect("dx");
            dh.add_assign(&ops::reflect_pad_backward(&dq1, 1));
        }
        for (conv, c) in self.downs.iter().zip(&cache.downs).rev() {
            dh = conv_norm_relu_backward(conv, ps, c, &dh, true).expect("dx");
        }
        conv_norm_relu_backward(&self.stem, ps, &cache.stem, &dh, need_dx).map(|d| ops::reflect_pad_backward(&d, 3))
    }

    /// Inference: shape-checked, deterministic, output in `[-1, 1]`.
    pub fn translate(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let (y, _) = self.forward(batch);
        if !y.all_finite() {
            return Err(Error::Invalid("generator produced non-finite output".into()));
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct DiscLayer {
    conv: Conv2d,
    norm: bool,
    act: bool,
}

#[derive(Clone, Debug)]
struct DiscLayerCache<T> {
    conv_in: Tensor<T>,
    xhat: Option<(Tensor<T>, Vec<T>)>,
    out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorCache<T> {
    layers: Vec<DiscLayerCache<T>>,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layers: Vec<DiscLayer>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut size = config.resolution;
        for _ in 0..config.layers {
            size = ops::checked_out_size(size, 4, 2, 1)
                .ok_or_else(|| Error::Invalid(format!("resolution {} too small for discriminator", config.resolution)))?;
        }
        for _ in 0..2 {
            size = ops::checked_out_size(size, 4, 1, 1)
                .ok_or_else(|| Error::Invalid(format!("resolution {} too small for discriminator", config.resolution)))?;
        }
        if config.layers == 0 || config.ndf == 0 {
            return Err(Error::Invalid("discriminator needs at least one layer".into()));
        }
        let init = Init::Normal(0.02);
        let mut ps = ParamStore::new();
        let mut layers = vec![DiscLayer {
            conv: Conv2d::new(&mut ps, "conv0", config.channels, config.ndf, 4, 2, 1, true, init, rng),
            norm: false,
            act: true,
        }];
        let mut nf = config.ndf;
        for i in 1..config.layers {
            let next = config.ndf * (1 << i.min(3));
            layers.push(DiscLayer {
                conv: Conv2d::new(&mut ps, &format!("conv{i}"), nf, next, 4, 2, 1, false, init, rng),
                norm: true,
                act: true,
            });
            nf = next;
        }
        let next = config.ndf * (1 << config.layers.min(3));
        layers.push(DiscLayer {
            conv: Conv2d::new(&mut ps, &format!("conv{}", config.layers), nf, next, 4, 1, 1, false, init, rng),
            norm: true,
            act: true,
        });
        layers.push(DiscLayer {
            conv: Conv2d::new(&mut ps, "score", next, 1, 4, 1, 1, true, init, rng),
            norm: false,
            act: false,
        });
        Ok(Self {
            config,
            params: ps,
            layers,
        })
    }

    /// Patch scores `[B, 1, h, w]`.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, DiscriminatorCache<T>) {
        let slope = T::from_f64_lossy(LEAK);
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let z = l.conv.forward(&self.params, &h);
            let (z, xhat) = if l.norm {
                let (n, inv) = ops::instance_norm(&z, T::from_f64_lossy(IN_EPS));
                (n.clone(), Some((n, inv)))
            } else {
                (z, None)
            };
            let out = if l.act { ops::leaky_relu(&z, slope) } else { z };
            caches.push(DiscLayerCache {
                conv_in: h,
                xhat,
                out: out.clone(),
            });
            h = out;
        }
        (h, DiscriminatorCache { layers: caches })
    }

    pub fn backward(&mut self, cache: &DiscriminatorCache<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let slope = T::from_f64_lossy(LEAK);
        let mut g = dy.clone();
        for (i, (l, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            if l.act {
                g = ops::leaky_relu_backward(&c.out, &g, slope);
            }
            if let Some((xhat, inv)) = &c.xhat {
                g = ops::instance_norm_backward(xhat, inv, &g);
            }
            let want = i > 0 || need_dx;
            match l.conv.backward(&mut self.params, &c.conv_in, &g, want) {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }

    pub fn scores(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.channels || s[2] != c.resolution || s[3] != c.resolution {
            return Err(Error::Shape(format!(
                "discriminator expects [B, {}, {}, {}], got {:?}",
                c.channels, c.resolution, c.resolution, s
            )));
        }
        Ok(self.forward(x).0)
    }
}
