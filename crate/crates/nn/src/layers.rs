//! Layers with learnable parameters. Each layer only holds [`ParamId`]s; the
//! values live in the owning network's [`ParamStore`], so the same layer may be
//! applied several times per step with independent caches.

use rand::Rng;

use crate::ops;
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add_init(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            init,
            rng,
        );
        let bias = bias.then(|| ps.add_init(format!("{name}.bias"), &[out_channels], Init::Zeros, rng));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        ops::conv2d(
            x,
            ps.value(self.weight),
            self.bias.map(|b| ps.value(b)),
            self.stride,
            self.pad,
        )
    }

    /// Accumulates parameter gradients; `x` is the forward input.
    pub fn backward<T: Scalar>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let mut dw = Tensor::zeros(ps.value(self.weight).shape());
        let mut db = self.bias.map(|b| Tensor::zeros(ps.value(b).shape()));
        let dx = ops::conv2d_backward(
            x,
            ps.value(self.weight),
            dy,
            self.stride,
            self.pad,
            &mut dw,
            db.as_mut(),
            need_dx,
        );
        ps.grad_mut(self.weight).add_assign(&dw);
        if let (Some(b), Some(db)) = (self.bias, db) {
            ps.grad_mut(b).add_assign(&db);
        }
        dx
    }
}

/// Fully connected layer over `[N, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add_init(format!("{name}.weight"), &[out_features, in_features], init, rng);
        let bias = ps.add_init(format!("{name}.bias"), &[out_features], Init::Zeros, rng);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let n = x.shape()[0];
        assert_eq!(x.shape()[1], self.in_features, "linear input width");
        let (fi, fo) = (self.in_features, self.out_features);
        let b = ps.value(self.bias).data();
        let mut y = Tensor::from_fn(&[n, fo], |i| b[i % fo]);
        T::gemm(
            n,
            fi,
            fo,
            T::one(),
            x.data(),
            fi as isize,
            1,
            ps.value(self.weight).data(),
            1,
            fi as isize,
            T::one(),
            y.data_mut(),
            fo as isize,
            1,
        );
        y
    }

    pub fn backward<T: Scalar>(&self, ps: &mut ParamStore<T>, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let n = x.shape()[0];
        let (fi, fo) = (self.in_features, self.out_features);
        {
            let dw = ps.grad_mut(self.weight);
            // dW (fo×fi) += dyᵀ (fo×n) · x (n×fi)
            T::gemm(
                fo,
                n,
                fi,
                T::one(),
                dy.data(),
                1,
                fo as isize,
                x.data(),
                fi as isize,
                1,
                T::one(),
                dw.data_mut(),
                fi as isize,
                1,
            );
        }
        {
            let db = ps.grad_mut(self.bias);
            for (i, &g) in dy.data().iter().enumerate() {
                db.data_mut()[i % fo] += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, fi]);
        T::gemm(
            n,
            fo,
            fi,
            T::one(),
            dy.data(),
            fo as isize,
            1,
            ps.value(self.weight).data(),
            fi as isize,
            1,
            T::zero(),
            dx.data_mut(),
            fi as isize,
            1,
        );
        dx
    }
}

/// Batch normalisation over `(N, H, W)` per channel, with running statistics
/// kept as non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

/// What [`BatchNorm2d::backward`] needs from a training-mode forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.weight"), Tensor::full(&[channels], T::one()), true);
        let beta = ps.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true);
        let running_mean = ps.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false);
        let running_var = ps.add(
            format!("{name}.running_var"),
            Tensor::full(&[channels], T::one()),
            false,
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalises with batch statistics and updates the running averages.
    pub fn forward_train<T: Scalar>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
    ) -> (Tensor<T>, BatchNormCache<T>) {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = n * hw;
        let m = T::from_usize(count).expect("count");
        let eps = lit::<T>(self.eps);
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mean = s / m;
            let mut v = T::zero();
            for b in 0..n {
                v += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|&q| (q - mean) * (q - mean))
                    .sum::<T>();
            }
            means[ch] = mean;
            vars[ch] = v / m;
        }
        let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let gamma = ps.value(self.gamma).data().to_vec();
        let beta = ps.value(self.beta).data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let xh = (x.data()[i] - means[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let mom = lit::<T>(self.momentum);
        let unbias = if count > 1 {
            m / (m - T::one())
        } else {
            T::one()
        };
        for ch in 0..c {
            let rm = &mut ps.value_mut(self.running_mean).data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * means[ch];
            let rv = &mut ps.value_mut(self.running_var).data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * vars[ch] * unbias;
        }
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn forward_eval<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let eps = lit::<T>(self.eps);
        let gamma = ps.value(self.gamma).data();
        let beta = ps.value(self.beta).data();
        let rm = ps.value(self.running_mean).data();
        let rv = ps.value(self.running_var).data();
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let scale = gamma[ch] / (rv[ch] + eps).sqrt();
                let shift = beta[ch] - rm[ch] * scale;
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    y.data_mut()[i] = x.data()[i] * scale + shift;
                }
            }
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &BatchNormCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (n, c, h, w) = dy.dims4();
        let hw = h * w;
        let m = T::from_usize(n * hw).expect("count");
        let gamma = ps.value(self.gamma).data().to_vec();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    dgamma[ch] += dy.data()[i] * cache.xhat.data()[i];
                    dbeta[ch] += dy.data()[i];
                }
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        for b in 0..n {
            for ch in 0..c {
                // dxhat = dy·γ; dx = inv/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                let k = gamma[ch] * cache.inv_std[ch] / m;
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    dx.data_mut()[i] =
                        k * (m * dy.data()[i] - dbeta[ch] - cache.xhat.data()[i] * dgamma[ch]);
                }
            }
        }
        for (g, v) in ps.grad_mut(self.gamma).data_mut().iter_mut().zip(&dgamma) {
            *g += *v;
        }
        for (g, v) in ps.grad_mut(self.beta).data_mut().iter_mut().zip(&dbeta) {
            *g += *v;
        }
        dx
    }
}
