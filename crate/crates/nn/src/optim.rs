use crate::checkpoint::Checkpoint;
use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Adam with bias-corrected moments, one moment pair per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(ps: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<T>> = ps.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated gradients. Gradients are left untouched.
    pub fn step(&mut self, ps: &mut ParamStore<T>) {
        self.t += 1;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        let lr = lit::<T>(self.lr);
        let eps = lit::<T>(self.eps);
        for ((p, m), v) in ps.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grads = p.grad.data();
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Stores moments under `<prefix>.m.<param>` / `<prefix>.v.<param>`.
    pub fn save(&self, ps: &ParamStore<T>, prefix: &str, ckpt: &mut Checkpoint) {
        for ((p, m), v) in ps.iter().zip(&self.m).zip(&self.v) {
            ckpt.put(format!("{prefix}.m.{}", p.name), m);
            ckpt.put(format!("{prefix}.v.{}", p.name), v);
        }
    }

    pub fn load(
        ps: &ParamStore<T>,
        prefix: &str,
        ckpt: &Checkpoint,
        lr: f64,
        beta1: f64,
        beta2: f64,
        t: u64,
    ) -> Result<Self> {
        let mut opt = Self::new(ps, lr, beta1, beta2);
        opt.t = t;
        for ((p, m), v) in ps.iter().zip(&mut opt.m).zip(&mut opt.v) {
            let lm: Tensor<T> = ckpt.get(&format!("{prefix}.m.{}", p.name))?;
            let lv: Tensor<T> = ckpt.get(&format!("{prefix}.v.{}", p.name))?;
            if lm.shape() != p.value.shape() || lv.shape() != p.value.shape() {
                return Err(NnError::Shape(format!("optimizer state shape for {}", p.name)));
            }
            *m = lm;
            *v = lv;
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut ps = ParamStore::<f32>::new();
        let id = ps.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap(), true);
        ps.grad_mut(id).data_mut().copy_from_slice(&[0.5, 0.1, -4.0]);
        let before = ps.clone();
        let mut opt = Adam::new(&ps, 0.0, 0.5, 0.999);
        opt.step(&mut ps);
        assert_eq!(ps.max_abs_diff(&before), 0.0);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), true);
        ps.grad_mut(id).data_mut().copy_from_slice(&[2.0, -3.0]);
        let mut opt = Adam::new(&ps, 0.01, 0.9, 0.999);
        opt.step(&mut ps);
        let w = ps.value(id).data();
        assert!((w[0] + 0.01).abs() < 1e-8);
        assert!((w[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("running", Tensor::full(&[2], 1.0), false);
        ps.grad_mut(id).fill(5.0);
        let mut opt = Adam::new(&ps, 0.1, 0.9, 0.999);
        opt.step(&mut ps);
        assert_eq!(ps.value(id).data(), &[1.0, 1.0]);
    }
}
