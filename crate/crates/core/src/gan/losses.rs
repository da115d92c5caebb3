use cyclebalance_nn::{Scalar, Tensor};

use super::networks::{Discriminator, Generator};
use crate::error::{Error, Result};

/// Anything that maps an image batch to an image batch of the same shape.
pub trait Translator<T: Scalar> {
    fn translate(&self, batch: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Translator<T> for Generator<T> {
    fn translate(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Generator::translate(self, batch)
    }
}

impl<T: Scalar, F: Fn(&Tensor<T>) -> Tensor<T>> Translator<T> for F {
    fn translate(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self(batch))
    }
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1_with_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    let n = T::from_usize(pred.len().max(1)).expect("len");
    let diff = pred.zip_map(target, |a, b| a - b);
    let loss = diff.data().iter().map(|d| d.abs()).sum::<T>() / n;
    let grad = diff.map(|d| {
        if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    (loss, grad)
}

/// `mean((s - target)²)` and its gradient.
pub fn lsgan_with_grad<T: Scalar>(scores: &Tensor<T>, target: T) -> (T, Tensor<T>) {
    let n = T::from_usize(scores.len().max(1)).expect("len");
    let two = T::one() + T::one();
    let loss = scores.data().iter().map(|&s| (s - target) * (s - target)).sum::<T>() / n;
    (loss, scores.map(|s| two * (s - target) / n))
}

/// Least-squares objectives from raw patch scores:
/// `d = mean((D(real)-1)²) + mean(D(fake)²)`, `g = mean((D(fake)-1)²)`.
pub fn lsgan_losses<T: Scalar>(real_scores: &Tensor<T>, fake_scores: &Tensor<T>) -> Result<(T, T)> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Invalid("empty score grid".into()));
    }
    if !real_scores.all_finite() || !fake_scores.all_finite() {
        return Err(Error::Invalid("non-finite discriminator scores".into()));
    }
    let (real, _) = lsgan_with_grad(real_scores, T::one());
    let (fake, _) = lsgan_with_grad(fake_scores, T::zero());
    let (g, _) = lsgan_with_grad(fake_scores, T::one());
    Ok((real + fake, g))
}

/// `(d_loss, g_loss)` for one discriminator on a real and a generated batch.
pub fn adversarial_loss<T: Scalar>(
    disc: &Discriminator<T>,
    real_batch: &Tensor<T>,
    fake_batch: &Tensor<T>,
) -> Result<(T, T)> {
    let real = disc.scores(real_batch)?;
    let fake = disc.scores(fake_batch)?;
    lsgan_losses(&real, &fake)
}

/// `mean|g10(g01(x0)) - x0| + mean|g01(g10(x1)) - x1|`.
pub fn cycle_loss<T: Scalar, A: Translator<T> + ?Sized, B: Translator<T> + ?Sized>(
    g01: &A,
    g10: &B,
    batch0: &Tensor<T>,
    batch1: &Tensor<T>,
) -> Result<T> {
    if batch0.is_empty() || batch1.is_empty() {
        return Err(Error::Invalid("cycle loss needs non-empty batches".into()));
    }
    let rec0 = g10.translate(&g01.translate(batch0)?)?;
    let rec1 = g01.translate(&g10.translate(batch1)?)?;
    if rec0.shape() != batch0.shape() || rec1.shape() != batch1.shape() {
        return Err(Error::Shape("translation changed the batch shape".into()));
    }
    if !rec0.all_finite() || !rec1.all_finite() {
        return Err(Error::Invalid("non-finite reconstruction in cycle loss".into()));
    }
    let (a, _) = l1_with_grad(&rec0, batch0);
    let (b, _) = l1_with_grad(&rec1, batch1);
    Ok(a + b)
}
