use std::path::Path;

use cyclebalance_nn::{Scalar, Tensor};
use image::{Rgb, RgbImage};

use crate::augment::min_max;
use crate::classifier::DenseNet;
use crate::data::{batch_of, resize_bilinear, save_rgb_png, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CaMap {
    pub sample_id: String,
    /// `[H, W]` at the classifier input resolution, values in `[0, 1]`.
    pub heatmap: Tensor<f64>,
    pub probability: f64,
}

impl CaMap {
    /// `(x, y)` of the largest heatmap value (first in row-major order).
    pub fn argmax(&self) -> (usize, usize) {
        let w = self.heatmap.shape()[1];
        let mut best = 0;
        for (i, &v) in self.heatmap.data().iter().enumerate() {
            if v > self.heatmap.data()[best] {
                best = i;
            }
        }
        (best % w, best / w)
    }
}

/// `Σ_k w_k · f_k` for one sample's feature maps `[K, h, w]`.
pub fn cam_raw(features: &Tensor<f64>, weights: &[f64]) -> Result<Tensor<f64>> {
    let s = features.shape();
    if s.len() != 3 || s[0] != weights.len() {
        return Err(Error::Shape(format!(
            "{} head weights for feature maps {:?}",
            weights.len(),
            s
        )));
    }
    let hw = s[1] * s[2];
    let mut out = vec![0.0; hw];
    for (k, &wk) in weights.iter().enumerate() {
        for (o, &f) in out.iter_mut().zip(&features.data()[k * hw..(k + 1) * hw]) {
            *o += wk * f;
        }
    }
    Ok(Tensor::from_vec(&[s[1], s[2]], out)?)
}

/// Raw map bilinearly resized to `resolution`, then min-max scaled.
pub fn cam_heatmap(raw: &Tensor<f64>, resolution: usize) -> Result<Tensor<f64>> {
    let (h, w) = (raw.shape()[0], raw.shape()[1]);
    let up = resize_bilinear(&raw.clone().reshape(&[1, h, w])?, resolution, resolution);
    Ok(Tensor::from_vec(&[resolution, resolution], min_max(up.into_vec()))?)
}

pub fn compute_cam<T: Scalar>(model: &DenseNet<T>, sample: &Sample<T>) -> Result<CaMap> {
    let out = model.forward(&batch_of(&[sample])?, true)?;
    let feats = out.features.expect("requested features");
    let s = feats.shape();
    let feats: Tensor<f64> = feats.cast::<f64>().reshape(&[s[1], s[2], s[3]])?;
    let weights: Vec<f64> = model
        .head_weights()
        .iter()
        .map(|w| w.to_f64().unwrap_or(f64::NAN))
        .collect();
    let raw = cam_raw(&feats, &weights)?;
    Ok(CaMap {
        sample_id: sample.id.clone(),
        heatmap: cam_heatmap(&raw, model.config.resolution)?,
        probability: out.probabilities[0].to_f64().unwrap_or(f64::NAN),
    })
}

/// Blue → green → red ramp.
fn heat_colour(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v < 0.5 {
        [0.0, 2.0 * v, 1.0 - 2.0 * v]
    } else {
        [2.0 * v - 1.0, 2.0 - 2.0 * v, 0.0]
    }
}

/// Heatmap alpha-blended over the channel-averaged input image.
pub fn cam_overlay<T: Scalar>(sample: &Sample<T>, cam: &CaMap, alpha: f64, path: &Path) -> Result<()> {
    let s = sample.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if cam.heatmap.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "heatmap {:?} over image {:?}",
            cam.heatmap.shape(),
            s
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = (0..c)
                .map(|ch| sample.image.data()[ch * h * w + y * w + x].to_f64().unwrap_or(0.0))
                .sum::<f64>()
                / c as f64;
            let g = (g + 1.0) / 2.0;
            let hc = heat_colour(cam.heatmap.data()[y * w + x]);
            let px = hc.map(|v| (((1.0 - alpha) * g + alpha * v).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    save_rgb_png(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_features_give_zero_heatmap() {
        let f = Tensor::full(&[3, 4, 4], 0.7);
        let raw = cam_raw(&f, &[0.2, -1.0, 3.0]).unwrap();
        let h = cam_heatmap(&raw, 16).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indicator_patch_is_the_maximum() {
        let mut f = Tensor::zeros(&[2, 4, 4]);
        for (y, x) in [(1, 2), (1, 3), (2, 2), (2, 3)] {
            f.data_mut()[16 + y * 4 + x] = 1.0;
        }
        let raw = cam_raw(&f, &[0.0, 1.0]).unwrap();
        let h = cam_heatmap(&raw, 16).unwrap();
        // the patch covers rows 4..12 and columns 8..16 after 4× upsampling;
        // its interior (away from the bilinear ramp) is exactly 1
        for y in 6..10 {
            for x in 10..16 {
                assert_eq!(h.data()[y * 16 + x], 1.0, "({x},{y})");
            }
        }
        assert_eq!(h.data()[0], 0.0);
        let (x, y) = CaMap {
            sample_id: "s".into(),
            heatmap: h,
            probability: 0.5,
        }
        .argmax();
        assert!((8..16).contains(&x) && (4..12).contains(&y));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        assert!(cam_raw(&Tensor::zeros(&[3, 2, 2]), &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn raw_map_is_linear_in_weights(seed in 0u64..1000) {
            let f = Tensor::from_fn(&[5, 3, 3], |i| ((i as u64 * 7 + seed) as f64 * 0.37).sin());
            let w1: Vec<f64> = (0..5).map(|k| ((k as u64 + seed) as f64 * 1.3).cos()).collect();
            let w2: Vec<f64> = (0..5).map(|k| ((k as u64 * 3 + seed) as f64 * 0.7).sin()).collect();
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let a = cam_raw(&f, &w1).unwrap();
            let b = cam_raw(&f, &w2).unwrap();
            let c = cam_raw(&f, &sum).unwrap();
            for i in 0..9 {
                prop_assert!((c.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-6);
            }
        }
    }
}
