//! Deterministic synthetic benchmark: class 1 images carry a bright Gaussian
//! blob at a random location on noisy background, class 0 images are
//! background only.

use std::collections::BTreeMap;
use std::path::Path;

use cyclebalance_nn::{Scalar, Tensor};
use image::{ImageBuffer, Luma};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_manifest, DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCounts {
    pub class0: usize,
    pub class1: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub train: ClassCounts,
    pub validation: ClassCounts,
    /// Background level on the `[0, 1]` pixel scale.
    pub background: f64,
    pub noise_std: f64,
    pub blob_amplitude: f64,
    pub blob_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            train: ClassCounts {
                class0: 180,
                class1: 20,
            },
            validation: ClassCounts {
                class0: 45,
                class1: 5,
            },
            background: 0.35,
            noise_std: 0.05,
            blob_amplitude: 0.45,
            blob_sigma: 3.0,
        }
    }
}

/// Ground-truth location of the blob in one class-1 image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub path: String,
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl BlobRecord {
    /// Inclusive pixel box `(x0, y0, x1, y1)` covering centre ± 2σ.
    pub fn bounding_box(&self, size: usize) -> (usize, usize, usize, usize) {
        let r = 2.0 * self.sigma;
        let clip = |v: f64| v.round().clamp(0.0, (size - 1) as f64) as usize;
        (clip(self.cx - r), clip(self.cy - r), clip(self.cx + r), clip(self.cy + r))
    }

    pub fn contains(&self, x: usize, y: usize, size: usize) -> bool {
        let (x0, y0, x1, y1) = self.bounding_box(size);
        (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
    }
}

pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub blobs: Vec<BlobRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const BLOBS_FILE: &str = "blobs.csv";

/// Writes `manifest.csv`, `blobs.csv` and `<split>/<label>/<index>.png` under
/// `out_dir`. Output is a pure function of `(config, seed)`.
pub fn synth_benchmark(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    if config.size < 8 {
        return Err(Error::Invalid(format!("synthetic image size {} < 8", config.size)));
    }
    if !(config.noise_std >= 0.0 && config.blob_sigma > 0.0) {
        return Err(Error::Invalid("noise_std must be >= 0 and blob_sigma > 0".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    let mut blobs = Vec::new();
    for (split, counts) in [(Split::Train, config.train), (Split::Validation, config.validation)] {
        for (label, count) in [(0u8, counts.class0), (1u8, counts.class1)] {
            for idx in 0..count {
                let rel = format!("{split}/{label}/{idx:05}.png");
                let mut rng = seed::stream(seed, &format!("synth/{rel}"));
                let (pixels, blob) = render(config, label == 1, &mut rng);
                let path = out_dir.join(&rel);
                super::ensure_parent(&path)?;
                let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                    ImageBuffer::from_raw(config.size as u32, config.size as u32, pixels).expect("size");
                buf.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                if let Some((cx, cy)) = blob {
                    blobs.push(BlobRecord {
                        path: rel.clone(),
                        cx,
                        cy,
                        sigma: config.blob_sigma,
                        amplitude: config.blob_amplitude,
                    });
                }
                records.push(ManifestRecord {
                    path: rel,
                    label,
                    split,
                    source_id: None,
                });
            }
        }
    }
    let manifest = DatasetManifest::new(records, out_dir)?;
    save_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    save_blobs(&blobs, &out_dir.join(BLOBS_FILE))?;
    Ok(SynthOutput { manifest, blobs })
}

fn render(config: &SynthConfig, with_blob: bool, rng: &mut impl Rng) -> (Vec<u8>, Option<(f64, f64)>) {
    let n = config.size;
    let noise = Normal::new(0.0, config.noise_std.max(1e-12)).expect("std");
    let margin = (2.0 * config.blob_sigma).ceil().min((n / 2 - 1) as f64);
    let blob = with_blob.then(|| {
        let lo = margin;
        let hi = (n - 1) as f64 - margin;
        (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
    });
    let two_s2 = 2.0 * config.blob_sigma * config.blob_sigma;
    let mut px = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let mut v = config.background + noise.sample(rng);
            if let Some((cx, cy)) = blob {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                v += config.blob_amplitude * (-d2 / two_s2).exp();
            }
            px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    (px, blob)
}

pub fn save_blobs(blobs: &[BlobRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    for b in blobs {
        w.serialize(b).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Blob metadata keyed by manifest path.
pub fn load_blobs(path: &Path) -> Result<BTreeMap<String, BlobRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for rec in r.deserialize::<BlobRecord>() {
        let rec = rec.map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        out.insert(rec.path.clone(), rec);
    }
    Ok(out)
}

/// Maximum of the channel-averaged image after Gaussian smoothing with `sigma`:
/// a matched-filter response that is high when a blob is present.
pub fn blob_statistic<T: Scalar>(image: &Tensor<T>, sigma: f64) -> f64 {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut plane = vec![0.0; h * w];
    for ch in 0..c {
        for (i, p) in plane.iter_mut().enumerate() {
            *p += image.data()[ch * h * w + i].to_f64().unwrap_or(f64::NAN) / c as f64;
        }
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - i - 1;
            }
        }
        i as usize
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + reflect(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut best = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum();
            best = best.max(v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_image, load_manifest, preprocess};

    fn small() -> SynthConfig {
        SynthConfig {
            size: 16,
            train: ClassCounts { class0: 6, class1: 2 },
            validation: ClassCounts { class0: 3, class1: 1 },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let d = tempfile::tempdir().unwrap();
        let out = synth_benchmark(&small(), 3, d.path()).unwrap();
        let m = load_manifest(&d.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m, out.manifest);
        let counts = m.class_counts();
        assert_eq!(counts[&Split::Train], [6, 2]);
        assert_eq!(counts[&Split::Validation], [3, 1]);
        assert_eq!(load_blobs(&d.path().join(BLOBS_FILE)).unwrap().len(), 3);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_benchmark(&small(), 7, a.path()).unwrap();
        synth_benchmark(&small(), 7, b.path()).unwrap();
        synth_benchmark(&small(), 8, c.path()).unwrap();
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        for f in ["train/0/00000.png", "train/1/00001.png", "validation/1/00000.png", "blobs.csv", "manifest.csv"] {
            assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
        }
        assert_ne!(read(a.path(), "train/1/00000.png"), read(c.path(), "train/1/00000.png"));
    }

    #[test]
    fn blob_statistic_separates_classes() {
        let d = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            size: 32,
            ..small()
        };
        let out = synth_benchmark(&cfg, 11, d.path()).unwrap();
        let stat = |p: &str| {
            let img: Tensor<f64> = preprocess(&load_image(&d.path().join(p)).unwrap(), 32, 1).unwrap();
            blob_statistic(&img, cfg.blob_sigma)
        };
        let pos: Vec<f64> = out.blobs.iter().map(|b| stat(&b.path)).collect();
        let neg: Vec<f64> = out
            .manifest
            .records
            .iter()
            .filter(|r| r.label == 0)
            .map(|r| stat(&r.path))
            .collect();
        let max_neg = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(pos.iter().all(|&p| p > max_neg), "{pos:?} vs {max_neg}");
    }

    #[test]
    fn bounding_box_contains_centre() {
        let b = BlobRecord {
            path: "x".into(),
            cx: 10.4,
            cy: 50.0,
            sigma: 3.0,
            amplitude: 1.0,
        };
        assert!(b.contains(10, 50, 64));
        assert!(b.contains(16, 56, 64));
        assert!(!b.contains(17, 50, 64));
    }
}
