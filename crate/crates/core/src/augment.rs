//! Balanced training sets from label-flipped complements: every original gets
//! exactly one generated partner carrying the opposite label.

use std::collections::HashMap;
use std::path::Path;

use cyclebalance_nn::{Scalar, Tensor};

use crate::data::{
    dequantize_u16, ensure_parent, load_samples, quantize_u16, save_image_png16, save_manifest, DatasetManifest,
    ManifestRecord, Provenance, Sample, Split,
};
use crate::error::{Error, Result};
use crate::gan::GeneratorPair;

pub const GENERATED_SUFFIX: &str = "__gen";

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDataset<T> {
    pub originals: Vec<Sample<T>>,
    pub generated: Vec<Sample<T>>,
    pub manifest: DatasetManifest,
}

impl<T: Scalar> AugmentedDataset<T> {
    pub fn samples(&self) -> impl Iterator<Item = &Sample<T>> {
        self.originals.iter().chain(&self.generated)
    }

    /// `[count(label 0), count(label 1)]` over originals and complements.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0, 0];
        for s in self.samples() {
            c[s.label as usize] += 1;
        }
        c
    }
}

pub fn generated_id(source_id: &str) -> String {
    format!("{source_id}{GENERATED_SUFFIX}")
}

/// Translates every class-0 sample with `g01` and every class-1 sample with
/// `g10`, labelling each result with the flipped label. Generated pixels are
/// snapped to the 16-bit grid used on disk so a persisted dataset reloads
/// exactly.
pub fn augment<T: Scalar>(
    train: &[Sample<T>],
    pair: &GeneratorPair<T>,
    batch_size: usize,
) -> Result<AugmentedDataset<T>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let want = [pair.channels(), pair.resolution(), pair.resolution()];
    for s in train {
        if s.provenance != Provenance::Original || s.split != Split::Train {
            return Err(Error::Invalid(format!(
                "{}: only original training samples can be augmented",
                s.id
            )));
        }
        if s.image.shape() != want {
            return Err(Error::Shape(format!(
                "{}: image {:?} but generators expect {:?}",
                s.id,
                s.image.shape(),
                want
            )));
        }
    }
    let mut generated: Vec<Option<Sample<T>>> = vec![None; train.len()];
    for label in [0u8, 1] {
        let gen = if label == 0 { &pair.g01 } else { &pair.g10 };
        let idx: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == label).collect();
        for chunk in idx.chunks(batch_size) {
            let refs: Vec<&Sample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let out = gen.translate(&crate::data::batch_of(&refs)?)?;
            if !out.all_finite() {
                return Err(Error::Invalid(format!(
                    "generator produced non-finite output for {}",
                    refs[0].id
                )));
            }
            for (k, &i) in chunk.iter().enumerate() {
                let src = &train[i];
                let img = out
                    .slice_batch(k)
                    .reshape(src.image.shape())?
                    .map(|v| T::from_f64_lossy(dequantize_u16(quantize_u16(v.to_f64().unwrap_or(0.0)))));
                generated[i] = Some(Sample {
                    id: generated_id(&src.id),
                    image: img,
                    label: 1 - label,
                    split: Split::Train,
                    provenance: Provenance::Generated,
                    source_id: Some(src.id.clone()),
                });
            }
        }
    }
    let generated: Vec<Sample<T>> = generated.into_iter().map(|g| g.expect("every sample translated")).collect();
    let records = train
        .iter()
        .chain(&generated)
        .map(|s| ManifestRecord {
            path: format!("{}.png", s.id),
            label: s.label,
            split: Split::Train,
            source_id: s.source_id.clone(),
        })
        .collect();
    Ok(AugmentedDataset {
        originals: train.to_vec(),
        generated,
        manifest: DatasetManifest::new(records, ".")?,
    })
}

/// Writes the dataset under `out_dir`: originals are copied byte-for-byte from
/// `source` (keeping their relative layout), complements are saved as 16-bit
/// PNG next to them, and `manifest.csv` lists both. Returns the written
/// manifest and stores it in `aug`.
pub fn save_augmented<T: Scalar>(
    aug: &mut AugmentedDataset<T>,
    source: &DatasetManifest,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let by_id: HashMap<String, &ManifestRecord> = source
        .records
        .iter()
        .map(|r| (crate::data::sample_id(&r.path), r))
        .collect();
    let mut records = Vec::with_capacity(aug.originals.len() + aug.generated.len());
    for s in &aug.originals {
        let rec = by_id
            .get(&s.id)
            .ok_or_else(|| Error::Invalid(format!("sample {} not found in source manifest", s.id)))?;
        let rel = rec.path.trim_start_matches('/').to_string();
        let dst = out_dir.join(&rel);
        ensure_parent(&dst)?;
        let src = source.resolve(&rec.path);
        std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
        records.push(ManifestRecord {
            path: rel,
            label: s.label,
            split: Split::Train,
            source_id: None,
        });
    }
    for s in &aug.generated {
        let rel = format!("{}.png", s.id.trim_start_matches('/'));
        let dst = out_dir.join(&rel);
        ensure_parent(&dst)?;
        save_image_png16(&s.image, &dst)?;
        records.push(ManifestRecord {
            path: rel,
            label: s.label,
            split: Split::Train,
            source_id: s.source_id.clone(),
        });
    }
    let manifest = DatasetManifest::new(records, out_dir)?;
    save_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    aug.manifest = manifest.clone();
    Ok(manifest)
}

/// Reads an augmented manifest back, splitting rows by provenance.
pub fn load_augmented<T: Scalar>(
    manifest: &DatasetManifest,
    resolution: usize,
    channels: usize,
) -> Result<AugmentedDataset<T>> {
    let all = load_samples(manifest, None, resolution, channels)?;
    let (generated, originals) = all.into_iter().partition(|s| s.provenance == Provenance::Generated);
    Ok(AugmentedDataset {
        originals,
        generated,
        manifest: manifest.clone(),
    })
}

/// Channel-averaged absolute difference, min-max scaled to `[0, 1]`; an
/// all-zero difference stays all-zero. Returns an `[H, W]` map.
pub fn difference_image<T: Scalar>(original: &Sample<T>, generated: &Sample<T>) -> Result<Tensor<f64>> {
    if generated.source_id.as_deref() != Some(original.id.as_str()) {
        return Err(Error::Invalid(format!(
            "{} is not generated from {}",
            generated.id, original.id
        )));
    }
    if original.image.shape() != generated.image.shape() || original.image.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "difference of {:?} and {:?}",
            original.image.shape(),
            generated.image.shape()
        )));
    }
    let s = original.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let a = original.image.data();
    let b = generated.image.data();
    let mut map = vec![0.0f64; h * w];
    for ch in 0..c {
        for (i, m) in map.iter_mut().enumerate() {
            let k = ch * h * w + i;
            *m += (a[k].to_f64().unwrap_or(f64::NAN) - b[k].to_f64().unwrap_or(f64::NAN)).abs();
        }
    }
    map.iter_mut().for_each(|m| *m /= c as f64);
    Ok(Tensor::from_vec(&[h, w], min_max(map))?)
}

/// Scales to `[0, 1]`; a constant input maps to zeros.
pub fn min_max(mut v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    v
}
