//! Dataset ingest: manifests, image loading and normalisation, class-balance
//! reporting, and the synthetic blob benchmark.

mod balance;
mod image;
mod manifest;
pub mod synth;

use std::fmt;
use std::path::Path;

use cyclebalance_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

pub use balance::{balance_report, BalanceReport, SplitBalance};
pub use image::{
    dequantize_u16, load_image, preprocess, quantize_u16, resize_bilinear, save_gray_png, save_image_png16,
    save_rgb_png, PixelRange, RawImage,
};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestRecord};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Validation),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Generated,
}

/// One labelled image. `image` is CHW with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub label: u8,
    pub split: Split,
    pub provenance: Provenance,
    pub source_id: Option<String>,
}

impl<T: Scalar> Sample<T> {
    pub fn original(id: impl Into<String>, image: Tensor<T>, label: u8, split: Split) -> Self {
        Self {
            id: id.into(),
            image,
            label,
            split,
            provenance: Provenance::Original,
            source_id: None,
        }
    }
}

/// Sample id for a manifest path: the path without its extension.
pub fn sample_id(path: &str) -> String {
    match path.rfind('.') {
        Some(dot) if !path[dot..].contains('/') => path[..dot].to_string(),
        _ => path.to_string(),
    }
}

/// Loads and preprocesses every record of `manifest` whose split matches `split`
/// (all records when `None`).
pub fn load_samples<T: Scalar>(
    manifest: &DatasetManifest,
    split: Option<Split>,
    resolution: usize,
    channels: usize,
) -> Result<Vec<Sample<T>>> {
    manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| {
            let raw = load_image(&manifest.resolve(&r.path))?;
            let image = preprocess(&raw, resolution, channels)?;
            Ok(Sample {
                id: sample_id(&r.path),
                image,
                label: r.label,
                split: r.split,
                provenance: if r.source_id.is_some() {
                    crate::data::Provenance::Generated
                } else {
                    crate::data::Provenance::Original
                },
                source_id: r.source_id.clone(),
            })
        })
        .collect()
}

/// Stacks CHW sample images into an NCHW batch.
pub fn batch_of<T: Scalar>(samples: &[&Sample<T>]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = samples
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            s.image.clone().reshape(&shape)
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(Tensor::stack_batch(&parts)?)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_strip_extension_only_from_file_name() {
        assert_eq!(sample_id("train/0/00001.png"), "train/0/00001");
        assert_eq!(sample_id("a.b/c"), "a.b/c");
        assert_eq!(sample_id("noext"), "noext");
    }

    #[test]
    fn split_parsing() {
        assert_eq!(Split::parse("val"), Some(Split::Validation));
        assert_eq!(Split::parse("train"), Some(Split::Train));
        assert_eq!(Split::parse("test"), None);
    }
}
