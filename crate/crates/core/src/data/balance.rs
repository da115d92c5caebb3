use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use super::{DatasetManifest, Split};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitBalance {
    pub class0: usize,
    pub class1: usize,
    /// majority / minority; `inf` when one class is absent.
    #[serde(serialize_with = "ratio_json")]
    pub ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BalanceReport {
    pub splits: BTreeMap<Split, SplitBalance>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl BalanceReport {
    pub fn ratio(&self, split: Split) -> Option<f64> {
        self.splits.get(&split).map(|b| b.ratio)
    }
}

fn ratio_json<S: Serializer>(r: &f64, s: S) -> Result<S::Ok, S::Error> {
    if r.is_finite() {
        s.serialize_f64(*r)
    } else {
        s.serialize_str("inf")
    }
}

/// Majority/minority ratio per split. A split missing one class gets an
/// infinite ratio and a warning rather than an error.
pub fn balance_report(manifest: &DatasetManifest) -> BalanceReport {
    let mut report = BalanceReport::default();
    for (split, [c0, c1]) in manifest.class_counts() {
        let (hi, lo) = (c0.max(c1), c0.min(c1));
        let ratio = if lo == 0 {
            report
                .warnings
                .push(format!("{split} split has no samples of class {}", if c0 == 0 { 0 } else { 1 }));
            f64::INFINITY
        } else {
            hi as f64 / lo as f64
        };
        report.splits.insert(
            split,
            SplitBalance {
                class0: c0,
                class1: c1,
                ratio,
            },
        );
    }
    report
}
