use cyclebalance::data::synth::{load_blobs, synth_benchmark, ClassCounts, SynthConfig};
use cyclebalance::data::{
    balance_report, load_manifest, load_samples, save_manifest, DatasetManifest, ManifestRecord, Split,
};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn tree_digest(dir: &std::path::Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        size: 16,
        train: ClassCounts { class0: 9, class1: 3 },
        validation: ClassCounts { class0: 4, class1: 2 },
        blob_sigma: 1.5,
        ..SynthConfig::default()
    }
}

#[test]
fn synth_is_a_pure_function_of_config_and_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_benchmark(&small_synth(), 7, a.path()).unwrap();
    synth_benchmark(&small_synth(), 7, b.path()).unwrap();
    synth_benchmark(&small_synth(), 8, c.path()).unwrap();
    let da = tree_digest(a.path());
    assert_eq!(da, tree_digest(b.path()));
    assert_ne!(da, tree_digest(c.path()));
}

#[test]
fn synth_counts_blobs_and_balance() {
    let d = tempfile::tempdir().unwrap();
    let out = synth_benchmark(&small_synth(), 1, d.path()).unwrap();
    let report = balance_report(&out.manifest);
    assert_eq!(report.ratio(Split::Train), Some(3.0));
    assert_eq!(report.ratio(Split::Validation), Some(2.0));
    // one ground-truth blob per positive, none for negatives
    let blobs = load_blobs(&d.path().join("blobs.csv")).unwrap();
    assert_eq!(blobs.len(), 5);
    let reloaded = load_manifest(&d.path().join("manifest.csv")).unwrap();
    assert_eq!(reloaded.records, out.manifest.records);
    let samples = load_samples::<f32>(&reloaded, None, 16, 1).unwrap();
    for s in &samples {
        assert_eq!(s.image.shape(), &[1, 16, 16]);
        assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let positives = samples.iter().filter(|s| s.label == 1).count();
    assert_eq!(positives, blobs.len());
}

#[test]
fn samples_load_at_another_resolution_and_channel_count() {
    let d = tempfile::tempdir().unwrap();
    let out = synth_benchmark(&small_synth(), 2, d.path()).unwrap();
    let s = load_samples::<f64>(&out.manifest, Some(Split::Validation), 8, 3).unwrap();
    assert_eq!(s.len(), 6);
    assert_eq!(s[0].image.shape(), &[3, 8, 8]);
    // grey input replicated across channels
    let plane = 64;
    assert_eq!(s[0].image.data()[..plane], s[0].image.data()[2 * plane..]);
}

fn record() -> impl Strategy<Value = ManifestRecord> {
    (
        "[a-z]{1,6}(/[a-z0-9_]{1,6}){0,2}\\.png",
        0u8..2,
        prop::bool::ANY,
        prop::option::of("[a-z]{1,8}"),
    )
        .prop_map(|(path, label, train, source_id)| ManifestRecord {
            path,
            label,
            split: if train { Split::Train } else { Split::Validation },
            source_id,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_save_then_load_is_identity(records in prop::collection::vec(record(), 0..20)) {
        let mut seen = std::collections::HashSet::new();
        let records: Vec<_> = records.into_iter().filter(|r| seen.insert(r.path.clone())).collect();
        let d = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(records, d.path()).unwrap();
        let p = d.path().join("manifest.csv");
        save_manifest(&m, &p).unwrap();
        let back = load_manifest(&p).unwrap();
        prop_assert_eq!(&back.records, &m.records);
        prop_assert_eq!(back.class_counts(), m.class_counts());
    }
}
