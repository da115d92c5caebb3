use cyclebalance::augment::{augment, load_augmented, save_augmented};
use cyclebalance::data::synth::{synth_benchmark, ClassCounts, SynthConfig};
use cyclebalance::data::{balance_report, load_manifest, load_samples, Provenance, Split};
use cyclebalance::gan::{GanConfig, GeneratorPair};

fn pair() -> GeneratorPair<f32> {
    let cfg = GanConfig {
        ngf: 2,
        ndf: 2,
        res_blocks: 1,
        downsamplings: 1,
        disc_layers: 1,
        ..GanConfig::default()
    };
    GeneratorPair::new(&cfg, 1, 16, 3).unwrap()
}

#[test]
fn saved_dataset_reloads_equal_and_balanced() {
    let src = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        size: 16,
        train: ClassCounts { class0: 9, class1: 1 },
        validation: ClassCounts { class0: 2, class1: 2 },
        blob_sigma: 1.5,
        ..SynthConfig::default()
    };
    let out = synth_benchmark(&cfg, 4, src.path()).unwrap();
    let train = load_samples::<f32>(&out.manifest, Some(Split::Train), 16, 1).unwrap();
    let mut aug = augment(&train, &pair(), 4).unwrap();
    assert_eq!(aug.class_counts(), [10, 10]);

    let dst = tempfile::tempdir().unwrap();
    let written = save_augmented(&mut aug, &out.manifest, dst.path()).unwrap();
    let reread = load_manifest(&dst.path().join("manifest.csv")).unwrap();
    assert_eq!(reread.records, written.records);
    assert_eq!(balance_report(&reread).ratio(Split::Train), Some(1.0));
    // validation rows are never part of an augmented set
    assert!(reread.records.iter().all(|r| r.split == Split::Train));

    let back = load_augmented::<f32>(&reread, 16, 1).unwrap();
    assert_eq!(back.originals, aug.originals);
    assert_eq!(back.generated, aug.generated);
    assert!(back.generated.iter().all(|s| s.provenance == Provenance::Generated));
    for g in &back.generated {
        let src = back.originals.iter().find(|o| Some(&o.id) == g.source_id.as_ref()).unwrap();
        assert_eq!(g.label, 1 - src.label);
    }
}

#[test]
fn augmentation_is_deterministic() {
    let src = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        size: 16,
        train: ClassCounts { class0: 5, class1: 3 },
        validation: ClassCounts { class0: 0, class1: 0 },
        blob_sigma: 1.5,
        ..SynthConfig::default()
    };
    let out = synth_benchmark(&cfg, 5, src.path()).unwrap();
    let train = load_samples::<f32>(&out.manifest, None, 16, 1).unwrap();
    let a = augment(&train, &pair(), 3).unwrap();
    let b = augment(&train, &pair(), 8).unwrap();
    assert_eq!(a.generated, b.generated);
    assert_eq!(a.class_counts(), [8, 8]);
}
