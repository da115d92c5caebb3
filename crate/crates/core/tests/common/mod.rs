#![allow(dead_code)]

pub mod grad;

use std::path::Path;

use cyclebalance::harness::{parse_config, ExperimentConfig};

/// A complete experiment small enough to run in well under a second.
pub const TINY: &str = r#"
seed = 7
resolution = 16
channels = 1

[data.primary.synth]
size = 16
blob_sigma = 1.5
train = { class0 = 20, class1 = 4 }
validation = { class0 = 8, class1 = 4 }

[data.pretrain.synth]
size = 16
blob_sigma = 1.5
train = { class0 = 8, class1 = 8 }
validation = { class0 = 0, class1 = 0 }

[gan]
epochs = 2
ngf = 2
ndf = 2
res_blocks = 1
downsamplings = 1
disc_layers = 1
finetune_epochs = 1
checkpoint_every = 1
probe_size = 2

[classifier]
epochs = 2
init_features = 4
growth_rate = 2
block_config = [1, 1]
stem = "small"
lr = 1e-3

[cam]
overlays = 2
"#;

pub fn tiny_config(out: &Path, overrides: &[&str]) -> ExperimentConfig {
    let mut all = vec![format!("output_dir={:?}", out.display().to_string())];
    all.extend(overrides.iter().map(|s| s.to_string()));
    parse_config(TINY, &all).unwrap()
}

pub fn write_tiny(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
