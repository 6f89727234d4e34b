#![allow(dead_code)]

use std::path::{Path, PathBuf};

use compogan::checkpoint::Model;
use compogan::config::{Resolver, RunConfig};
use compogan_core::explorer::{build_bank, DirectionBank, HarvestTarget};
use compogan_core::rng;
use compogan_core::training::TrainState;

/// A model small enough to train for a few steps in well under a second.
pub const TINY: &str = r#"
seed = 1

[generator]
latent_dim = 8
style_dim = 6
mapping_layers = 1
coarse_resolution = 8
output_resolution = 16
fourier_features = 4
feature_channels = 4
renderer_channels = [4]

[discriminator]
resolution = 16
channels = [4, 6, 8]

[train]
batch_size = 2
total_steps = 3
r1_interval = 2

[data]
toy_samples = 8
eval_real = 8

[schedule]
eval_every = 0
eval_count = 4
grid_size = 2
checkpoint_every = 2
sample_every = 2

[toy]
resolution = 16

[explore]
samples = 64
components = 3
"#;

pub fn write_tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

pub fn tiny_config() -> RunConfig {
    let dir = tempfile::tempdir().unwrap();
    Resolver::default().file(&write_tiny(dir.path())).unwrap().finish().unwrap()
}

/// A fresh tiny model whose zero-initialized heads are randomized, so the
/// masks and depth maps are not uniform.
pub fn tiny_model() -> Model {
    let cfg = tiny_config();
    let state = TrainState::<f32>::new(cfg.experiment()).unwrap();
    let mut model = Model::from_state(&state, None);
    for (i, t) in model.params.values_mut().iter_mut().enumerate() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = rng::normal(&mut rng::derive(77, i as u64), t.shape());
        }
    }
    model
}

pub fn tiny_bank(model: &Model) -> DirectionBank {
    let classes: Vec<usize> = (0..model.num_classes()).collect();
    build_bank(&model.generator, &model.params, &classes, &[5, 9], 64, 3, HarvestTarget::Style, 3).unwrap()
}
