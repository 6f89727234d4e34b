mod common;

use compogan::archive::Archive;
use compogan::checkpoint::{self, Model};
use compogan::runner::load_corpus;
use compogan::{bank_io, tables};
use compogan_core::training::{Dataset, TrainState};

#[test]
fn resume_matches_uninterrupted_training() {
    let cfg = common::tiny_config();
    let corpus = load_corpus(&cfg, None).unwrap();
    let data = Dataset::<f32>::from_samples(&corpus.samples, &corpus.table.table).unwrap();

    let mut straight = TrainState::<f32>::new(cfg.experiment()).unwrap();
    for _ in 0..5 {
        straight.step_on(&data).unwrap();
    }
    let bytes = checkpoint::to_archive(&straight, Some(&corpus.table)).unwrap().to_bytes().unwrap();
    let mut resumed = checkpoint::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step, 5);
    assert_eq!(resumed.sampler, straight.sampler);
    assert_eq!(resumed.rng_state(), straight.rng_state());

    // r1_interval = 2, so the continued steps include R1 updates
    for _ in 0..6 {
        let a = straight.step_on(&data).unwrap();
        let b = resumed.step_on(&data).unwrap();
        assert!((a.d_loss - b.d_loss).abs() <= 1e-6 && (a.g_loss - b.g_loss).abs() <= 1e-6, "{a:?} vs {b:?}");
        assert_eq!(a, b, "resumed training is bit-identical");
    }
    assert_eq!(straight.g_params.values(), resumed.g_params.values());
    assert_eq!(straight.g_ema.values(), resumed.g_ema.values());
    assert_eq!(straight.d_params.values(), resumed.d_params.values());
}

#[test]
fn model_loads_ema_weights_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config();
    let state = TrainState::<f32>::new(cfg.experiment()).unwrap();
    let table = tables::toy(&cfg.toy).unwrap();
    let p = dir.path().join("c.safetensors");
    checkpoint::save(&state, Some(&table), &p).unwrap();
    let m = Model::load(&p).unwrap();
    assert_eq!(m.params.values(), state.g_ema.values());
    assert_eq!(m.table.as_ref(), Some(&table));
    assert_eq!(m.class_names()[0], table.table.names()[0]);

    let wrong = tables::cityscapes();
    assert!(checkpoint::save(&state, Some(&wrong), &p).is_err(), "class count mismatch");
}

#[test]
fn rejects_foreign_and_future_archives() {
    let mut a = Archive::new("something.else", 1);
    assert!(checkpoint::from_archive(&a).is_err());
    a = Archive::new(checkpoint::FORMAT, checkpoint::VERSION + 1);
    let e = checkpoint::from_archive(&a).err().unwrap();
    assert!(e.to_string().contains("unsupported"), "{e}");
}

#[test]
fn bank_round_trip() {
    let model = common::tiny_model();
    let bank = common::tiny_bank(&model);
    assert_eq!(bank.len(), 2 * model.num_classes());
    let back = bank_io::from_archive(&Archive::from_bytes(&bank_io::to_archive(&bank).unwrap().to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back, bank);

    // tampering with a basis breaks orthonormality and is rejected on load
    let mut a = bank_io::to_archive(&bank).unwrap();
    if let Some(compogan::archive::Array::F64(_, d)) = a.arrays.get_mut("c0.l5.basis") {
        d[0] += 0.1;
    }
    assert!(bank_io::from_archive(&a).is_err());
}
