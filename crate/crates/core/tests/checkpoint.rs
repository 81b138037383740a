use std::fs;

use fsvos::backbone::BackboneConfig;
use fsvos::checkpoint::{
    load, load_model, load_trainer, save, save_model, save_trainer, BLOB_FILE, MANIFEST_FILE,
};
use fsvos::data::{generate_image_dataset, ImageDataset, SynthConfig};
use fsvos::optim::Adam;
use fsvos::segmenter::{NeckKind, Phase1Config, Phase1Trainer};
use fsvos::{ArchConfig, Error, ModelState, Tensor};
use indexmap::IndexMap;

fn tiny_arch(neck: NeckKind) -> ArchConfig {
    ArchConfig {
        backbone: BackboneConfig {
            widths: vec![4, 4, 6, 6],
            convs_per_stage: 1,
            ..BackboneConfig::default()
        },
        neck,
        ..ArchConfig::default()
    }
}

fn param_bytes(m: &ModelState) -> Vec<u8> {
    m.params.bytes_with_prefix("")
}

#[test]
fn every_module_round_trips_bit_exactly() {
    let base = ModelState::init(&ArchConfig::default(), 3).unwrap();
    let mut relearned = base.with_temporal_unit(4);
    relearned.params.set_frozen("head.", true);
    relearned.source_hash = Some(base.content_hash());
    relearned.meta.insert("note".into(), "x".into());
    let identity = ModelState::init(&tiny_arch(NeckKind::Identity), 5).unwrap();
    for model in [base, relearned, identity] {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_model(dir.path(), &model).unwrap();
        assert_eq!(manifest.params_hash, model.content_hash());
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(param_bytes(&back), param_bytes(&model));
        for prefix in ["backbone.", "fuse", "neck.", "head.", "temporal."] {
            assert_eq!(
                back.params.bytes_with_prefix(prefix),
                model.params.bytes_with_prefix(prefix)
            );
        }
    }
}

#[test]
fn awkward_values_survive() {
    let mut model = ModelState::init(&tiny_arch(NeckKind::Light), 0).unwrap();
    let (_, p) = model.params.iter_mut().next().unwrap();
    let specials = [f64::MIN_POSITIVE, -0.0, 1e308, -1e-308, 5e-324];
    p.value.data_mut()[..specials.len()].copy_from_slice(&specials);
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &model).unwrap();
    assert_eq!(
        param_bytes(&load_model(dir.path()).unwrap()),
        param_bytes(&model)
    );
}

#[test]
fn state_tensors_round_trip() {
    let model = ModelState::init(&tiny_arch(NeckKind::Light), 0).unwrap();
    let mut state = IndexMap::new();
    state.insert(
        "adam.m.x".to_string(),
        Tensor::from_fn(&[3, 2], |i| i as f64 * 0.1),
    );
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &model, &state).unwrap();
    let ck = load(dir.path()).unwrap();
    assert_eq!(ck.state, state);
    assert_eq!(ck.model, model);
}

#[test]
fn tampering_is_detected() {
    let model = ModelState::init(&tiny_arch(NeckKind::Light), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &model).unwrap();

    let blob_path = dir.path().join(BLOB_FILE);
    let mut blob = fs::read(&blob_path).unwrap();
    blob[17] ^= 1;
    fs::write(&blob_path, &blob).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::Checkpoint(_))));
    blob[17] ^= 1;
    fs::write(&blob_path, &blob).unwrap();
    load_model(dir.path()).unwrap();

    let man_path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).unwrap();
    fs::write(&man_path, text.replace("fsvos-checkpoint", "other")).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::Checkpoint(_))));

    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_model(missing.path()),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn resumed_training_replays_exactly() {
    let synth = SynthConfig {
        image_size: (32, 32),
        ..SynthConfig::default()
    };
    let ds = ImageDataset::new(generate_image_dataset(&synth, 4).unwrap());
    let cfg = Phase1Config {
        adam_iterations: 3,
        sgd_iterations: 2,
        batch_size: 2,
        log_every: 0,
        ..Phase1Config::default()
    };
    let arch = tiny_arch(NeckKind::Light);
    let fresh = || Phase1Trainer::new(ModelState::init(&arch, 9).unwrap(), 9);

    let mut straight = fresh();
    straight.run_until(&ds, &cfg, 5, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = fresh();
    first.run_until(&ds, &cfg, 4, |_| {}).unwrap();
    save_trainer(dir.path(), &first).unwrap();
    let resumed: Vec<Phase1Trainer> = (0..2)
        .map(|_| {
            let mut t = load_trainer(dir.path()).unwrap();
            assert_eq!(t.iteration, 4);
            t.run_until(&ds, &cfg, 5, |_| {}).unwrap();
            t
        })
        .collect();

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_trainer(a.path(), &resumed[0]).unwrap();
    save_trainer(b.path(), &resumed[1]).unwrap();
    for f in [BLOB_FILE, MANIFEST_FILE] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap()
        );
    }
    assert_eq!(param_bytes(&resumed[0].model), param_bytes(&straight.model));
    assert_eq!(resumed[0].adam, straight.adam);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let synth = SynthConfig {
        image_size: (32, 32),
        ..SynthConfig::default()
    };
    let ds = ImageDataset::new(generate_image_dataset(&synth, 3).unwrap());
    let cfg = Phase1Config {
        adam_lr: 0.0,
        adam_iterations: 1,
        sgd_iterations: 0,
        batch_size: 2,
        log_every: 0,
        ..Phase1Config::default()
    };
    let model = ModelState::init(&tiny_arch(NeckKind::Light), 1).unwrap();
    let mut t = Phase1Trainer::new(model.clone(), 1);
    t.run_until(&ds, &cfg, 1, |_| {}).unwrap();
    assert_eq!(param_bytes(&t.model), param_bytes(&model));
    assert_eq!(t.adam.steps(), Adam::new().steps() + 1);
}
