mod common;

use std::fs;

use common::{read_tree, tiny_setup};
use sonogest::datagen::{generate, SynthConfig, SynthMode};
use sonogest::harness::{
    aggregate, argmax, format_table, load_checkpoint, read_json, save_checkpoint, train_run, ComparisonRow, ConfusionMatrix,
    RunMetrics, Trainer, TrainConfig, METRICS_FILE,
};
use sonogest::model::Variant;
use sonogest::pipeline::{split_dataset, Dataset, Manifest, ManifestEntry, MANIFEST_FILE};
use sonogest::tensor::ustf;
use sonogest::{Error, Tensor};
use tempfile::tempdir;

fn quiet() -> impl FnMut(u64, usize, f64) {
    |_, _, _| {}
}

#[test]
fn repeated_training_is_bitwise_identical() {
    let tmp = tempdir().unwrap();
    let mut config = tiny_setup(tmp.path(), Variant::Proposed);
    let dataset = Dataset::<f32>::load(&config.manifest).unwrap();
    train_run(&config, &dataset, 3, false, &mut quiet()).unwrap();
    let first = read_tree(&config.run_dir(3));

    config.out_dir = tmp.path().join("again");
    train_run(&config, &dataset, 3, false, &mut quiet()).unwrap();
    let second = read_tree(&config.run_dir(3));

    let keys: Vec<&String> = first.keys().collect();
    assert_eq!(keys, second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        if name != "timing.json" {
            assert!(bytes == &second[name], "{name} differs between identical runs");
        }
    }
    assert!(first.contains_key(METRICS_FILE));
    assert!(first.keys().any(|k| k.starts_with("checkpoint")));
}

#[test]
fn resumed_training_follows_the_same_trajectory() {
    let tmp = tempdir().unwrap();
    let mut config = tiny_setup(tmp.path(), Variant::Cnn3d);
    let dataset = Dataset::<f64>::load(&config.manifest).unwrap();
    config.dtype = sonogest::DType::F64;
    config.patience = 100;

    let straight = train_run(&config, &dataset, 1, false, &mut quiet()).unwrap();

    let mut partial = config.clone();
    partial.out_dir = tmp.path().join("resumed");
    partial.epochs = 1;
    train_run(&partial, &dataset, 1, false, &mut quiet()).unwrap();
    partial.epochs = config.epochs;
    let resumed = train_run(&partial, &dataset, 1, true, &mut quiet()).unwrap();

    // three further epochs of several optimizer steps each
    let steps_per_epoch = straight.metrics.train_count.div_ceil(config.batch_size);
    assert!((config.epochs - 1) * steps_per_epoch >= 3);
    assert_eq!(straight.metrics, resumed.metrics);
    assert_eq!(straight.network.params(), resumed.network.params());
    assert_eq!(straight.network.buffers(), resumed.network.buffers());
    let a = read_tree(&config.run_dir(1).join("checkpoint"));
    let b = read_tree(&partial.run_dir(1).join("checkpoint"));
    assert_eq!(a, b);
}

#[test]
fn resume_step_by_step_matches() {
    let tmp = tempdir().unwrap();
    let config = tiny_setup(tmp.path(), Variant::Proposed);
    let dataset = Dataset::<f64>::load(&config.manifest).unwrap();
    let mut a = Trainer::new(&config, &dataset, 4).unwrap();
    a.train_epoch(&dataset).unwrap();
    let dir = tmp.path().join("mid");
    a.save(&dir).unwrap();
    let mut b = Trainer::resume(&config, &dataset, &dir, None).unwrap();
    let order = a.epoch_order(1);
    assert_eq!(order, b.epoch_order(1));
    for chunk in order.chunks(config.batch_size).take(3) {
        let la = a.step(&dataset, chunk).unwrap();
        let lb = b.step(&dataset, chunk).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(a.network.params(), b.network.params());
        assert_eq!(a.optimizer.m, b.optimizer.m);
        assert_eq!(a.optimizer.v, b.optimizer.v);
    }
}

#[test]
fn checkpoints_reload_to_identical_state() {
    let tmp = tempdir().unwrap();
    let config = tiny_setup(tmp.path(), Variant::Cnn2p1dBase);
    let dataset = Dataset::<f32>::load(&config.manifest).unwrap();
    let mut trainer = Trainer::new(&config, &dataset, 0).unwrap();
    trainer.train_epoch(&dataset).unwrap();
    let first = tmp.path().join("a");
    trainer.save(&first).unwrap();

    let loaded = load_checkpoint::<f32>(&first).unwrap();
    assert_eq!(loaded.network.params(), trainer.network.params());
    assert_eq!(loaded.network.buffers(), trainer.network.buffers());
    assert_eq!(loaded.network.dropout_state(), trainer.network.dropout_state());
    let optimizer = loaded.optimizer.as_ref().unwrap();
    assert_eq!((optimizer.t, &optimizer.m, &optimizer.v), (trainer.optimizer.t, &trainer.optimizer.m, &trainer.optimizer.v));
    assert_eq!(loaded.trainer.as_ref(), Some(&trainer.state));

    let second = tmp.path().join("b");
    save_checkpoint(&second, &loaded.network, loaded.optimizer.as_ref(), loaded.trainer.as_ref()).unwrap();
    assert_eq!(read_tree(&first), read_tree(&second));

    assert!(load_checkpoint::<f64>(&first).is_err());
}

#[test]
fn tensors_and_manifests_round_trip() {
    let tmp = tempdir().unwrap();
    let t = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| (i as f64).sqrt() - 1.5).unwrap();
    let path = tmp.path().join("t.ustf");
    ustf::save(&path, &t).unwrap();
    let back: Tensor<f64> = ustf::load(&path).unwrap();
    assert_eq!(back.dims(), t.dims());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let mut synth = SynthConfig::new(SynthMode::Mixed);
    synth.num_classes = 4;
    synth.samples_per_class = 2;
    synth.frames = 4;
    synth.height = 12;
    synth.width = 12;
    let manifest = generate(&synth, &tmp.path().join("d")).unwrap();
    let path = tmp.path().join("d").join(MANIFEST_FILE);
    let loaded = Manifest::load(&path).unwrap();
    assert_eq!(loaded, manifest);
    let copy = tmp.path().join("copy.json");
    loaded.save(&copy).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&copy).unwrap());
}

#[test]
fn single_class_data_is_fit_perfectly() {
    let tmp = tempdir().unwrap();
    let mut config = tiny_setup(tmp.path(), Variant::Proposed);
    let mut manifest = Manifest::load(&config.manifest).unwrap();
    manifest.segments.retain(|e| e.label == 0);
    let path = tmp.path().join("data").join("one.json");
    manifest.save(&path).unwrap();
    config.manifest = path.clone();
    config.epochs = 20;
    config.patience = 20;
    config.batch_size = 1;
    config.lr = 0.05;
    let dataset = Dataset::<f32>::load(&path).unwrap();
    let out = train_run(&config, &dataset, 0, false, &mut quiet()).unwrap();
    let curve = &out.metrics.loss_curve;
    assert!(curve.last().unwrap() < &0.05, "loss curve {curve:?}");
    assert_eq!(out.metrics.accuracy, 1.0);

    // a head with a single output cannot be trained
    manifest.num_classes = 1;
    assert!(manifest.save(&path).and_then(|_| Dataset::<f32>::load(&path)).is_err());
}

#[test]
fn split_is_stratified_and_seeded() {
    let entries: Vec<ManifestEntry> = (0..40)
        .map(|i| ManifestEntry {
            file: format!("f{i}.ustf"),
            label: i % 4,
            subject: (i / 20) as u32,
            peak_frame: i,
            window: 16,
            repetition: i,
        })
        .collect();
    let (train, test) = split_dataset(&entries, 0.8, 9).unwrap();
    assert_eq!((train.len(), test.len()), (32, 8));
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..40).collect::<Vec<_>>());
    for label in 0..4 {
        for subject in 0..2 {
            let n = test.iter().filter(|&&i| entries[i].label == label && entries[i].subject == subject).count();
            assert_eq!(n, 1);
        }
    }
    assert_eq!(split_dataset(&entries, 0.8, 9).unwrap(), (train.clone(), test));
    assert_ne!(split_dataset(&entries, 0.8, 10).unwrap().0, train);
}

#[test]
fn reported_accuracy_equals_confusion_trace() {
    let tmp = tempdir().unwrap();
    let config = tiny_setup(tmp.path(), Variant::Cnn2d);
    let dataset = Dataset::<f32>::load(&config.manifest).unwrap();
    for seed in 0..2 {
        let out = train_run(&config, &dataset, seed, false, &mut quiet()).unwrap();
        let m = &out.metrics;
        assert_eq!(m.confusion.total() as usize, m.test_count);
        assert_eq!(m.accuracy, m.confusion.trace() as f64 / m.confusion.total() as f64);
        let saved: RunMetrics = read_json(&config.run_dir(seed).join(METRICS_FILE)).unwrap();
        assert_eq!(&saved, m);
        let csv = fs::read(config.run_dir(seed).join("confusion.csv")).unwrap();
        assert_eq!(ConfusionMatrix::read_csv(csv.as_slice()).unwrap(), m.confusion);
    }
}

#[test]
fn aggregate_and_table() {
    let s = aggregate(&[96.0, 97.0, 98.0]);
    assert_eq!((s.mean, s.std, s.n), (97.0, 1.0, 3));
    let single = aggregate(&[0.5]);
    assert!(single.single_run && single.std == 0.0);
    let rows = [ComparisonRow {
        variant: Variant::Proposed,
        mean: 0.986,
        std: 0.012,
        runs: 3,
        param_count: 10,
    }];
    assert!(format_table(&rows).contains("98.6 ± 1.2"));
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
}

#[test]
fn bad_configuration_is_a_config_error() {
    let mut c = TrainConfig::new(Variant::Proposed, "m.json", "out");
    c.batch_size = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    assert_eq!(Error::Config(String::new()).exit_code(), 2);
}
