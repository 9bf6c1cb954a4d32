use std::path::{Path, PathBuf};

use eddyseg_core::checkpoint::{self, InputPipeline};
use eddyseg_core::loss::{Metrics, NUM_CLASSES};
use eddyseg_core::net::Network;
use eddyseg_core::synth::{gen_dataset, DatasetConfig};
use eddyseg_core::train::{evaluate, load_datasets, train, train_from_manifest, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(dir: &Path) -> PathBuf {
    gen_dataset(&DatasetConfig::new(32, 16, 8, 5), dir).unwrap();
    dir.join("manifest.json")
}

/// Statistics are stored as f32, so they come back rounded to f32.
fn assert_same_pipeline(got: &InputPipeline, want: &InputPipeline) {
    assert_eq!(got.channels, want.channels);
    let pairs = got.stats.mean.iter().zip(&want.stats.mean).chain(got.stats.std.iter().zip(&want.stats.std));
    for (a, b) in pairs {
        assert_eq!(*a as f32, *b as f32);
    }
}

fn quick() -> TrainConfig {
    TrainConfig { epochs: 2, batch: 4, seed: 9, ..TrainConfig::default() }
}

#[test]
fn saved_checkpoint_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let cfg = quick();
    let (outcome, pipeline) = train_from_manifest(&cfg, &manifest, |_| {}).unwrap();
    let path = dir.path().join("w.edyw");
    checkpoint::save(&path, &outcome.best, &pipeline).unwrap();
    let (loaded, loaded_pipeline) = checkpoint::load(&path).unwrap();
    assert_same_pipeline(&loaded_pipeline, &pipeline);

    let (_, _, test) = load_datasets(&manifest, &pipeline.channels).unwrap();
    let before = evaluate(&outcome.best, &test, 3, "test").unwrap();
    let after = evaluate(&loaded, &test, 5, "test").unwrap();
    assert_eq!(before.metrics, after.metrics);
    assert_eq!(before.predictions, after.predictions);
    assert!((before.loss.combined - after.loss.combined).abs() < 1e-9);
    assert!((outcome.best_val_loss - after.loss.combined).abs() < 1e-6);
}

#[test]
fn metrics_match_brute_force_over_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let (_, train_set, test) = load_datasets(&manifest, &[0, 1, 2, 3]).unwrap();
    let outcome = train(&quick(), &train_set, &test).unwrap();
    let eval = evaluate(&outcome.last, &test, 4, "test").unwrap();

    let truth: Vec<u8> = (0..test.len()).flat_map(|i| test.classes(i).to_vec()).collect();
    assert_eq!(truth.len(), eval.predictions.len());
    let mut hits = 0u64;
    let mut table = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &t) in eval.predictions.iter().zip(&truth) {
        hits += (p == t) as u64;
        table[t as usize][p as usize] += 1;
    }
    let m: &Metrics = &eval.metrics;
    assert_eq!(m.confusion, table);
    assert_eq!(m.total(), truth.len() as u64);
    assert!((m.pixel_accuracy - hits as f64 / truth.len() as f64).abs() < 1e-12);
    for k in 0..NUM_CLASSES {
        let predicted = eval.predictions.iter().filter(|&&p| p as usize == k).count() as f64;
        let actual = truth.iter().filter(|&&t| t as usize == k).count() as f64;
        let tp = table[k][k] as f64;
        let expect = |d: f64| if d == 0.0 { 0.0 } else { tp / d };
        assert!((m.precision[k] - expect(predicted)).abs() < 1e-12);
        assert!((m.recall[k] - expect(actual)).abs() < 1e-12);
    }
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let run = |seed| {
        let cfg = TrainConfig { seed, ..quick() };
        let (o, p) = train_from_manifest(&cfg, &manifest, |_| {}).unwrap();
        (o.history, checkpoint::to_bytes(&o.best, &p))
    };
    let a = run(9);
    assert_eq!(a, run(9));
    assert_ne!(a.1, run(10).1);
}

#[test]
fn ssh_only_configuration_has_one_input_channel() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let cfg = TrainConfig { channels: vec![0], epochs: 1, ..quick() };
    let (outcome, pipeline) = train_from_manifest(&cfg, &manifest, |_| {}).unwrap();
    assert_eq!(outcome.best.spec().in_channels, 1);
    assert_eq!(outcome.best.params()[0].tensor.dims()[1], 1);
    assert_eq!(pipeline.channels, vec![0]);
    let (_, _, test) = load_datasets(&manifest, &[0]).unwrap();
    assert_eq!(test.batch(&[0]).0.dims(), [1, 1, 32, 32]);
}

#[test]
fn untrained_network_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let (_, _, test) = load_datasets(&manifest, &[0, 1, 2, 3]).unwrap();
    let cfg = TrainConfig::default();
    let net = Network::<f32>::build(cfg.network_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ce = evaluate(&net, &test, 8, "test").unwrap().loss.ce;
    assert!((ce - 3f64.ln()).abs() < 0.1, "untrained eval-mode ce {ce:.4}, ln 3 = {:.4}", 3f64.ln());
}

#[test]
fn pipeline_metadata_survives_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let (m, _, _) = load_datasets(&manifest, &[1, 2]).unwrap();
    let spec = TrainConfig { channels: vec![1, 2], ..TrainConfig::default() }.network_spec();
    let net = Network::<f32>::build(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let pipeline = InputPipeline { channels: vec![1, 2], stats: m.stats };
    let bytes = checkpoint::to_bytes(&net, &pipeline);
    let (back, back_pipeline) = checkpoint::from_bytes(&bytes).unwrap();
    assert_same_pipeline(&back_pipeline, &pipeline);
    assert_eq!(back.spec(), net.spec());
    assert_eq!(checkpoint::to_bytes(&back, &back_pipeline), bytes);
}
