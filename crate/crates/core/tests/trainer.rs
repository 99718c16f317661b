use ocspoof_core::checkpoint::Checkpoint;
use ocspoof_core::loss::LossKind;
use ocspoof_core::net::{EncoderKind, NetConfig, PoolingKind};
use ocspoof_core::synthetic::{toy_dataset, ToyConfig, ToyDataset};
use ocspoof_core::trainer::{dev_eer, log_csv, train, CacheDirSource, FeatureSource, Model, TrainConfig, TrainError};

fn small_toy(seed: u64) -> ToyDataset {
    toy_dataset(&ToyConfig {
        n_bona_train: 150,
        n_spoof_train: 150,
        n_bona_dev: 60,
        n_spoof_dev: 60,
        n_bona_eval: 20,
        n_spoof_eval: 20,
        seed,
        ..ToyConfig::default()
    })
}

fn net(seed: u64) -> NetConfig {
    NetConfig {
        encoder: EncoderKind::MlpSmall,
        input_dim: 8,
        hidden_dims: vec![12],
        embed_dim: 6,
        pooling: PoolingKind::Attentive,
        attention_dim: 6,
        kernel: 3,
        seed,
    }
}

fn cfg(epochs: usize, loss: LossKind) -> TrainConfig {
    TrainConfig { epochs, batch_size: 32, lr: 3e-3, lr_head: Some(0.05), target_len: 16, loss, seed: 7, ..TrainConfig::default() }
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = small_toy(1);
    let out = train(&data.train, &data.dev, &net(1), &cfg(0, LossKind::OcSoftmax)).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].epoch, 0);
    assert_eq!(out.best.epoch, 0);
    let init = Model::init(&net(1), &cfg(0, LossKind::OcSoftmax)).unwrap();
    let expected = Checkpoint::snapshot(&init, &net(1), &cfg(0, LossKind::OcSoftmax), 0, out.log[0].dev_eer);
    assert_eq!(out.best, expected);
    assert_eq!(out.log[0].dev_eer, dev_eer(&init, &data.dev, 16).unwrap());
    assert!(out.log[0].train_loss.is_finite());
}

#[test]
fn same_seed_is_bit_identical() {
    let data = small_toy(2);
    for loss in [LossKind::OcSoftmax, LossKind::AmSoftmax, LossKind::Softmax] {
        let a = train(&data.train, &data.dev, &net(2), &cfg(3, loss)).unwrap();
        let b = train(&data.train, &data.dev, &net(2), &cfg(3, loss)).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    }
}

#[test]
fn best_checkpoint_is_first_minimum_of_log() {
    let data = small_toy(3);
    let out = train(&data.train, &data.dev, &net(3), &cfg(6, LossKind::OcSoftmax)).unwrap();
    assert_eq!(out.log.len(), 6);
    let min = out.log.iter().map(|r| r.dev_eer).fold(f64::INFINITY, f64::min);
    let first = out.log.iter().find(|r| r.dev_eer == min).unwrap();
    assert_eq!(out.best.dev_eer, min);
    assert_eq!(out.best.epoch, first.epoch);
    // the stored dev EER is reproducible from the stored parameters
    assert_eq!(dev_eer(&out.best.model, &data.dev, 16).unwrap(), out.best.dev_eer);
}

#[test]
fn learning_rate_follows_schedule_in_log() {
    let data = small_toy(4);
    let c = TrainConfig { lr_decay_every: 2, ..cfg(5, LossKind::OcSoftmax) };
    let out = train(&data.train, &data.dev, &net(4), &c).unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![3e-3, 3e-3, 1.5e-3, 1.5e-3, 7.5e-4]);
}

#[test]
fn toy_training_reaches_low_dev_eer() {
    let data = small_toy(5);
    let out = train(&data.train, &data.dev, &net(5), &cfg(50, LossKind::OcSoftmax)).unwrap();
    assert!(out.best.dev_eer <= 0.01, "dev EER {}", out.best.dev_eer);
}

#[test]
fn divergence_reports_last_good_checkpoint() {
    let data = small_toy(6);
    let c = TrainConfig { lr: 1e300, lr_head: Some(1e300), ..cfg(4, LossKind::Softmax) };
    match train(&data.train, &data.dev, &net(6), &c) {
        Err(TrainError::Diverged(d)) => {
            assert!(d.last_good.dev_eer.is_finite());
            assert!(d.last_good.model.net.params().tensors().iter().all(|t| t.value.iter().all(|v| v.is_finite())));
            assert!(d.message.contains("non-finite") || !d.message.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn disk_cache_source_matches_memory() {
    let data = small_toy(7);
    let dir = tempfile::tempdir().unwrap();
    let to_disk = |src: &ocspoof_core::trainer::InMemorySource, sub: &str| {
        let d = dir.path().join(sub);
        std::fs::create_dir_all(&d).unwrap();
        for e in &src.examples {
            // round through f32 so both sources see identical values
            let q = ocspoof_core::FeatureMatrix::from_cache_bytes(&e.features.to_cache_bytes()).unwrap();
            q.write_cache(&d.join(format!("{}.lfcc", e.entry.utt_id))).unwrap();
        }
        CacheDirSource { entries: src.examples.iter().map(|e| e.entry.clone()).collect(), dir: d }
    };
    let quantize = |src: &ocspoof_core::trainer::InMemorySource| {
        let mut s = src.clone();
        for e in &mut s.examples {
            e.features = ocspoof_core::FeatureMatrix::from_cache_bytes(&e.features.to_cache_bytes()).unwrap();
        }
        s
    };
    let (train_disk, dev_disk) = (to_disk(&data.train, "train"), to_disk(&data.dev, "dev"));
    assert_eq!(train_disk.len(), data.train.len());
    let a = train(&train_disk, &dev_disk, &net(7), &cfg(2, LossKind::OcSoftmax)).unwrap();
    let b = train(&quantize(&data.train), &quantize(&data.dev), &net(7), &cfg(2, LossKind::OcSoftmax)).unwrap();
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
}

#[test]
fn single_class_split_rejected() {
    let data = small_toy(8);
    let mut dev = data.dev.clone();
    dev.examples.retain(|e| e.entry.key == ocspoof_core::protocol::Key::Bonafide);
    assert!(matches!(train(&data.train, &dev, &net(8), &cfg(1, LossKind::OcSoftmax)), Err(TrainError::Failed(_))));
}
