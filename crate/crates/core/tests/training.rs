use tkgr_core::config::RunConfig;
use tkgr_core::encoder::EncoderConfig;
use tkgr_core::model::TwoTowerModel;
use tkgr_core::pipeline::{Dataset, Pipeline};
use tkgr_core::synthetic::{generate, SyntheticConfig, SyntheticTkg};
use tkgr_core::trainer::{load_checkpoint, save_checkpoint, TrainError};

#[test]
fn training_loss_falls_over_first_epochs() {
    let syn = generate(&SyntheticConfig {
        entities: 12,
        relations: 2,
        timestamps: 20,
        pairs: 8,
        valid_from: 16,
        test_from: 18,
        seed: 3,
        ..Default::default()
    });
    let ds = Dataset::from_texts(
        &SyntheticTkg::to_tsv(&syn.train),
        &SyntheticTkg::to_tsv(&syn.valid),
        &SyntheticTkg::to_tsv(&syn.test),
        None,
        None,
        None,
    )
    .unwrap();
    let cfg = RunConfig {
        layers: 1,
        width: 16,
        heads: 2,
        prefix_len: 2,
        max_len: 40,
        history_max_items: 3,
        freeze_policy: "full".into(),
        learning_rate: 1e-3,
        epochs: 5,
        batch_size: 16,
        pre_batch_depth: 0,
        ..Default::default()
    };
    let p = Pipeline::new(&ds, cfg).unwrap();
    let out = p.train(None).unwrap();
    let losses: Vec<f64> = out.report.epochs.iter().map(|e| e.loss).collect();
    assert_eq!(losses.len(), 5);
    let smooth: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses[4] < losses[0]);
}

fn tiny_model(seed: u64) -> TwoTowerModel {
    let cfg = EncoderConfig { layers: 2, width: 8, heads: 2, prefix_len: 2, max_len: 8, vocab_size: 12, ..Default::default() };
    TwoTowerModel::new(cfg, 0.07, seed).unwrap()
}

#[test]
fn checkpoint_round_trip_is_the_f32_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = tiny_model(1);
    save_checkpoint(&path, &model, 42, &["seed=1".to_string()]).unwrap();

    let mut loaded = tiny_model(2);
    let info = load_checkpoint(&path, &mut loaded).unwrap();
    assert_eq!(info.step, 42);
    assert_eq!(info.config, vec!["seed=1".to_string()]);
    let want = model.quantized();
    for (id, p) in want.store.iter() {
        assert_eq!(p.value(), loaded.store.get(id).value(), "{}", p.name());
    }
    assert_eq!(loaded.tau(), want.tau());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path, &mut tiny_model(3)), Err(TrainError::CorruptCheckpoint(_))));
}

#[test]
fn checkpoint_rejects_other_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &tiny_model(1), 0, &[]).unwrap();
    let cfg = EncoderConfig { layers: 1, width: 8, heads: 2, prefix_len: 2, max_len: 8, vocab_size: 12, ..Default::default() };
    let mut other = TwoTowerModel::new(cfg, 0.07, 0).unwrap();
    assert!(matches!(load_checkpoint(&path, &mut other), Err(TrainError::CorruptCheckpoint(_))));
}
