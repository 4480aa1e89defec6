use bimsa::data::{generate_synthetic, AugmentConfig, SynthSpec};
use bimsa::eval::predict_rgb;
use bimsa::model::{load_checkpoint, save_checkpoint};
use bimsa::trainer::{train, TrainConfig};
use bimsa::{Model, ModelConfig, StrategyId};

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        lr: 1e-2,
        augment: AugmentConfig {
            scale_range: (0.25, 0.25),
            crop: (64, 64),
        },
        val_fraction: 0.0,
        tile: 64,
        overlap: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_falls_when_fitting_a_tiny_set() {
    let data = generate_synthetic(&SynthSpec::scale_confusable(5, 2)).unwrap();
    let model = Model::new(&ModelConfig::default(), StrategyId::Bimsa, 5).unwrap();
    let cfg = TrainConfig { lr: 5e-2, ..tiny_cfg(30) };
    let report = train(&model, &data, &cfg, None).unwrap();
    let first = report.rows.first().unwrap().loss;
    let last = report.rows.last().unwrap().loss;
    assert!(last < 0.8 * first, "loss {first} -> {last}");
}

#[test]
fn every_strategy_trains_a_step() {
    let data = generate_synthetic(&SynthSpec::scale_confusable(6, 2)).unwrap();
    for s in StrategyId::ALL {
        let model = Model::new(&ModelConfig::default(), s, 6).unwrap();
        let report = train(&model, &data, &tiny_cfg(1), None).unwrap();
        assert!(report.rows[0].loss.is_finite(), "{s}");
    }
}

#[test]
fn checkpoint_restores_predictions() {
    let data = generate_synthetic(&SynthSpec::scale_confusable(7, 2)).unwrap();
    let model = Model::new(&ModelConfig::default(), StrategyId::HmsaScore, 7).unwrap();
    train(&model, &data, &tiny_cfg(1), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path, Some(model.config())).unwrap();
    assert_eq!(back.strategy(), StrategyId::HmsaScore);
    let img = image::imageops::thumbnail(&data[0].image, 96, 80);
    let a = predict_rgb(&model, &img, 64, 16).unwrap();
    let b = predict_rgb(&back, &img, 64, 16).unwrap();
    assert_eq!(a.scores, b.scores);
}
