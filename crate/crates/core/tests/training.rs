//! Learning behaviour and checkpoint persistence of the full model.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;
use vesselnext::trainer::{fit, AdamConfig, Checkpoint, TrainConfig, TrainImage};
use vesselnext::{Model, Tensor};

use common::{overfit, tiny_config};

#[test]
fn overfit_loss_trends_down_and_converges() {
    let losses = overfit(tiny_config(), 0, 600);
    assert!(losses[200] < losses[10], "{} vs {}", losses[200], losses[10]);
    let below = losses.iter().position(|&l| l < 0.05);
    assert!(below.is_some(), "never below 0.05; final {}", losses[600]);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut model = Model::build(tiny_config(), 9).unwrap();
    model.params_mut().round_to_f32();
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.tunx");
    let ckpt = Checkpoint {
        model: model.clone(),
        adam: None,
        epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path, AdamConfig::default()).unwrap();
    assert_eq!(back.model.config(), model.config());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let x = Tensor::rand_uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let a = model.predict(&x).unwrap();
        let b = back.model.predict(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn trained_checkpoint_restores_optimiser_state() {
    let image = |h, w| {
        let truth = vesselnext::pipeline::Raster::from_fn(h, w, |r, c| u8::from((2 * r + c) % 9 < 2));
        TrainImage {
            image: truth.map(|v| if v == 1 { 0.3 } else { 0.7 }),
            truth,
        }
    };
    let mut model = Model::build(tiny_config(), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch: 2,
        patches_per_image: 2,
        val_patches_per_image: 2,
        ..Default::default()
    };
    let report = fit(&mut model, &[image(20, 20)], &[image(16, 16)], &cfg, None, |_, _| Ok(())).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("run.tunx");
    Checkpoint {
        model: model.clone(),
        adam: Some(report.state.adam.clone()),
        epoch: report.state.epoch,
        best_val_loss: report.best_val_loss,
    }
    .save(&path)
    .unwrap();
    let back = Checkpoint::load(&path, cfg.adam()).unwrap();
    assert_eq!(back.epoch, 1);
    assert_eq!(back.best_val_loss, report.best_val_loss as f32 as f64);
    let adam = back.adam.unwrap();
    assert_eq!(adam.step, report.state.adam.step);
    for (a, b) in adam.m.iter().zip(&report.state.adam.m) {
        assert_eq!(a, &b.map(|v| v as f32 as f64));
    }
}

#[test]
fn checkpoint_with_foreign_tensor_is_rejected() {
    let model = Model::build(tiny_config(), 0).unwrap();
    let ckpt = Checkpoint {
        model,
        adam: None,
        epoch: 0,
        best_val_loss: 1.0,
    };
    let mut file = ckpt.to_file();
    file.push("stray.weight", Tensor::ones([2]));
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.tunx");
    file.save(&path).unwrap();
    let err = Checkpoint::load(&path, AdamConfig::default()).unwrap_err();
    assert!(err.to_string().contains("stray.weight"), "{err}");
}
