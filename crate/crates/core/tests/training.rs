mod common;

use tabdeco_core::data::synthetic::{generate, LabelRule, LABEL};
use tabdeco_core::data::{batches, prepare, split_indices, Batch, SchemaHint, SplitFractions};
use tabdeco_core::error::Error;
use tabdeco_core::losses::Scheme;
use tabdeco_core::training::{
    evaluate, load_checkpoint, save_checkpoint, train, train_step, Checkpoint, OptimizerState,
};
use tabdeco_core::{InputLayout, LossSpec, ModelConfig, TabDeco, TrainConfig, Variant};

fn small_model(layout: InputLayout, variant: Variant) -> TabDeco {
    let cfg = ModelConfig {
        d: 8,
        layers: 1,
        heads: 2,
        variant,
        ..ModelConfig::default()
    };
    TabDeco::new(cfg, layout).unwrap()
}

fn small_train(schemes: &[Scheme], alpha: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs,
        patience: 3,
        seed: 4,
        loss: LossSpec {
            alpha,
            ..LossSpec::with_schemes(schemes.iter().copied())
        },
        ..TrainConfig::default()
    }
}

#[test]
fn one_step_changes_every_parameter_and_stays_finite() {
    let data = common::synthetic(200, 0, LabelRule::default());
    let model = TabDeco::new(ModelConfig::default(), InputLayout::for_dataset(&data.train)).unwrap();
    let batch = Batch::from_dataset(&data.train, &(0..16).collect::<Vec<_>>());
    for schemes in [vec![], vec![Scheme::All], Scheme::ALL.to_vec()] {
        let cfg = TrainConfig {
            loss: LossSpec::with_schemes(schemes.iter().copied()),
            ..TrainConfig::default()
        };
        let before = model.init(1);
        let mut params = before.clone();
        let mut state = OptimizerState::new(&params);
        let stats = train_step(&model, &mut params, &mut state, &cfg, &batch, None).unwrap();
        assert!(stats.total.is_finite() && params.all_finite());
        assert_eq!(stats.contrast.len(), schemes.len());
        let names = params.names();
        for ((name, a), b) in names.iter().zip(before.to_vec()).zip(params.to_vec()) {
            // without gg the table gets no gradient and only decays
            if name == "global_table" && !schemes.contains(&Scheme::Gg) {
                continue;
            }
            assert_ne!(a.data(), b.data(), "{name} unchanged with {schemes:?}");
        }
    }
}

#[test]
fn non_finite_loss_names_the_component() {
    let data = common::synthetic(100, 0, LabelRule::default());
    let model = small_model(InputLayout::for_dataset(&data.train), Variant::Both);
    let mut params = model.init(0);
    params.cls.data_mut()[0] = f32::NAN;
    let mut state = OptimizerState::new(&params);
    let batch = Batch::from_dataset(&data.train, &[0, 1, 2]);
    let err = train_step(&model, &mut params, &mut state, &TrainConfig::default(), &batch, None).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(w) if w == "supervised loss"), "{err}");
}

#[test]
fn zero_alpha_still_logs_contrast() {
    let data = common::synthetic(300, 1, LabelRule::default());
    let model = small_model(InputLayout::for_dataset(&data.train), Variant::Both);
    let out = train(
        &model,
        &small_train(&[Scheme::Sf, Scheme::Gg], 0.0, 2),
        &data.train,
        &data.val,
    )
    .unwrap();
    for rec in &out.history {
        assert_eq!(rec.train_total_loss, rec.train_sup_loss);
        assert_eq!(rec.train_contrast_losses.len(), 2);
        assert!(rec.train_contrast_losses.values().all(|&v| v > 0.0));
    }
}

#[test]
fn training_is_deterministic() {
    let data = common::synthetic(300, 2, LabelRule::default());
    let model = small_model(InputLayout::for_dataset(&data.train), Variant::Both);
    let cfg = small_train(&[Scheme::Fs, Scheme::S], 0.1, 3);
    let a = train(&model, &cfg, &data.train, &data.val).unwrap();
    let b = train(&model, &cfg, &data.train, &data.val).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let other = train(&model, &TrainConfig { seed: 5, ..cfg }, &data.train, &data.val).unwrap();
    assert_ne!(a.params, other.params);
}

#[test]
fn dropout_training_is_deterministic() {
    let data = common::synthetic(200, 2, LabelRule::default());
    let mut model = small_model(InputLayout::for_dataset(&data.train), Variant::Both);
    model.config.dropout = 0.1;
    let cfg = small_train(&[Scheme::All], 0.1, 2);
    let a = train(&model, &cfg, &data.train, &data.val).unwrap();
    let b = train(&model, &cfg, &data.train, &data.val).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn early_stopping_respects_patience() {
    // labels are pure noise, so validation AUROC plateaus quickly
    let data = common::synthetic(200, 3, LabelRule::Logistic { scale: 0.0 });
    let model = small_model(InputLayout::for_dataset(&data.train), Variant::FeatureOnly);
    let cfg = TrainConfig {
        optimizer: tabdeco_core::training::AdamWConfig {
            learning_rate: 1e-2,
            ..Default::default()
        },
        ..small_train(&[], 0.0, 60)
    };
    let out = train(&model, &cfg, &data.train, &data.val).unwrap();
    let last = out.history.last().unwrap().epoch;
    assert!(last < 60, "never stopped early");
    assert!(last <= out.best_epoch + cfg.patience);
    let best = out.history.iter().map(|r| r.val_metric).fold(f64::MIN, f64::max);
    assert_eq!(out.best_val_metric, best);
    let again = evaluate(&model, &out.params, &data.val, cfg.batch_size, None).unwrap();
    assert_eq!(again.value, out.best_val_metric);
}

#[test]
fn untrained_model_is_near_chance() {
    // balanced labels independent of the features, so scores carry no signal
    let data = common::synthetic(1000, 4, LabelRule::Logistic { scale: 0.0 });
    let layout = InputLayout::for_dataset(&data.train);
    for variant in Variant::ALL {
        let model = TabDeco::new(
            ModelConfig {
                variant,
                ..ModelConfig::default()
            },
            layout.clone(),
        )
        .unwrap();
        for seed in 0..10 {
            let r = evaluate(&model, &model.init(seed), &data.test, 128, None).unwrap();
            assert!((0.3..=0.7).contains(&r.value), "{variant:?} seed {seed}: {}", r.value);
        }
    }
}

#[test]
fn evaluation_is_repeatable_and_survives_checkpointing() {
    let data = common::synthetic(300, 5, LabelRule::default());
    let model = small_model(InputLayout::for_dataset(&data.train), Variant::Both);
    let out = train(&model, &small_train(&[Scheme::Gg], 0.1, 2), &data.train, &data.val).unwrap();
    let first = evaluate(&model, &out.params, &data.test, 32, None).unwrap();
    assert_eq!(first, evaluate(&model, &out.params, &data.test, 32, None).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = Checkpoint {
        model: model.clone(),
        params: out.params,
        extra: serde_json::Value::Null,
    };
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params, ckpt.params);
    assert_eq!(
        first,
        evaluate(&loaded.model, &loaded.params, &data.test, 32, None).unwrap()
    );
}

#[test]
fn test_rows_never_influence_training() {
    let hint = SchemaHint::with_label(LABEL);
    let fractions = SplitFractions::default();
    let raw = generate(300, 6, LabelRule::default()).unwrap();
    let [_, _, test_rows] = split_indices(raw.len(), fractions, 6).unwrap();
    let mut perturbed = raw.clone();
    for &r in &test_rows {
        for cell in perturbed.rows[r].iter_mut().take(6) {
            *cell = "1000.0".into();
        }
        perturbed.rows[r][6] = "purple".into();
        perturbed.rows[r][8] = "1".into();
    }
    let a = prepare(&raw, &hint, fractions, 6).unwrap();
    let b = prepare(&perturbed, &hint, fractions, 6).unwrap();
    assert_ne!(a.test, b.test);
    let model = small_model(InputLayout::for_dataset(&a.train), Variant::Both);
    let cfg = small_train(&[Scheme::Sf], 0.1, 3);
    let ra = train(&model, &cfg, &a.train, &a.val).unwrap();
    let rb = train(&model, &cfg, &b.train, &b.val).unwrap();
    assert_eq!(ra.best_epoch, rb.best_epoch);
    assert_eq!(ra.history, rb.history);
}

#[test]
fn skips_single_row_batches_when_contrasting() {
    let data = common::synthetic(100, 7, LabelRule::default());
    let n = data.train.len();
    let model = small_model(InputLayout::for_dataset(&data.train), Variant::Both);
    let cfg = TrainConfig {
        batch_size: n - 1,
        ..small_train(&[Scheme::S], 0.1, 1)
    };
    assert_eq!(batches(&data.train, n - 1, true, 0, false).unwrap().len(), 2);
    let out = train(&model, &cfg, &data.train, &data.val).unwrap();
    assert_eq!(out.history[0].skipped_batches, 1);
}

#[test]
fn separable_data_is_learned_in_twenty_epochs() {
    let data = common::synthetic(500, 8, LabelRule::Threshold);
    let model = TabDeco::new(ModelConfig::default(), InputLayout::for_dataset(&data.train)).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        patience: 20,
        seed: 8,
        loss: LossSpec {
            alpha: 0.0,
            ..LossSpec::default()
        },
        ..TrainConfig::default()
    };
    let out = train(&model, &cfg, &data.train, &data.val).unwrap();
    assert_eq!(out.history.len(), 20);
    assert!(out.best_val_metric >= 0.95, "best val {}", out.best_val_metric);
    assert!(out.history[19].train_total_loss < out.history[0].train_total_loss);
}
