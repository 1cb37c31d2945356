mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmgpmsi::checkpoint::{from_bytes, load_checkpoint, to_bytes};
use rmgpmsi::data::{make_synthetic, Dataset, Sample, SampleSource, TransformMode, TransformSpec};
use rmgpmsi::image::{ImageTensor, ValueRange};
use rmgpmsi::model::{Model, ModelConfig, ParamGroup};
use rmgpmsi::nn::Slot;
use rmgpmsi::optim::{GroupRates, Sgd};
use rmgpmsi::trainer::{build_schedule, fit, train_step, FitOptions, MetricsLog, StepPolicy, TrainConfig};
use rmgpmsi::{Error, ErrorClass};

fn tiny_train(stage_num: usize) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr_pretrained: 0.05,
        lr_new: 0.05,
        freeze_epochs: 0,
        stage_num,
        transform: TransformSpec {
            resize_to: 16,
            crop_to: 16,
            mode: TransformMode::Train,
            flip_prob: 0.5,
        },
        ..TrainConfig::default()
    }
}

fn params(model: &mut Model, keep: impl Fn(ParamGroup) -> bool) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    model.visit_grouped(&mut |group, _, slot| {
        if let Slot::Param(p) = slot {
            if keep(group) {
                out.push(common::bits(p.value.iter().copied()));
            }
        }
    });
    out
}

fn batch() -> (Vec<ImageTensor>, Vec<usize>) {
    let data = make_synthetic(3, 2, 16, 1).unwrap();
    (data.samples.iter().map(|s| s.load().unwrap()).collect(), data.labels())
}

fn step(model: &mut Model, policy: StepPolicy) {
    let (images, labels) = batch();
    let schedule = build_schedule(model.stages(), model.config().stage_num).unwrap();
    let mut opt = Sgd::new(0.9, 5e-4);
    train_step(model, &mut opt, &images, &labels, &schedule, policy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
}

#[test]
fn zero_learning_rates_leave_parameters_bit_identical() {
    let mut model = Model::new(common::tiny_model(3, 3, true)).unwrap();
    let before = params(&mut model, |_| true);
    let policy = StepPolicy {
        rates: GroupRates { pretrained: 0.0, new: 0.0 },
        freeze_backbone: false,
    };
    step(&mut model, policy);
    assert_eq!(params(&mut model, |_| true), before);
}

#[test]
fn freezing_holds_only_the_backbone() {
    let mut model = Model::new(common::tiny_model(3, 3, true)).unwrap();
    let backbone = params(&mut model, |g| g.is_backbone());
    let rest = params(&mut model, |g| !g.is_backbone());
    let policy = StepPolicy {
        rates: GroupRates { pretrained: 0.1, new: 0.1 },
        freeze_backbone: true,
    };
    step(&mut model, policy);
    assert_eq!(params(&mut model, |g| g.is_backbone()), backbone);
    let after = params(&mut model, |g| !g.is_backbone());
    assert!(after.iter().zip(&rest).all(|(a, b)| a != b), "every non-backbone tensor should move");
}

#[test]
fn freeze_epochs_keep_the_backbone_at_its_initialization() {
    let model = common::tiny_model(2, 3, true);
    let data = make_synthetic(3, 4, 16, 2).unwrap();
    let mut config = tiny_train(2);
    config.freeze_epochs = 1;
    let initial = params(&mut Model::new(model.clone()).unwrap(), |g| g.is_backbone());
    let options = FitOptions {
        stop_after: Some(1),
        ..FitOptions::default()
    };
    let mut result = fit(&data, &model, &config, options).unwrap();
    assert_eq!(params(&mut result.model, |g| g.is_backbone()), initial);
    let mut result = fit(&data, &model, &config, FitOptions::default()).unwrap();
    assert_ne!(params(&mut result.model, |g| g.is_backbone()), initial);
}

#[test]
fn metrics_have_one_row_per_phase_plus_evaluation() {
    let model = common::tiny_model(3, 3, true);
    let data = make_synthetic(3, 4, 16, 3).unwrap();
    let result = fit(&data, &model, &tiny_train(3), FitOptions::default()).unwrap();
    assert_eq!(result.metrics.rows.len(), 3 * (3 + 1 + 1));
    assert_eq!(result.metrics.eval_rows().count(), 3);
    let parsed = MetricsLog::parse(&result.metrics.to_csv()).unwrap();
    assert_eq!(parsed.to_csv(), result.metrics.to_csv());
    for (epoch, row) in result.metrics.eval_rows().enumerate() {
        let lr = tiny_train(3).rates_at(epoch).new;
        assert!((row.lr_new - lr).abs() < 1e-8, "epoch {epoch}: {} vs {lr}", row.lr_new);
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let model = common::tiny_model(3, 3, true);
    let config = tiny_train(3);
    let data = make_synthetic(3, 4, 16, 4).unwrap();
    let straight = fit(&data, &model, &config, FitOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let options = FitOptions {
        stop_after: Some(1),
        checkpoint_path: Some(path.clone()),
        ..FitOptions::default()
    };
    let partial = fit(&data, &model, &config, options).unwrap();
    assert_eq!(partial.epochs_completed, 1);
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.epochs_completed, 1);
    let options = FitOptions {
        resume: Some(ckpt),
        ..FitOptions::default()
    };
    let resumed = fit(&data, &model, &config, options).unwrap();
    assert_eq!(resumed.metrics.to_csv(), straight.metrics.to_csv());
    assert_eq!(to_bytes(&resumed.checkpoint(&config)), to_bytes(&straight.checkpoint(&config)));
}

#[test]
fn checkpoint_bytes_round_trip() {
    let model = common::tiny_model(2, 3, false);
    let data = make_synthetic(3, 2, 16, 5).unwrap();
    let mut config = tiny_train(2);
    config.epochs = 1;
    let result = fit(&data, &model, &config, FitOptions::default()).unwrap();
    let bytes = to_bytes(&result.checkpoint(&config));
    let mut restored = from_bytes(&bytes).unwrap();
    assert_eq!(to_bytes(&restored), bytes);
    let img = common::random_image(16, 9);
    let mut original = result.model.clone();
    assert_eq!(original.predict(&[&img]).unwrap(), restored.model.predict(&[&img]).unwrap());
}

#[test]
fn resuming_with_a_different_stage_num_names_both_values() {
    let model = common::tiny_model(3, 3, true);
    let config = tiny_train(3);
    let data = make_synthetic(3, 2, 16, 6).unwrap();
    let options = FitOptions {
        stop_after: Some(1),
        ..FitOptions::default()
    };
    let ckpt = fit(&data, &model, &config, options).unwrap().checkpoint(&config);
    let other_model = ModelConfig { stage_num: 2, ..model };
    let other_train = TrainConfig { stage_num: 2, ..config };
    let err = ckpt.check_compatible(&other_model, &other_train).unwrap_err();
    assert!(matches!(err, Error::ResumeMismatch(_)));
    let msg = err.to_string();
    assert!(msg.contains("stage_num") && msg.contains('3') && msg.contains('2'), "{msg}");
    let options = FitOptions {
        resume: Some(ckpt),
        ..FitOptions::default()
    };
    let err = fit(&data, &other_model, &other_train, options).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Config);
}

#[test]
fn non_finite_input_is_reported_as_divergence() {
    let data = make_synthetic(3, 2, 16, 7).unwrap();
    let mut samples = data.samples.clone();
    let mut poisoned = samples[0].load().unwrap();
    poisoned.values_mut()[0] = f32::NAN;
    samples[0] = Sample {
        source: SampleSource::Memory(poisoned),
        label: samples[0].label,
    };
    let data = Dataset {
        classes: data.classes.clone(),
        samples,
    };
    let mut config = tiny_train(3);
    config.batch_size = 6;
    let err = fit(&data, &common::tiny_model(3, 3, true), &config, FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn invalid_configurations_are_rejected_before_training() {
    let data = make_synthetic(3, 2, 16, 8).unwrap();
    let model = common::tiny_model(3, 3, true);
    let bad = [
        TrainConfig { freeze_epochs: 3, ..tiny_train(3) },
        TrainConfig { lr_new: f64::NAN, ..tiny_train(3) },
        TrainConfig { batch_size: 0, ..tiny_train(3) },
        TrainConfig { stage_num: 2, ..tiny_train(3) },
    ];
    for config in bad {
        let err = fit(&data, &model, &config, FitOptions::default()).unwrap_err();
        assert_eq!(err.class(), ErrorClass::Config, "{err}");
    }
    let err = fit(&data, &ModelConfig { stage_num: 4, ..model.clone() }, &tiny_train(4), FitOptions::default())
        .unwrap_err();
    assert!(matches!(err, Error::InvalidStageNum { stage_num: 4, stages: 3 }), "{err}");
    let empty = Dataset {
        classes: data.classes.clone(),
        samples: Vec::new(),
    };
    assert!(matches!(fit(&empty, &model, &tiny_train(3), FitOptions::default()), Err(Error::DatasetEmpty)));
}

#[test]
fn constant_images_train_without_error() {
    let img = ImageTensor::zeros(16, 16, 3, ValueRange::UnitFloat);
    let data = Dataset {
        classes: vec!["a".into(), "b".into()],
        samples: (0..4)
            .map(|i| Sample {
                source: SampleSource::Memory(img.clone()),
                label: i % 2,
            })
            .collect(),
    };
    let mut config = tiny_train(1);
    config.epochs = 1;
    fit(&data, &common::tiny_model(1, 2, true), &config, FitOptions::default()).unwrap();
}
