//! Checks that need the default source model. It is trained once and
//! shared by every check in this file.

use prompt_adapt_core::adapt::{run_stream, AdaptConfig, AdaptState};
use prompt_adapt_core::classifier::{Classifier, TrainConfig};
use prompt_adapt_core::data::{build_stream, corrupt, source_split, CorruptionSpec, Domain, Family, Schedule, GLYPH_GEOMETRY};
use prompt_adapt_core::prompt::{init_prompts, PromptPair, WarmupConfig};
use prompt_adapt_core::tensor::Tensor;

fn accuracy(model: &Classifier, pair: &PromptPair, images: &Tensor, labels: &[usize]) -> f64 {
    let stream = build_stream(images, labels, &Schedule::Rounds { domains: vec![Domain::CLEAN], rounds: 1 }, 100, 1).unwrap();
    let mut correct = 0.0;
    for (i, b) in stream.batches.iter().enumerate() {
        let placement = pair.placement_for_batch(GLYPH_GEOMETRY, 11, i as u64).unwrap();
        let p = model.predict(&pair.apply(&b.images, &placement).unwrap()).unwrap();
        correct += (1.0 - p.error_rate(&b.truth.labels)) * b.truth.labels.len() as f64;
    }
    correct / labels.len() as f64
}

#[test]
fn default_source_model() {
    let (train, test) = source_split(5000, 1000, 10, 7).unwrap();
    let mut model = Classifier::build_default(10, GLYPH_GEOMETRY, 7).unwrap();
    let losses = model.train_source(&train.images, &train.labels, &TrainConfig::default()).unwrap();
    assert!(losses.last() < losses.first());
    model.freeze();

    let clean = model.predict_chunked(&test.images, 100).unwrap().error_rate(&test.labels);
    eprintln!("clean test error {clean:.4}");
    assert!(clean <= 0.05, "clean test accuracy below 95%: error {clean}");

    // Dataset qualification: every family hurts at its strongest severity.
    for family in Family::ALL {
        let images = corrupt(&test.images, &CorruptionSpec { family, severity: 5, seed: 3 }).unwrap();
        let err = model.predict_chunked(&images, 100).unwrap().error_rate(&test.labels);
        eprintln!("{family} severity 5 error {err:.4}");
        assert!(err > clean, "{family} at severity 5 does not hurt: {err} vs clean {clean}");
    }

    // Warmed prompts keep source accuracy.
    let cfg = AdaptConfig::default();
    let zero = cfg.prompts(&model).unwrap();
    let warm_cfg = WarmupConfig { epochs: 3, lr: cfg.lr, batch_size: 100, seed: 7, train_dsp: true, train_dap: true };
    let warm = init_prompts(&zero, &train.images, &train.labels, &model, &warm_cfg).unwrap();
    let (a_zero, a_warm) = (
        accuracy(&model, &zero, &train.images, &train.labels),
        accuracy(&model, &warm, &train.images, &train.labels),
    );
    assert!(a_warm >= a_zero - 0.005, "warm-up lost source accuracy: {a_warm} vs {a_zero}");

    // Adapting on a clean stream stays at the source test error.
    let stream = build_stream(&test.images, &test.labels, &Schedule::Rounds { domains: vec![Domain::CLEAN], rounds: 1 }, 100, 7).unwrap();
    let mut state = AdaptState::new(warm, cfg).unwrap();
    let log = run_stream(&mut state, &model, &stream).unwrap();
    assert!((log.mean_error() - clean).abs() <= 0.02, "clean stream error {} vs {clean}", log.mean_error());
}
