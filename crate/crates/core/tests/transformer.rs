use std::fs;

use plop::bundle::read_bundle;
use plop::commands::{self, CaptureOptions};
use plop::nfn::{nfn_dataset, ActivationBatch, Convention};
use plop::placement::ModuleType;
use plop::tensor::Rng;
use plop::theory::AdamParams;
use plop::transformer::{
    build_model, module_name, nfn_map, synthetic_batch, train_toy, SyntheticTask, TrainConfig,
    TransformerConfig,
};
use plop::Error;

#[test]
fn map_is_identical_across_thread_counts() {
    let model = build_model(&TransformerConfig::default()).unwrap();
    let tokens = synthetic_batch(SyntheticTask::Arithmetic, 8, 32, &mut Rng::new(1));
    let maps: Vec<_> = [1, 2, 8]
        .iter()
        .map(|&w| {
            commands::in_pool(Some(w), || {
                nfn_map(&model, &tokens, 4, 3, Convention::Squared)
            })
            .unwrap()
            .unwrap()
        })
        .collect();
    for pair in maps.windows(2) {
        assert_eq!(pair[0], pair[1]);
    }
}

#[test]
fn training_on_arithmetic_reduces_loss() {
    let mut model = build_model(&TransformerConfig::default()).unwrap();
    let losses = train_toy(&mut model, &TrainConfig::default()).unwrap();
    assert_eq!(losses.len(), 500);
    assert!(
        losses[499] < 0.8 * losses[0],
        "{} -> {}",
        losses[0],
        losses[499]
    );
}

#[test]
fn divergence_is_an_error() {
    let mut model = build_model(&TransformerConfig::default()).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        adam: AdamParams {
            lr: 1e38,
            ..AdamParams::default()
        },
        ..TrainConfig::default()
    };
    assert!(matches!(
        train_toy(&mut model, &cfg),
        Err(Error::Diverged { .. })
    ));
}

#[test]
fn padded_capture_through_token_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let tokens = r#"{"tokens": [[49, 43, 50, 61, 51, 0, 0, 0], [52, 43, 52, 61, 56, 59, 0, 0]],
                     "mask": [[true, true, true, true, true, false, false, false],
                              [true, true, true, true, true, true, false, false]]}"#;
    fs::write(dir.join("tokens.json"), tokens).unwrap();
    commands::capture(&CaptureOptions {
        tokens: Some(dir.join("tokens.json")),
        output_dir: dir.to_path_buf(),
        ..CaptureOptions::default()
    })
    .unwrap();
    let acts = read_bundle(&dir.join("activations.manifest.json")).unwrap();
    let weights = read_bundle(&dir.join("weights.manifest.json")).unwrap();
    assert_eq!(acts.len(), 14);
    for a in &acts {
        assert_eq!(a.shape[0], 16);
        let w = weights
            .iter()
            .find(|w| w.name == a.name)
            .unwrap()
            .to_matrix()
            .unwrap();
        let batch = ActivationBatch::new(a.name.clone(), a.to_rows().unwrap()).unwrap();
        let s = nfn_dataset(&w, &batch, 2, &Rng::new(0), Convention::Squared).unwrap();
        assert_eq!(s.n_samples, 11, "{}", a.name);
        assert_eq!(s.n_samples + s.n_skipped, 16);
    }
    assert_eq!(acts[0].name, module_name(0, ModuleType::Query));
    assert_eq!(acts[0].module_type, Some(ModuleType::Query));
}

#[test]
fn trained_weights_round_trip_through_capture() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let opts = CaptureOptions {
        train_steps: 3,
        output_dir: dir.to_path_buf(),
        ..CaptureOptions::default()
    };
    commands::capture(&opts).unwrap();
    let tensors = read_bundle(&dir.join("weights.manifest.json")).unwrap();
    let loaded = plop::transformer::Model::from_tensors(&opts.model, &tensors).unwrap();
    let mut trained = build_model(&opts.model).unwrap();
    train_toy(
        &mut trained,
        &TrainConfig {
            steps: 3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(loaded, trained);
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("capture.json")).unwrap()).unwrap();
    assert_eq!(record["train_losses"].as_array().unwrap().len(), 3);
    assert_eq!(record["config"]["model"]["d_model"], 64);
}
