mod common;

use common::{model_and_inputs, perturb_adapters, reduced_config};
use memfuse_fusion::{check_gradients, FusionConfig, FusionError, FusionInput, Pooling, TrainMode};

const TARGETS: [f64; 4] = [0.15, 0.8, 0.45, 0.6];

#[test]
fn all_trainable_groups_pass_with_an_unfrozen_layer() {
    let (mut model, xs) = model_and_inputs(&reduced_config(TrainMode::Lora), 4);
    perturb_adapters(&mut model, 11);
    model.unfreeze_layer(0).unwrap();
    let refs: Vec<&FusionInput> = xs.iter().collect();
    let report = check_gradients(&model, &refs, &TARGETS, 1e-4).unwrap();
    let names: Vec<&str> = report.entries.iter().map(|e| e.param.as_str()).collect();
    for expected in [
        "proj.e5_title.weight",
        "proj.visual.bias",
        "layers.0.q.lora_a",
        "layers.0.down.lora_b",
        "pool.query",
        "head.w1",
        "layers.0.gate",
        "layers.0.attn_norm",
    ] {
        assert!(names.contains(&expected), "{expected} not checked");
    }
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn frozen_mode_with_mean_pooling_passes() {
    let cfg = FusionConfig {
        pooling: Pooling::Mean,
        ..reduced_config(TrainMode::Frozen)
    };
    let (model, xs) = model_and_inputs(&cfg, 4);
    let refs: Vec<&FusionInput> = xs.iter().collect();
    let report = check_gradients(&model, &refs, &TARGETS, 1e-4).unwrap();
    assert!(report.entries.iter().all(|e| !e.param.contains("lora")));
}

#[test]
fn dropout_is_rejected() {
    let cfg = FusionConfig {
        lora_dropout: 0.1,
        ..reduced_config(TrainMode::Lora)
    };
    let (model, xs) = model_and_inputs(&cfg, 4);
    let refs: Vec<&FusionInput> = xs.iter().collect();
    assert!(matches!(
        check_gradients(&model, &refs, &TARGETS, 1e-4),
        Err(FusionError::InvalidConfig(_))
    ));
}
