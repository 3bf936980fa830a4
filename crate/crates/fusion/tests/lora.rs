mod common;

use common::{model_and_inputs, perturb_adapters, reduced_config};
use memfuse_fusion::{FusionConfig, FusionError, FusionInput, TrainMode};

fn predict(m: &memfuse_fusion::FusionModel, xs: &[FusionInput]) -> Vec<f64> {
    let refs: Vec<&FusionInput> = xs.iter().collect();
    m.predict(&refs).unwrap()
}

#[test]
fn zero_initialized_adapters_are_an_identity() {
    for pooling in [memfuse_fusion::Pooling::Mean, memfuse_fusion::Pooling::Attention] {
        let base = FusionConfig {
            pooling,
            lora_dropout: 0.15,
            ..FusionConfig::tiny()
        };
        let (frozen, xs) = model_and_inputs(
            &FusionConfig {
                mode: TrainMode::Frozen,
                ..base.clone()
            },
            6,
        );
        let (lora, _) = model_and_inputs(
            &FusionConfig {
                mode: TrainMode::Lora,
                ..base
            },
            6,
        );
        let a = predict(&frozen, &xs);
        let b = predict(&lora, &xs);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn merge_matches_adapter_forward() {
    let cfg = FusionConfig {
        lora_dropout: 0.0,
        ..FusionConfig::tiny()
    };
    let (mut lora, xs) = model_and_inputs(&cfg, 8);
    perturb_adapters(&mut lora, 3);
    let merged = lora.lora_merge().unwrap();
    assert!(!merged.has_lora());
    let a = predict(&lora, &xs);
    let b = predict(&merged, &xs);
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-6, "max |diff| = {diff}");
    assert_ne!(merged.param("layers.0.q"), lora.param("layers.0.q"));
}

#[test]
fn merge_of_zero_b_keeps_base_weights() {
    let (lora, _) = model_and_inputs(&reduced_config(TrainMode::Lora), 2);
    let merged = lora.lora_merge().unwrap();
    for p in merged.params() {
        assert_eq!(p.value, *lora.param(&p.name).unwrap(), "{}", p.name);
    }
}

#[test]
fn merge_requires_adapters() {
    let (frozen, _) = model_and_inputs(&reduced_config(TrainMode::Frozen), 2);
    assert_eq!(frozen.lora_merge().unwrap_err(), FusionError::NotLoraModel);
}

#[test]
fn scale_is_one_when_rank_equals_alpha() {
    let cfg = FusionConfig {
        lora_rank: 32,
        lora_alpha: 32.0,
        ..FusionConfig::default()
    };
    assert_eq!(cfg.lora().scale(), 1.0);
}
