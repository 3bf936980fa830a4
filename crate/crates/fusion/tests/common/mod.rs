#![allow(dead_code)]

use memfuse_core::features::FeatureBundle;
use memfuse_fusion::{FusionConfig, FusionInput, FusionModel, Pooling, PromptKind, StreamDims, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bundle(id: &str, seed: u64, d_text: usize, n_vis: usize, d_vis: usize) -> FeatureBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    FeatureBundle {
        id: id.to_string(),
        e5_subtitles: v(d_text),
        e5_title: v(d_text),
        e5_description: v(d_text),
        e5_summary: v(d_text),
        e5_rationale: v(d_text),
        visual_block: (0..n_vis).map(|_| v(d_vis)).collect(),
        numeric: vec![],
        summary_text: format!("summary of {id}"),
        rationale_text: format!("rationale for {id}"),
    }
}

/// The reduced configuration used for gradient checks.
pub fn reduced_config(mode: TrainMode) -> FusionConfig {
    FusionConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_seq: 24,
        lora_rank: 2,
        lora_alpha: 2.0,
        lora_dropout: 0.0,
        pooling: Pooling::Attention,
        mode,
        seed: 5,
        ..FusionConfig::default()
    }
}

pub fn model_and_inputs(cfg: &FusionConfig, n: usize) -> (FusionModel, Vec<FusionInput>) {
    let bundles: Vec<FeatureBundle> = (0..n)
        .map(|i| bundle(&format!("b{i}"), 100 + i as u64, 6, 3, 4))
        .collect();
    let model = FusionModel::new(cfg, StreamDims::from_bundle(&bundles[0], None)).unwrap();
    let inputs = bundles
        .iter()
        .enumerate()
        .map(|(i, b)| model.prepare(&format!("title {i}"), b, PromptKind::Rationale).unwrap())
        .collect();
    (model, inputs)
}

/// Fills every LoRA B matrix and the pooling query with small random values.
pub fn perturb_adapters(model: &mut FusionModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|p| p.name.ends_with("lora_b") || p.name == "pool.query")
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let t = model.param_mut(&name).unwrap();
        t.data.iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
    }
}
