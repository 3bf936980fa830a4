mod common;

use common::{bundle, model_and_inputs, reduced_config};
use memfuse_fusion::model::prompt_text;
use memfuse_fusion::{FusionConfig, FusionError, FusionInput, FusionModel, Pooling, PromptKind, StreamDims, TrainMode};

fn predict(m: &FusionModel, xs: &[&FusionInput]) -> Vec<f64> {
    m.predict(xs).unwrap()
}

#[test]
fn outputs_lie_strictly_inside_unit_interval() {
    let (m, xs) = model_and_inputs(&FusionConfig::tiny(), 10);
    let refs: Vec<&FusionInput> = xs.iter().collect();
    for p in predict(&m, &refs) {
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn duplicates_in_a_batch_predict_equally() {
    let (m, xs) = model_and_inputs(&FusionConfig::tiny(), 3);
    let p = predict(&m, &[&xs[0], &xs[1], &xs[0], &xs[2], &xs[0]]);
    assert_eq!(p[0], p[2]);
    assert_eq!(p[0], p[4]);
    assert_eq!(predict(&m, &[&xs[0]])[0], p[0]);
}

#[test]
fn zero_query_attention_pooling_equals_mean_pooling() {
    let mean_cfg = FusionConfig {
        pooling: Pooling::Mean,
        ..FusionConfig::tiny()
    };
    let attn_cfg = FusionConfig {
        pooling: Pooling::Attention,
        ..FusionConfig::tiny()
    };
    let (mean, xs) = model_and_inputs(&mean_cfg, 5);
    let (attn, _) = model_and_inputs(&attn_cfg, 5);
    assert!(attn.param("pool.query").unwrap().data.iter().all(|&q| q == 0.0));
    let refs: Vec<&FusionInput> = xs.iter().collect();
    for (a, b) in predict(&mean, &refs).iter().zip(predict(&attn, &refs)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sequence_layout_and_truncation() {
    let cfg = FusionConfig {
        max_seq: 20,
        ..reduced_config(TrainMode::Frozen)
    };
    let b = bundle("x", 1, 6, 3, 4);
    let m = FusionModel::new(&cfg, StreamDims::from_bundle(&b, None)).unwrap();
    assert_eq!(m.dims().n_virtual(), 6);
    let input = m
        .prepare("a long title that will not fit", &b, PromptKind::Rationale)
        .unwrap();
    assert_eq!(input.tokens.len() + 6, 20);
    assert_eq!(input.tokens[0], 1);
    assert_eq!(*input.tokens.last().unwrap(), 2);
    assert_eq!(input.tokens[1], 3 + b'a' as usize);
}

#[test]
fn too_many_virtual_tokens_is_rejected() {
    let cfg = FusionConfig {
        max_seq: 8,
        ..reduced_config(TrainMode::Frozen)
    };
    let b = bundle("x", 1, 6, 5, 4);
    let m = FusionModel::new(&cfg, StreamDims::from_bundle(&b, None)).unwrap();
    assert_eq!(
        m.prepare("t", &b, PromptKind::Rationale).unwrap_err(),
        FusionError::SequenceTooLong { len: 10, max: 8 }
    );
}

#[test]
fn stream_width_mismatch_is_rejected() {
    let cfg = reduced_config(TrainMode::Frozen);
    let b = bundle("x", 1, 6, 3, 4);
    let m = FusionModel::new(&cfg, StreamDims::from_bundle(&b, None)).unwrap();
    let narrow = bundle("y", 2, 5, 3, 4);
    assert!(matches!(
        m.prepare("t", &narrow, PromptKind::Rationale),
        Err(FusionError::StreamMismatch(_))
    ));
    let fewer_rows = bundle("z", 3, 6, 2, 4);
    assert!(matches!(
        m.prepare("t", &fewer_rows, PromptKind::Rationale),
        Err(FusionError::StreamMismatch(_))
    ));
}

#[test]
fn prompt_kind_only_switches_generated_text() {
    let b = bundle("x", 1, 6, 3, 4);
    assert_eq!(prompt_text("T", &b, PromptKind::Rationale), "T\nrationale for x");
    assert_eq!(prompt_text("T", &b, PromptKind::Summary), "T\nsummary of x");
    let m = FusionModel::new(&reduced_config(TrainMode::Frozen), StreamDims::from_bundle(&b, None)).unwrap();
    let r = m.prepare("T", &b, PromptKind::Rationale).unwrap();
    let s = m.prepare("T", &b, PromptKind::Summary).unwrap();
    assert_eq!(r.text, s.text);
    assert_eq!(r.visual, s.visual);
    assert_ne!(r.tokens, s.tokens);
}

#[test]
fn generated_embedding_adds_one_virtual_token() {
    let b = bundle("x", 1, 6, 3, 4);
    let dims = StreamDims::from_bundle(&b, Some(PromptKind::Summary));
    assert_eq!(dims.n_virtual(), 7);
    assert_eq!(dims.text.last().unwrap().0, "e5_summary");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let (a, xs) = model_and_inputs(&FusionConfig::tiny(), 4);
    a.save_checkpoint(&path).unwrap();
    let (mut b, _) = model_and_inputs(
        &FusionConfig {
            seed: 99,
            ..FusionConfig::tiny()
        },
        4,
    );
    b.load_checkpoint(&path).unwrap();
    let refs: Vec<&FusionInput> = xs.iter().collect();
    assert_eq!(predict(&a, &refs), predict(&b, &refs));

    let (mut other, _) = model_and_inputs(&reduced_config(TrainMode::Lora), 2);
    assert!(matches!(other.load_checkpoint(&path), Err(FusionError::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(b.load_checkpoint(&path), Err(FusionError::Checkpoint(_))));
}
