use std::collections::BTreeMap;
use std::process::Command;

use memfuse::runner::{ModelKind, RunDescriptor, TEST_SRCC_NOTE};
use memfuse::{audit_leakage, run_experiment, ExperimentConfig, MetricReport, RunnerError, ViolationKind};
use memfuse_core::corpus::{generate_synthetic, write_dataset, SyntheticSpec, Target};
use memfuse_core::features::{FeatureConfig, Providers};
use memfuse_core::splits::{nested_split, GroupKey, NestedSplits, SplitParams};
use proptest::prelude::*;

fn small_splits() -> (NestedSplits, BTreeMap<String, GroupKey>) {
    let ds = generate_synthetic(&SyntheticSpec::balanced(3, 10, 200)).unwrap();
    let pipe = memfuse::runner::Pipeline::new(&ds, Providers::mock(16), FeatureConfig::default()).unwrap();
    let groups = pipe.groups(0.10).unwrap();
    let splits = nested_split(&ds, &groups, Target::Score, SplitParams::default()).unwrap();
    (splits, groups)
}

#[test]
fn clean_splits_have_no_violations() {
    let (splits, groups) = small_splits();
    assert!(audit_leakage(&splits, &groups).is_empty());
}

#[test]
fn moving_one_record_into_a_foreign_group_is_one_violation() {
    let (splits, mut groups) = small_splits();
    let victim = splits.outer_folds[0].test_ids[0].clone();
    let foreign = splits.outer_folds[1].test_ids[0].clone();
    let g = groups[&foreign].clone();
    groups.insert(victim, g.clone());
    let v = audit_leakage(&splits, &groups);
    assert_eq!(v.len(), 1, "{v:?}");
    assert_eq!(v[0].kind, ViolationKind::GroupLeak);
    assert_eq!(v[0].group.as_ref(), Some(&g));
}

#[test]
fn a_dropped_test_id_is_a_coverage_violation() {
    let (mut splits, groups) = small_splits();
    let dropped = splits.outer_folds[2].test_ids.pop().unwrap();
    let v = audit_leakage(&splits, &groups);
    assert!(v
        .iter()
        .any(|x| x.kind == ViolationKind::Coverage && x.ids.contains(&dropped)));
}

#[test]
fn a_test_id_in_inner_training_is_an_overlap() {
    let (mut splits, groups) = small_splits();
    let leaked = splits.outer_folds[0].test_ids[0].clone();
    splits.outer_folds[0].inner_splits[0].train_ids.push(leaked);
    let v = audit_leakage(&splits, &groups);
    assert!(v.iter().any(|x| x.kind == ViolationKind::IdOverlap));
}

fn descriptor() -> RunDescriptor {
    RunDescriptor {
        target: Target::Brand,
        model: ModelKind::Hgbt,
        features: "E5(Text)".into(),
        prompt: None,
        pooling: None,
        label: "HGBT (E5(Text))".into(),
    }
}

proptest! {
    #[test]
    fn cv_metrics_are_fold_means(srcc in prop::collection::vec(-1.0f64..1.0, 5), rmse in prop::collection::vec(0.0f64..1.0, 5)) {
        let r = MetricReport::from_folds(descriptor(), srcc.clone(), rmse.clone(), vec![]);
        let m = |x: &[f64]| x.iter().sum::<f64>() / 5.0;
        prop_assert!((r.cv_srcc - m(&srcc)).abs() <= 1e-12);
        prop_assert!((r.cv_rmse - m(&rmse)).abs() <= 1e-12);
        let var = srcc.iter().map(|x| (x - m(&srcc)).powi(2)).sum::<f64>() / 5.0;
        prop_assert!((r.srcc_std - var.sqrt()).abs() <= 1e-12);
    }
}

const CONFIG: &str = r#"
name = "smoke"
embedding_dim = 16
max_fraction = 0.15

[data.synthetic]
seed = 5
n_channels = 8
channel_sizes = [15, 15, 15, 15, 15, 15, 15, 15]
d_vis = 4
n_vis_tokens = 2
d_text_hint = 16
signal_weight = 0.4
noise_std = 0.02

[[runs]]
target = "brand"
model = "hgbt"
trials = 2
pca_components = 3
features = { text = true, numeric = true, visual = true, summary = false }

[[runs]]
target = "score"
model = "fusion"
prompt = "summary"
pooling = "attention"
fusion = { n_layers = 1, d_model = 16, n_heads = 2, d_ff = 32, max_seq = 48, lora_rank = 2, lora_alpha = 2.0, max_epochs = 2, batch_size = 8 }
"#;

#[test]
fn config_parses_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(
        &path,
        CONFIG.replace("name = \"smoke\"", "name = \"smoke\"\ncache_dir = \"cache\""),
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.runs.len(), 2);
    assert_eq!(cfg.split_seed, 13);
    assert_eq!(cfg.n_bins, 5);
    assert_eq!(cfg.cache_dir.as_deref(), Some(dir.path().join("cache").as_path()));
    assert!(!cfg.runs[0].features.summary);
    assert_eq!(cfg.runs[1].tuner_seed, 13);
    let fusion = cfg.runs[1].fusion_settings().unwrap();
    assert_eq!(fusion.d_model, 16);
    assert_eq!(fusion.prompt, memfuse_fusion::PromptKind::Summary);
    assert_eq!(fusion.pooling, memfuse_fusion::Pooling::Attention);
    cfg.validate().unwrap();
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, CONFIG.replace("trials = 2", "trials = 2\nlearning_rate = 0.1")).unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(RunnerError::Config(_))));
}

#[test]
fn experiment_is_deterministic_and_has_one_row_per_run() {
    let cfg: ExperimentConfig = toml::from_str(CONFIG).unwrap();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.rows.len(), cfg.runs.len());
    assert_eq!(a.n_records, 120);
    for row in &a.rows {
        assert_eq!(row.fold_srcc.len(), 5);
    }

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.write(da.path()).unwrap();
    b.write(db.path()).unwrap();
    for f in ["report.json", "report.md"] {
        assert_eq!(
            std::fs::read(da.path().join(f)).unwrap(),
            std::fs::read(db.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let md = std::fs::read_to_string(da.path().join("report.md")).unwrap();
    assert!(md.contains(TEST_SRCC_NOTE));
    assert!(md.contains("Fusion Lora (E5(Text)+ViT, Attn, P: Sum.)"), "{md}");
}

#[test]
fn cli_exits_with_code_2_on_leaky_splits() {
    let bin = env!("CARGO_BIN_EXE_memfuse");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let splits = dir.path().join("splits.json");
    let ds = generate_synthetic(&SyntheticSpec::balanced(3, 10, 200)).unwrap();
    write_dataset(&ds, &data).unwrap();
    let ok = Command::new(bin)
        .args(["split", "--target", "brand", "--embedding-dim", "16", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&splits)
        .status()
        .unwrap();
    assert!(ok.success());

    let mut s = NestedSplits::load(&splits).unwrap();
    let victim = s.outer_folds[0].test_ids[0].clone();
    let foreign = s.outer_folds[1].test_ids[0].clone();
    let g = s.groups[&foreign].clone();
    s.groups.insert(victim, g);
    s.save(&splits).unwrap();

    let out = Command::new(bin)
        .args(["train-hgbt", "--trials", "1", "--data"])
        .arg(&data)
        .arg("--splits")
        .arg(&splits)
        .arg("--bundles")
        .arg(dir.path())
        .arg("--report")
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_example_config_is_valid() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg = ExperimentConfig::load(root.join("planted.toml")).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.load_data().unwrap().len(), 340);
    let tiny = cfg.runs[2].fusion_settings().unwrap();
    assert_eq!(
        tiny,
        memfuse_fusion::FusionConfig {
            prompt: tiny.prompt,
            pooling: tiny.pooling,
            ..memfuse_fusion::FusionConfig::tiny()
        }
    );
}
