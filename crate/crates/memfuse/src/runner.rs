//! Experiment orchestration: leakage audits, per-fold model runs over the
//! nested splits, aggregation and tabular reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use memfuse_core::corpus::{generate_synthetic, load_dataset, CorpusError, Dataset, SyntheticSpec, Target};
use memfuse_core::features::{
    assemble_bundles_with, compute_text_features, read_bundles, FeatureBundle, FeatureConfig, FeatureError,
    FewShotExemplar, FoldContext, Providers, TextFeatures,
};
use memfuse_core::hgbt::{
    hgbt_fit, hgbt_predict, tune, DesignMatrix, FeatureSet, FoldData, HgbtError, SearchSpace, TunerConfig,
};
use memfuse_core::metrics::{rmse, spearman_detail, MetricError};
use memfuse_core::splits::{nested_split, rebalance_channels, GroupKey, NestedSplits, SplitError, SplitParams};
use memfuse_fusion::{train_fusion, FusionConfig, FusionError, FusionRun, Pooling, PromptKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("leakage detected: {} violation(s), first: {}", .0.len(), .0.first().map(|v| v.detail.as_str()).unwrap_or(""))]
    LeakageDetected(Vec<Violation>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Hgbt(#[from] HgbtError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error at {path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, RunnerError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunnerError + '_ {
    move |e| RunnerError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Leakage audits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A group appears on both sides of at least one boundary.
    GroupLeak,
    /// An id is missing from, or repeated across, the outer test sets.
    Coverage,
    /// An id sits on both sides of a boundary, or an inner split uses an
    /// outer test id.
    IdOverlap,
    /// A few-shot exemplar was drawn from outside the training ids.
    Exemplar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub group: Option<GroupKey>,
    pub ids: Vec<String>,
    pub detail: String,
}

/// Every way the splits could leak information. Group leaks are reported
/// once per group, listing every boundary it crosses.
pub fn audit_leakage(splits: &NestedSplits, groups: &BTreeMap<String, GroupKey>) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for fold in &splits.outer_folds {
        for id in &fold.test_ids {
            *seen.entry(id.as_str()).or_default() += 1;
        }
    }
    for id in groups.keys() {
        match seen.get(id.as_str()) {
            None => out.push(Violation {
                kind: ViolationKind::Coverage,
                group: groups.get(id).cloned(),
                ids: vec![id.clone()],
                detail: format!("{id} is in no outer test set"),
            }),
            Some(&n) if n > 1 => out.push(Violation {
                kind: ViolationKind::Coverage,
                group: groups.get(id).cloned(),
                ids: vec![id.clone()],
                detail: format!("{id} is in {n} outer test sets"),
            }),
            _ => {}
        }
    }
    for id in seen.keys() {
        if !groups.contains_key(*id) {
            out.push(Violation {
                kind: ViolationKind::Coverage,
                group: None,
                ids: vec![id.to_string()],
                detail: format!("{id} has no group"),
            });
        }
    }

    let mut crossings: BTreeMap<GroupKey, Vec<String>> = BTreeMap::new();
    let mut check = |label: String, a: &[String], b: &[String], out: &mut Vec<Violation>| {
        let set_a: BTreeSet<&String> = a.iter().collect();
        let shared: Vec<String> = b.iter().filter(|id| set_a.contains(id)).cloned().collect();
        if !shared.is_empty() {
            out.push(Violation {
                kind: ViolationKind::IdOverlap,
                group: None,
                ids: shared,
                detail: format!("ids on both sides of {label}"),
            });
        }
        let ga: BTreeSet<&GroupKey> = a.iter().filter_map(|id| groups.get(id)).collect();
        let gb: BTreeSet<&GroupKey> = b.iter().filter_map(|id| groups.get(id)).collect();
        for g in ga.intersection(&gb) {
            crossings.entry((*g).clone()).or_default().push(label.clone());
        }
    };
    for (o, fold) in splits.outer_folds.iter().enumerate() {
        check(
            format!("outer {o} train/test"),
            &fold.train_ids,
            &fold.test_ids,
            &mut out,
        );
        let test: BTreeSet<&String> = fold.test_ids.iter().collect();
        for (i, inner) in fold.inner_splits.iter().enumerate() {
            check(
                format!("outer {o} inner {i} train/valid"),
                &inner.train_ids,
                &inner.valid_ids,
                &mut out,
            );
            let used: Vec<String> = inner
                .train_ids
                .iter()
                .chain(&inner.valid_ids)
                .filter(|id| test.contains(id))
                .cloned()
                .collect();
            if !used.is_empty() {
                out.push(Violation {
                    kind: ViolationKind::IdOverlap,
                    group: None,
                    ids: used,
                    detail: format!("outer {o} inner {i} uses outer test ids"),
                });
            }
        }
    }
    for (g, labels) in crossings {
        let ids = groups
            .iter()
            .filter(|(_, k)| **k == g)
            .map(|(id, _)| id.clone())
            .collect();
        out.push(Violation {
            kind: ViolationKind::GroupLeak,
            detail: format!("group {g} crosses {}", labels.join(", ")),
            group: Some(g),
            ids,
        });
    }
    out
}

/// Checks that every exemplar chosen for a record evaluated in `ctx` (the
/// validation ids of an inner split, or the test ids of an outer fold) comes
/// from that context's training ids.
pub fn audit_exemplars(
    splits: &NestedSplits,
    ctx: FoldContext,
    exemplars: &BTreeMap<String, Vec<FewShotExemplar>>,
) -> Vec<Violation> {
    let fold = &splits.outer_folds[ctx.outer];
    let (train, evaluated) = match ctx.inner {
        Some(i) => (&fold.inner_splits[i].train_ids, &fold.inner_splits[i].valid_ids),
        None => (&fold.train_ids, &fold.test_ids),
    };
    let train: BTreeSet<&String> = train.iter().collect();
    let mut out = Vec::new();
    for id in evaluated {
        let bad: Vec<String> = exemplars
            .get(id)
            .map(|shots| {
                shots
                    .iter()
                    .filter(|s| !train.contains(&s.id))
                    .map(|s| s.id.clone())
                    .collect()
            })
            .unwrap_or_default();
        if !bad.is_empty() {
            out.push(Violation {
                kind: ViolationKind::Exemplar,
                group: None,
                ids: bad,
                detail: format!("{id} in {} uses exemplars outside the training ids", ctx.file_stem()),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hgbt,
    Fusion,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: Target,
    pub model: ModelKind,
    #[serde(default)]
    pub features: FeatureSet,
    pub prompt: Option<PromptKind>,
    pub pooling: Option<Pooling>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_seed")]
    pub tuner_seed: u64,
    #[serde(default = "default_pca")]
    pub pca_components: usize,
    /// Inline fusion settings; `fusion_config` (a file) takes precedence.
    pub fusion: Option<FusionConfig>,
    pub fusion_config: Option<PathBuf>,
}

fn default_trials() -> usize {
    20
}
fn default_seed() -> u64 {
    13
}
fn default_pca() -> usize {
    8
}
fn default_dim() -> usize {
    64
}
fn default_fraction() -> f64 {
    0.10
}
fn default_bins() -> usize {
    5
}
fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub data: DataSource,
    /// On-disk provider cache; providers are uncached when absent.
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_fraction")]
    pub max_fraction: f64,
    #[serde(default = "default_seed")]
    pub split_seed: u64,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default)]
    pub features: FeatureConfig,
    pub runs: Vec<RunConfig>,
}

impl ExperimentConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| RunnerError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.cache_dir.as_mut() {
            resolve(p);
        }
        for r in &mut cfg.runs {
            if let Some(p) = r.fusion_config.as_mut() {
                resolve(p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RunnerError::Config(m));
        match (&self.data.path, &self.data.synthetic) {
            (Some(p), None) if !p.exists() => return bad(format!("data file {} does not exist", p.display())),
            (Some(_), None) | (None, Some(_)) => {}
            _ => return bad("exactly one of data.path and data.synthetic must be set".into()),
        }
        if self.runs.is_empty() {
            return bad("no runs configured".into());
        }
        for (i, r) in self.runs.iter().enumerate() {
            if let Some(p) = &r.fusion_config {
                if !p.exists() {
                    return bad(format!("run {i}: fusion config {} does not exist", p.display()));
                }
            }
            if r.model == ModelKind::Hgbt && r.trials == 0 {
                return bad(format!("run {i}: trials must be positive"));
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(p), _) => Ok(load_dataset(p)?),
            (None, Some(spec)) => Ok(generate_synthetic(spec)?),
            (None, None) => Err(RunnerError::Config("no data source".into())),
        }
    }
}

/// Reads a flat fusion config file.
pub fn load_fusion_config(path: impl AsRef<Path>) -> Result<FusionConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let cfg: FusionConfig = toml::from_str(&text).map_err(|e| RunnerError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn fusion_settings(&self) -> Result<FusionConfig> {
        let mut cfg = match (&self.fusion_config, &self.fusion) {
            (Some(p), _) => load_fusion_config(p)?,
            (None, Some(c)) => c.clone(),
            (None, None) => FusionConfig::tiny(),
        };
        if let Some(p) = self.prompt {
            cfg.prompt = p;
        }
        if let Some(p) = self.pooling {
            cfg.pooling = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn descriptor(&self) -> Result<RunDescriptor> {
        Ok(match self.model {
            ModelKind::Hgbt => RunDescriptor {
                target: self.target,
                model: ModelKind::Hgbt,
                features: self.features.describe(),
                prompt: None,
                pooling: None,
                label: format!("HGBT ({})", self.features.describe()),
            },
            ModelKind::Fusion => {
                let f = self.fusion_settings()?;
                let pooling = match f.pooling {
                    Pooling::Mean => "Mean",
                    Pooling::Attention => "Attn",
                };
                let prompt = match f.prompt {
                    PromptKind::Rationale => "Rat.",
                    PromptKind::Summary => "Sum.",
                };
                let mut streams = "E5(Text)+ViT".to_string();
                if f.generated_embedding {
                    streams.push_str(if f.prompt == PromptKind::Rationale {
                        "+RatEmb"
                    } else {
                        "+SumEmb"
                    });
                }
                RunDescriptor {
                    target: self.target,
                    model: ModelKind::Fusion,
                    features: streams.clone(),
                    prompt: Some(f.prompt),
                    pooling: Some(f.pooling),
                    label: format!("Fusion {:?} ({streams}, {pooling}, P: {prompt})", f.mode),
                }
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub target: Target,
    pub model: ModelKind,
    pub features: String,
    pub prompt: Option<PromptKind>,
    pub pooling: Option<Pooling>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub descriptor: RunDescriptor,
    pub fold_srcc: Vec<f64>,
    pub fold_rmse: Vec<f64>,
    pub cv_srcc: f64,
    pub cv_rmse: f64,
    /// Population standard deviation across outer folds.
    pub srcc_std: f64,
    pub rmse_std: f64,
    /// Outer folds whose SRCC was defined as 0 because predictions were constant.
    pub degenerate_folds: Vec<usize>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

impl MetricReport {
    pub fn from_folds(
        descriptor: RunDescriptor,
        fold_srcc: Vec<f64>,
        fold_rmse: Vec<f64>,
        degenerate_folds: Vec<usize>,
    ) -> Self {
        Self {
            descriptor,
            cv_srcc: mean(&fold_srcc),
            cv_rmse: mean(&fold_rmse),
            srcc_std: std(&fold_srcc),
            rmse_std: std(&fold_rmse),
            fold_srcc,
            fold_rmse,
            degenerate_folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub n_records: usize,
    pub rows: Vec<MetricReport>,
}

pub const TEST_SRCC_NOTE: &str = "Test SRCC: not reproducible (no competition data).";

impl ExperimentReport {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {}\n\n", self.name);
        s.push_str(&format!(
            "{} records, 5-fold grouped nested cross-validation.\n\n",
            self.n_records
        ));
        s.push_str("| Target | Configuration | CV SRCC | CV RMSE | Test SRCC |\n");
        s.push_str("|---|---|---|---|---|\n");
        for r in &self.rows {
            let target = match r.descriptor.target {
                Target::Brand => "Brand memorability",
                Target::Score => "Memorability score",
            };
            let flag = if r.degenerate_folds.is_empty() {
                ""
            } else {
                " (degenerate folds)"
            };
            s.push_str(&format!(
                "| {target} | {} | {:.4} ± {:.4}{flag} | {:.4} ± {:.4} | n/a |\n",
                r.descriptor.label, r.cv_srcc, r.srcc_std, r.cv_rmse, r.rmse_std
            ));
        }
        s.push_str(&format!("\n{TEST_SRCC_NOTE}\n"));
        s.push_str("Per-fold standard deviations are reported after ±.\n");
        s
    }

    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<()> {
        let dir = out_dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let jp = dir.join("report.json");
        std::fs::write(&jp, json).map_err(io_err(&jp))?;
        let mp = dir.join("report.md");
        std::fs::write(&mp, self.to_markdown()).map_err(io_err(&mp))
    }
}

// ---------------------------------------------------------------------------
// Pipeline

/// Providers, split-independent text features and memoized per-context
/// bundles for one dataset.
pub struct Pipeline<'a> {
    pub ds: &'a Dataset,
    pub providers: Providers,
    pub feature_cfg: FeatureConfig,
    pub text: BTreeMap<String, TextFeatures>,
    bundles: HashMap<(Target, FoldContext), BundleSet>,
}

#[derive(Debug, Clone)]
pub struct BundleSet {
    pub bundles: BTreeMap<String, FeatureBundle>,
    pub exemplars: BTreeMap<String, Vec<FewShotExemplar>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(ds: &'a Dataset, providers: Providers, feature_cfg: FeatureConfig) -> Result<Self> {
        let text = compute_text_features(ds, &providers, &feature_cfg)?;
        Ok(Self {
            ds,
            providers,
            feature_cfg,
            text,
            bundles: HashMap::new(),
        })
    }

    pub fn title_embeddings(&self) -> HashMap<String, Vec<f64>> {
        self.text
            .iter()
            .map(|(id, t)| (id.clone(), t.embeddings.title.clone()))
            .collect()
    }

    /// Groups after splitting channels above `max_fraction` of the corpus.
    pub fn groups(&self, max_fraction: f64) -> Result<BTreeMap<String, GroupKey>> {
        Ok(rebalance_channels(
            self.ds,
            &self.title_embeddings(),
            max_fraction,
            100,
        )?)
    }

    pub fn bundle_set(&mut self, splits: &NestedSplits, ctx: FoldContext) -> Result<&BundleSet> {
        let key = (splits.target, ctx);
        if !self.bundles.contains_key(&key) {
            let (bundles, exemplars) =
                assemble_bundles_with(self.ds, &self.text, splits, ctx, &self.providers, &self.feature_cfg)?;
            let violations = audit_exemplars(splits, ctx, &exemplars);
            if !violations.is_empty() {
                return Err(RunnerError::LeakageDetected(violations));
            }
            self.bundles.insert(key, BundleSet { bundles, exemplars });
        }
        Ok(&self.bundles[&key])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldScore {
    pub srcc: f64,
    pub rmse: f64,
    pub degenerate: bool,
}

fn score(pred: &[f64], truth: &[f64]) -> Result<FoldScore> {
    let c = spearman_detail(pred, truth)?;
    Ok(FoldScore {
        srcc: c.value,
        rmse: rmse(pred, truth)?,
        degenerate: c.degenerate,
    })
}

fn targets_of(ds: &Dataset, ids: &[String], target: Target) -> Result<Vec<f64>> {
    ids.iter()
        .map(|id| {
            ds.get(id)
                .map(|r| r.target(target))
                .ok_or_else(|| RunnerError::Config(format!("split references unknown id {id}")))
        })
        .collect()
}

/// Where per-context feature bundles come from.
pub trait BundleSource {
    fn bundles(&mut self, splits: &NestedSplits, ctx: FoldContext) -> Result<&BTreeMap<String, FeatureBundle>>;
}

impl BundleSource for Pipeline<'_> {
    fn bundles(&mut self, splits: &NestedSplits, ctx: FoldContext) -> Result<&BTreeMap<String, FeatureBundle>> {
        Ok(&self.bundle_set(splits, ctx)?.bundles)
    }
}

/// Bundles previously written as `<dir>/<context stem>.jsonl`.
pub struct BundleDir {
    pub dir: PathBuf,
    loaded: HashMap<FoldContext, BTreeMap<String, FeatureBundle>>,
}

impl BundleDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            loaded: HashMap::new(),
        }
    }

    pub fn path_for(dir: &Path, ctx: FoldContext) -> PathBuf {
        dir.join(format!("{}.jsonl", ctx.file_stem()))
    }
}

impl BundleSource for BundleDir {
    fn bundles(&mut self, _splits: &NestedSplits, ctx: FoldContext) -> Result<&BTreeMap<String, FeatureBundle>> {
        if !self.loaded.contains_key(&ctx) {
            let b = read_bundles(Self::path_for(&self.dir, ctx))?;
            self.loaded.insert(ctx, b);
        }
        Ok(&self.loaded[&ctx])
    }
}

/// Tunes on the inner splits of outer fold `outer`, refits on the full
/// outer training set and scores the outer test set.
pub fn hgbt_outer_fold(
    ds: &Dataset,
    source: &mut dyn BundleSource,
    splits: &NestedSplits,
    outer: usize,
    set: FeatureSet,
    n_components: usize,
    tuner: &TunerConfig,
) -> Result<FoldScore> {
    let target = splits.target;
    let fold = &splits.outer_folds[outer];
    let mut folds = Vec::with_capacity(fold.inner_splits.len());
    for (i, inner) in fold.inner_splits.iter().enumerate() {
        let b = source.bundles(splits, FoldContext { outer, inner: Some(i) })?;
        let design = DesignMatrix::fit(b, &inner.train_ids, set, n_components)?;
        folds.push(FoldData {
            x_train: design.rows(b, &inner.train_ids)?,
            y_train: targets_of(ds, &inner.train_ids, target)?,
            x_valid: design.rows(b, &inner.valid_ids)?,
            y_valid: targets_of(ds, &inner.valid_ids, target)?,
        });
    }
    let tuned = tune(&folds, tuner)?;
    let b = source.bundles(splits, FoldContext { outer, inner: None })?;
    let design = DesignMatrix::fit(b, &fold.train_ids, set, n_components)?;
    let x = design.rows(b, &fold.train_ids)?;
    let y = targets_of(ds, &fold.train_ids, target)?;
    let model = hgbt_fit(&x, &y, &tuned.refit_params(), None)?;
    let pred = hgbt_predict(&model, &design.rows(b, &fold.test_ids)?)?;
    score(&pred, &targets_of(ds, &fold.test_ids, target)?)
}

pub fn run_hgbt(
    ds: &Dataset,
    source: &mut dyn BundleSource,
    splits: &NestedSplits,
    set: FeatureSet,
    n_components: usize,
    tuner: &TunerConfig,
) -> Result<Vec<FoldScore>> {
    (0..splits.outer_folds.len())
        .map(|o| hgbt_outer_fold(ds, source, splits, o, set, n_components, tuner))
        .collect()
}

/// Fusion over all outer folds, using inner split 0 of each for training
/// and early stopping.
pub fn run_fusion(
    ds: &Dataset,
    source: &mut dyn BundleSource,
    splits: &NestedSplits,
    cfg: &FusionConfig,
) -> Result<(Vec<FoldScore>, FusionRun)> {
    let mut per_outer = Vec::with_capacity(splits.outer_folds.len());
    for o in 0..splits.outer_folds.len() {
        per_outer.push(
            source
                .bundles(
                    splits,
                    FoldContext {
                        outer: o,
                        inner: Some(0),
                    },
                )?
                .clone(),
        );
    }
    let run = train_fusion(ds, splits, &per_outer, cfg)?;
    let scores = run
        .folds
        .iter()
        .map(|f| score(&f.predictions, &f.targets))
        .collect::<Result<_>>()?;
    Ok((scores, run))
}

/// Runs every configured model over the nested splits of its target. Splits
/// are audited before any model is trained.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let ds = cfg.load_data()?;
    let providers = match &cfg.cache_dir {
        Some(dir) => Providers::mock_cached(dir, cfg.embedding_dim)?,
        None => Providers::mock(cfg.embedding_dim),
    };
    let mut pipe = Pipeline::new(&ds, providers, cfg.features)?;
    let groups = pipe.groups(cfg.max_fraction)?;

    let mut splits_by_target: BTreeMap<Target, NestedSplits> = BTreeMap::new();
    for r in &cfg.runs {
        if splits_by_target.contains_key(&r.target) {
            continue;
        }
        let params = SplitParams {
            seed: cfg.split_seed,
            n_bins: cfg.n_bins,
            ..SplitParams::default()
        };
        let splits = nested_split(&ds, &groups, r.target, params)?;
        let violations = audit_leakage(&splits, &groups);
        if !violations.is_empty() {
            return Err(RunnerError::LeakageDetected(violations));
        }
        splits_by_target.insert(r.target, splits);
    }

    let mut rows = Vec::with_capacity(cfg.runs.len());
    for r in &cfg.runs {
        let splits = &splits_by_target[&r.target];
        let scores = match r.model {
            ModelKind::Hgbt => {
                let tuner = TunerConfig {
                    n_trials: r.trials,
                    seed: r.tuner_seed,
                    space: SearchSpace::default(),
                };
                run_hgbt(&ds, &mut pipe, splits, r.features, r.pca_components, &tuner)?
            }
            ModelKind::Fusion => run_fusion(&ds, &mut pipe, splits, &r.fusion_settings()?)?.0,
        };
        let degenerate = scores
            .iter()
            .enumerate()
            .filter(|(_, s)| s.degenerate)
            .map(|(i, _)| i)
            .collect();
        rows.push(MetricReport::from_folds(
            r.descriptor()?,
            scores.iter().map(|s| s.srcc).collect(),
            scores.iter().map(|s| s.rmse).collect(),
            degenerate,
        ));
    }
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        n_records: ds.len(),
        rows,
    })
}

/// Title embeddings for grouping when no pipeline is at hand.
pub fn rebalance_with(ds: &Dataset, providers: &Providers, max_fraction: f64) -> Result<BTreeMap<String, GroupKey>> {
    let mut titles = HashMap::new();
    for r in ds.records() {
        titles.insert(
            r.id.clone(),
            memfuse_core::providers::embed_text(providers.embedder.as_ref(), &r.title).map_err(FeatureError::from)?,
        );
    }
    Ok(rebalance_channels(ds, &titles, max_fraction, 100)?)
}
