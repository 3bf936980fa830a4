//! Model inputs: pooled subtitle embeddings, title and description
//! embeddings, subtitle summaries, fold-aware few-shot rationales, PCA and
//! numeric standardization, assembled into one [`FeatureBundle`] per video.
//!
//! Everything that depends on a training split (rationale exemplars,
//! z-scoring statistics) is computed from the training ids of a
//! [`FoldContext`] only.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Target, VideoRecord};
use crate::providers::{
    embed_text, generate_text, CacheStore, CachedEmbedder, CachedGenerator, EmbeddingProvider, GenerationProvider,
    MockEmbedder, MockGenerator, ProviderError, ASPECTS_PREFIX, SOURCE_CLOSE, SOURCE_OPEN,
};
use crate::splits::NestedSplits;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("need {needed} few-shot candidates, only {available} available")]
    NotEnoughCandidates { needed: usize, available: usize },
    #[error("no text embeddings for record {0:?}")]
    MissingRecord(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bundle io on {path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Rationale aspects, in prompt order.
pub const ASPECTS: [&str; 4] = [
    "brand integration",
    "clarity of brand messaging",
    "semantic richness",
    "novelty",
];

pub const NO_SUBTITLES: &str = "no subtitles available";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
    pub fewshot_k: usize,
    pub summary_max_tokens: usize,
    pub rationale_max_tokens: usize,
    pub temperature: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            chunk_tokens: 400,
            overlap_tokens: 64,
            fewshot_k: 3,
            summary_max_tokens: 1024,
            rationale_max_tokens: 256,
            temperature: 0.0,
        }
    }
}

/// Which training set a bundle is built against: an outer fold's full
/// training ids (`inner = None`) or one of its inner training splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FoldContext {
    pub outer: usize,
    pub inner: Option<usize>,
}

impl FoldContext {
    pub fn file_stem(&self) -> String {
        match self.inner {
            Some(i) => format!("outer{}_inner{}", self.outer, i),
            None => format!("outer{}_full", self.outer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub id: String,
    pub e5_subtitles: Vec<f64>,
    pub e5_title: Vec<f64>,
    pub e5_description: Vec<f64>,
    pub e5_summary: Vec<f64>,
    pub e5_rationale: Vec<f64>,
    pub visual_block: Vec<Vec<f64>>,
    pub numeric: Vec<f64>,
    pub summary_text: String,
    pub rationale_text: String,
}

/// Embedding and generation clients used for feature construction.
pub struct Providers {
    pub embedder: Box<dyn EmbeddingProvider>,
    pub generator: Box<dyn GenerationProvider>,
}

impl Providers {
    pub fn mock(dimension: usize) -> Self {
        Self {
            embedder: Box::new(MockEmbedder::new("e5-base-v2-mock", dimension)),
            generator: Box::new(MockGenerator::new("gemma3-4b-it-mock")),
        }
    }

    /// Mock embedder and generator, both routed through an on-disk cache.
    pub fn mock_cached(cache_root: impl Into<std::path::PathBuf>, dimension: usize) -> Result<Self> {
        let store = Arc::new(CacheStore::open(cache_root)?);
        Ok(Self {
            embedder: Box::new(CachedEmbedder::new(
                MockEmbedder::new("e5-base-v2-mock", dimension),
                store.clone(),
            )),
            generator: Box::new(CachedGenerator::new(MockGenerator::new("gemma3-4b-it-mock"), store)),
        })
    }
}

/// Embeds overlapping whitespace-token windows and returns the L2-normalized
/// mean. Texts that fit in one window are embedded as-is.
pub fn chunk_and_pool_subtitles(
    text: &str,
    embed: &dyn EmbeddingProvider,
    chunk_tokens: usize,
    overlap_tokens: usize,
) -> Result<Vec<f64>> {
    if chunk_tokens == 0 || overlap_tokens >= chunk_tokens {
        return Err(FeatureError::InvalidArgument(
            "need chunk_tokens > overlap_tokens".into(),
        ));
    }
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() <= chunk_tokens {
        return Ok(embed_text(embed, text)?);
    }
    let step = chunk_tokens - overlap_tokens;
    let mut acc = vec![0.0; embed.dimension()];
    let mut n_chunks = 0usize;
    let mut start = 0;
    loop {
        let end = (start + chunk_tokens).min(tokens.len());
        let v = embed_text(embed, &tokens[start..end].join(" "))?;
        acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
        n_chunks += 1;
        if end == tokens.len() {
            break;
        }
        start += step;
    }
    acc.iter_mut().for_each(|a| *a /= n_chunks as f64);
    Ok(l2_normalize(acc))
}

fn l2_normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        let mut e0 = vec![0.0; v.len()];
        if let Some(x) = e0.first_mut() {
            *x = 1.0;
        }
        return e0;
    }
    v.into_iter().map(|x| x / n).collect()
}

pub fn summary_prompt(subtitles: &str) -> String {
    format!(
        "Summarize the following subtitles of a financial commercial in plain prose.\n\
         {SOURCE_OPEN}{subtitles}{SOURCE_CLOSE}\n"
    )
}

pub fn summarize_subtitles(subtitles: &str, gen: &dyn GenerationProvider, max_tokens: usize) -> Result<String> {
    if subtitles.trim().is_empty() {
        return Ok(NO_SUBTITLES.to_string());
    }
    Ok(generate_text(gen, &summary_prompt(subtitles), max_tokens, 0.0)?)
}

/// Per-video title, description and pooled subtitle embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddings {
    pub subtitles: Vec<f64>,
    pub title: Vec<f64>,
    pub description: Vec<f64>,
}

impl TextEmbeddings {
    /// Normalized mean of the three text vectors; the few-shot similarity space.
    pub fn pooled(&self) -> Vec<f64> {
        let v = self
            .subtitles
            .iter()
            .zip(&self.title)
            .zip(&self.description)
            .map(|((a, b), c)| (a + b + c) / 3.0)
            .collect();
        l2_normalize(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExemplar {
    pub id: String,
    pub score: f64,
    pub similarity: f64,
}

/// The `k` training videos most similar to `query_id` (cosine in the pooled
/// text space), by descending similarity with ties broken by id.
pub fn select_fewshot_examples(
    query_id: &str,
    inner_train_ids: &[String],
    texts: &HashMap<String, TextEmbeddings>,
    scores: &HashMap<String, f64>,
    k: usize,
) -> Result<Vec<FewShotExemplar>> {
    if !(2..=3).contains(&k) {
        return Err(FeatureError::InvalidArgument(format!(
            "few-shot k must be 2 or 3, got {k}"
        )));
    }
    let query = texts
        .get(query_id)
        .ok_or_else(|| FeatureError::MissingRecord(query_id.to_string()))?
        .pooled();
    let mut scored = Vec::with_capacity(inner_train_ids.len());
    for id in inner_train_ids {
        if id == query_id {
            continue;
        }
        let t = texts.get(id).ok_or_else(|| FeatureError::MissingRecord(id.clone()))?;
        let sim: f64 = t.pooled().iter().zip(&query).map(|(a, b)| a * b).sum();
        let score = *scores.get(id).ok_or_else(|| FeatureError::MissingRecord(id.clone()))?;
        scored.push(FewShotExemplar {
            id: id.clone(),
            score,
            similarity: sim.clamp(-1.0, 1.0),
        });
    }
    if scored.len() < k {
        return Err(FeatureError::NotEnoughCandidates {
            needed: k,
            available: scored.len(),
        });
    }
    scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id)));
    scored.truncate(k);
    Ok(scored)
}

/// Expert-style rationale prompt: aspect list, exemplar scores (no exemplar
/// texts), and the video's subtitles.
pub fn build_rationale_prompt(record: &VideoRecord, exemplars: &[FewShotExemplar], target: Target) -> String {
    let (what, score_name) = match target {
        Target::Brand => (
            "how well the brand is remembered from this commercial (brand memorability)",
            "brand memorability",
        ),
        Target::Score => (
            "how memorable this commercial is overall (memorability)",
            "memorability",
        ),
    };
    let mut p = String::new();
    p.push_str("You are an expert system in advertising research. ");
    p.push_str(&format!(
        "Evaluate qualitatively {what}, based on the subtitles only.\n"
    ));
    p.push_str(&format!("{ASPECTS_PREFIX} {}\n", ASPECTS.join("; ")));
    p.push_str(&format!(
        "Observed {score_name} scores of the most similar training videos:\n"
    ));
    for ex in exemplars {
        p.push_str(&format!("Example: {:.3}\n", ex.score));
    }
    let subs = if record.subtitles.trim().is_empty() {
        NO_SUBTITLES
    } else {
        record.subtitles.as_str()
    };
    p.push_str(&format!("Subtitles:\n{SOURCE_OPEN}{subs}{SOURCE_CLOSE}\n"));
    p
}

// ---------------------------------------------------------------------------
// PCA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `n_components` rows of length D, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl PcaModel {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(w, (xi, m))| w * (xi - m))
                    .sum()
            })
            .collect()
    }

    pub fn inverse_transform(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, zi) in self.components.iter().zip(z) {
            x.iter_mut().zip(c).for_each(|(xj, cj)| *xj += zi * cj);
        }
        x
    }
}

/// Top eigenvectors of the sample covariance `Xc^T Xc / (n - 1)`. Each
/// component is signed so that its largest-magnitude entry is positive.
pub fn fit_pca(x: &[Vec<f64>], n_components: usize) -> Result<PcaModel> {
    let n = x.len();
    if n < 2 {
        return Err(FeatureError::InvalidArgument("PCA needs at least 2 rows".into()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(FeatureError::InvalidArgument("PCA rows differ in length".into()));
    }
    if n_components == 0 || n_components > (n - 1).min(d) {
        return Err(FeatureError::InvalidArgument(format!(
            "n_components must lie in [1, {}]",
            (n - 1).min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for r in x {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let total_variance = cov.trace();
    if total_variance <= 0.0 {
        return Err(FeatureError::DegenerateData("zero variance in every direction".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(n_components);
    let mut explained_variance = Vec::with_capacity(n_components);
    for &j in order.iter().take(n_components) {
        let mut c: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let pivot = c
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained_variance.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

// ---------------------------------------------------------------------------
// Numeric standardization

/// Per-dimension standardization with population moments. Zero-variance
/// dimensions map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Self { mean, std }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s > 1e-12 { (v - m) / s } else { 0.0 })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Assembly

/// Split-independent text features of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextFeatures {
    pub embeddings: TextEmbeddings,
    pub summary_text: String,
    pub e5_summary: Vec<f64>,
}

/// Embeddings and summaries that do not depend on any split; computed once
/// and reused across fold contexts.
pub fn compute_text_features(
    ds: &Dataset,
    providers: &Providers,
    cfg: &FeatureConfig,
) -> Result<BTreeMap<String, TextFeatures>> {
    let emb = providers.embedder.as_ref();
    let mut out = BTreeMap::new();
    for rec in ds.records() {
        let embeddings = TextEmbeddings {
            subtitles: chunk_and_pool_subtitles(&rec.subtitles, emb, cfg.chunk_tokens, cfg.overlap_tokens)?,
            title: embed_text(emb, &rec.title)?,
            description: embed_text(emb, &rec.description)?,
        };
        let summary_text = summarize_subtitles(&rec.subtitles, providers.generator.as_ref(), cfg.summary_max_tokens)?;
        let e5_summary = embed_text(emb, &summary_text)?;
        out.insert(
            rec.id.clone(),
            TextFeatures {
                embeddings,
                summary_text,
                e5_summary,
            },
        );
    }
    Ok(out)
}

/// Fold-dependent rationale, exemplars and standardization on top of
/// precomputed text features.
pub fn assemble_bundles_with(
    ds: &Dataset,
    text: &BTreeMap<String, TextFeatures>,
    splits: &NestedSplits,
    ctx: FoldContext,
    providers: &Providers,
    cfg: &FeatureConfig,
) -> Result<(BTreeMap<String, FeatureBundle>, BTreeMap<String, Vec<FewShotExemplar>>)> {
    if ctx.outer >= splits.outer_folds.len()
        || ctx
            .inner
            .is_some_and(|i| i >= splits.outer_folds[ctx.outer].inner_splits.len())
    {
        return Err(FeatureError::InvalidArgument(format!(
            "fold context {ctx:?} is out of range"
        )));
    }
    let train_ids = splits.training_ids(ctx.outer, ctx.inner);
    let target = splits.target;
    let texts: HashMap<String, TextEmbeddings> =
        text.iter().map(|(id, t)| (id.clone(), t.embeddings.clone())).collect();
    let scores: HashMap<String, f64> = ds.records().iter().map(|r| (r.id.clone(), r.target(target))).collect();

    let keys = &ds.schema().metadata_keys;
    let numeric_row = |r: &VideoRecord| -> Vec<f64> { keys.iter().map(|k| r.numeric_metadata[k]).collect() };
    let train_rows: Vec<Vec<f64>> = train_ids
        .iter()
        .map(|id| {
            ds.get(id)
                .map(numeric_row)
                .ok_or_else(|| FeatureError::MissingRecord(id.clone()))
        })
        .collect::<Result<_>>()?;
    let zscore = ZScore::fit(&train_rows);

    let emb = providers.embedder.as_ref();
    let mut bundles = BTreeMap::new();
    let mut exemplars = BTreeMap::new();
    for rec in ds.records() {
        let tf = text
            .get(&rec.id)
            .ok_or_else(|| FeatureError::MissingRecord(rec.id.clone()))?;
        let shots = select_fewshot_examples(&rec.id, train_ids, &texts, &scores, cfg.fewshot_k)?;
        let prompt = build_rationale_prompt(rec, &shots, target);
        let rationale_text = generate_text(
            providers.generator.as_ref(),
            &prompt,
            cfg.rationale_max_tokens,
            cfg.temperature,
        )?;
        let e5_rationale = embed_text(emb, &rationale_text)?;
        bundles.insert(
            rec.id.clone(),
            FeatureBundle {
                id: rec.id.clone(),
                e5_subtitles: tf.embeddings.subtitles.clone(),
                e5_title: tf.embeddings.title.clone(),
                e5_description: tf.embeddings.description.clone(),
                e5_summary: tf.e5_summary.clone(),
                e5_rationale,
                visual_block: rec.visual_block.clone().unwrap_or_default(),
                numeric: zscore.transform(&numeric_row(rec)),
                summary_text: tf.summary_text.clone(),
                rationale_text,
            },
        );
        exemplars.insert(rec.id.clone(), shots);
    }
    Ok((bundles, exemplars))
}

/// All bundles for one fold context.
pub fn assemble_bundles(
    ds: &Dataset,
    splits: &NestedSplits,
    ctx: FoldContext,
    providers: &Providers,
    cfg: &FeatureConfig,
) -> Result<BTreeMap<String, FeatureBundle>> {
    let text = compute_text_features(ds, providers, cfg)?;
    assemble_bundles_with(ds, &text, splits, ctx, providers, cfg).map(|(b, _)| b)
}

pub fn write_bundles(path: impl AsRef<Path>, bundles: &BTreeMap<String, FeatureBundle>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| FeatureError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for b in bundles.values() {
        let line = serde_json::to_string(b).expect("bundles serialize");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_bundles(path: impl AsRef<Path>) -> Result<BTreeMap<String, FeatureBundle>> {
    let path = path.as_ref();
    let io = |reason: String| FeatureError::Io {
        path: path.display().to_string(),
        reason,
    };
    let file = File::open(path).map_err(|e| io(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let b: FeatureBundle = serde_json::from_str(&line).map_err(|e| io(format!("line {}: {e}", i + 1)))?;
        out.insert(b.id.clone(), b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::whitespace_tokens;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn embedder() -> MockEmbedder {
        MockEmbedder::new("e5-mock", 64)
    }

    #[test]
    fn short_text_equals_plain_embedding() {
        let e = embedder();
        for t in ["", "one two three", "a  b\tc  d"] {
            assert_eq!(
                chunk_and_pool_subtitles(t, &e, 400, 64).unwrap(),
                embed_text(&e, t).unwrap()
            );
        }
    }

    #[test]
    fn repeated_chunk_pools_to_itself() {
        let e = embedder();
        let chunk: Vec<String> = (0..10).map(|i| format!("word{i}")).collect();
        let c = chunk.join(" ");
        let doubled = format!("{c} {c}");
        let pooled = chunk_and_pool_subtitles(&doubled, &e, 10, 0).unwrap();
        let direct = embed_text(&e, &c).unwrap();
        for (a, b) in pooled.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let long: String = (0..1000).map(|i| format!("t{} ", i % 37)).collect();
        let v = chunk_and_pool_subtitles(&long, &e, 400, 64).unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(chunk_and_pool_subtitles(&long, &e, 10, 10).is_err());
    }

    #[test]
    fn summaries() {
        let g = MockGenerator::new("g");
        let subs: String = (0..5000).map(|i| format!("w{i} ")).collect();
        let s = summarize_subtitles(&subs, &g, 1024).unwrap();
        assert!(whitespace_tokens(&s) <= 1024);
        assert_eq!(s, summarize_subtitles(&subs, &g, 1024).unwrap());
        assert_eq!(summarize_subtitles("  ", &g, 1024).unwrap(), NO_SUBTITLES);
    }

    fn text_space(n: usize, seed: u64) -> HashMap<String, TextEmbeddings> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = |d: usize| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            l2_normalize(v)
        };
        (0..n)
            .map(|i| {
                (
                    format!("id{i:03}"),
                    TextEmbeddings {
                        subtitles: unit(8),
                        title: unit(8),
                        description: unit(8),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn fewshot_matches_brute_force_scan() {
        let texts = text_space(40, 3);
        let scores: HashMap<String, f64> = texts
            .keys()
            .enumerate()
            .map(|(i, k)| (k.clone(), i as f64 / 40.0))
            .collect();
        let train: Vec<String> = texts.keys().filter(|k| k.as_str() < "id030").cloned().collect();
        for q in ["id001", "id035"] {
            let got = select_fewshot_examples(q, &train, &texts, &scores, 3).unwrap();
            // exhaustive oracle
            let qv = &texts[q];
            let qmean: Vec<f64> = (0..8)
                .map(|j| (qv.subtitles[j] + qv.title[j] + qv.description[j]) / 3.0)
                .collect();
            let mut all: Vec<(f64, String)> = train
                .iter()
                .filter(|id| id.as_str() != q)
                .map(|id| {
                    let t = &texts[id];
                    let m: Vec<f64> = (0..8)
                        .map(|j| (t.subtitles[j] + t.title[j] + t.description[j]) / 3.0)
                        .collect();
                    let dot: f64 = m.iter().zip(&qmean).map(|(a, b)| a * b).sum();
                    let n1 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let n2 = qmean.iter().map(|x| x * x).sum::<f64>().sqrt();
                    (dot / (n1 * n2), id.clone())
                })
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<String> = all.iter().take(3).map(|x| x.1.clone()).collect();
            let ids: Vec<String> = got.iter().map(|e| e.id.clone()).collect();
            assert_eq!(ids, want);
            assert!(got.iter().all(|e| train.contains(&e.id) && e.id != q));
        }
    }

    #[test]
    fn fewshot_identical_texts_rank_first() {
        let mut texts = text_space(10, 4);
        let twin = texts["id002"].clone();
        texts.insert("zz_twin".into(), twin);
        let scores: HashMap<String, f64> = texts.keys().map(|k| (k.clone(), 0.5)).collect();
        let train: Vec<String> = texts.keys().filter(|k| *k != "id002").cloned().collect();
        let got = select_fewshot_examples("id002", &train, &texts, &scores, 2).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].id, "zz_twin");
        assert!((got[0].similarity - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn fewshot_errors() {
        let texts = text_space(3, 5);
        let scores: HashMap<String, f64> = texts.keys().map(|k| (k.clone(), 0.5)).collect();
        let train: Vec<String> = vec!["id000".into(), "id001".into()];
        assert!(matches!(
            select_fewshot_examples("id000", &train, &texts, &scores, 2),
            Err(FeatureError::NotEnoughCandidates {
                needed: 2,
                available: 1
            })
        ));
        assert!(select_fewshot_examples("id002", &train, &texts, &scores, 4).is_err());
    }

    #[test]
    fn rationale_prompt_template() {
        let rec = VideoRecord {
            id: "v".into(),
            channel: "c".into(),
            title: "t".into(),
            description: "d".into(),
            subtitles: "we help you save".into(),
            numeric_metadata: BTreeMap::new(),
            visual_block: None,
            brand_memorability: 0.4,
            memorability_score: 0.6,
        };
        let ex: Vec<FewShotExemplar> = [0.5, 0.25, 0.8125]
            .iter()
            .enumerate()
            .map(|(i, &s)| FewShotExemplar {
                id: format!("e{i}"),
                score: s,
                similarity: 0.9,
            })
            .collect();
        let p = build_rationale_prompt(&rec, &ex, Target::Brand);
        assert!(p.contains("brand integration"));
        assert!(p.contains("semantic richness"));
        assert!(p.contains("we help you save"));
        assert_eq!(p.lines().filter(|l| l.starts_with("Example:")).count(), 3);
        assert!(p.contains("Example: 0.500\n") && p.contains("Example: 0.812\n"));
        assert_eq!(p, build_rationale_prompt(&rec, &ex, Target::Brand));
        assert_ne!(p, build_rationale_prompt(&rec, &ex, Target::Score));
    }

    #[test]
    fn pca_rank_one_line() {
        let dir: Vec<f64> = (0..10).map(|i| (i as f64 + 1.0).sqrt()).collect();
        let x: Vec<Vec<f64>> = (0..30)
            .map(|t| dir.iter().map(|d| 0.3 + d * (t as f64 - 7.0)).collect())
            .collect();
        let m = fit_pca(&x, 3).unwrap();
        assert!(m.explained_variance_ratio()[0] >= 0.999);
    }

    #[test]
    fn pca_orthonormal_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // rank-3 data embedded in 6 dims
        let basis: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let coef: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                (0..6)
                    .map(|j| 1.0 + (0..3).map(|k| coef[k] * basis[k][j]).sum::<f64>())
                    .collect()
            })
            .collect();
        let m = fit_pca(&x, 3).unwrap();
        for (i, a) in m.components.iter().enumerate() {
            for (j, b) in m.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
            let pivot = a
                .iter()
                .copied()
                .fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
        assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        for row in &x {
            let back = m.inverse_transform(&m.transform(row));
            for (a, b) in back.iter().zip(row) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        let ratio_sum: f64 = m.explained_variance_ratio().iter().sum();
        assert!(ratio_sum <= 1.0 + 1e-12);
    }

    #[test]
    fn pca_errors() {
        assert!(matches!(
            fit_pca(&[vec![1.0, 2.0]], 1),
            Err(FeatureError::InvalidArgument(_))
        ));
        let same = vec![vec![1.0, 2.0]; 5];
        assert!(matches!(fit_pca(&same, 1), Err(FeatureError::DegenerateData(_))));
        let x = vec![vec![1.0, 2.0], vec![2.0, 1.0], vec![0.0, 0.5]];
        assert!(fit_pca(&x, 3).is_err());
    }

    #[test]
    fn zscore_moments_and_degenerate_dims() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![8.0, 5.0]];
        let z = ZScore::fit(&rows);
        let t: Vec<Vec<f64>> = rows.iter().map(|r| z.transform(r)).collect();
        let mean0: f64 = t.iter().map(|r| r[0]).sum::<f64>() / 3.0;
        let var0: f64 = t.iter().map(|r| (r[0] - mean0).powi(2)).sum::<f64>() / 3.0;
        assert!(mean0.abs() < 1e-12);
        assert!((var0.sqrt() - 1.0).abs() < 1e-12);
        assert!(t.iter().all(|r| r[1] == 0.0));
    }
}
