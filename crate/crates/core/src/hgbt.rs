//! Histogram gradient-boosted regression trees.
//!
//! Squared-error boosting: each tree is grown best-first on quantile-binned
//! features, splitting to maximize
//! `S_L^2/(n_L+l2) + S_R^2/(n_R+l2) - S^2/(n+l2)` over residual sums `S`.
//! Leaves output `learning_rate * mean residual`. With a validation set,
//! training stops after `early_stopping_rounds` trees without a new best
//! validation RMSE and the best prefix is kept.
//!
//! [`tune`] is a seeded random search that maximizes mean inner-fold
//! Spearman correlation. [`DesignMatrix`] turns feature bundles into the
//! baseline's input: per-stream PCA plus standardized numeric metadata.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{fit_pca, FeatureBundle, FeatureError, PcaModel};
use crate::metrics::{rmse, spearman};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HgbtError {
    #[error("need at least 2 rows and 1 feature")]
    DegenerateInput,
    #[error("non-finite value in feature {feature} of row {row}")]
    NonFiniteFeature { row: usize, feature: usize },
    #[error("model expects {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("feature construction failed: {0}")]
    Features(String),
}

pub type Result<T> = std::result::Result<T, HgbtError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HgbtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub l2_reg: f64,
    pub max_bins: usize,
    pub early_stopping_rounds: usize,
}

impl Default for HgbtParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            learning_rate: 0.1,
            max_leaves: 31,
            max_depth: 6,
            min_samples_leaf: 5,
            l2_reg: 1.0,
            max_bins: 64,
            early_stopping_rounds: 20,
        }
    }
}

impl HgbtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HgbtError::InvalidParams(m.to_string()));
        if !(1..=500).contains(&self.n_trees) {
            return bad("n_trees must lie in [1, 500]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if !(2..=64).contains(&self.max_leaves) {
            return bad("max_leaves must lie in [2, 64]");
        }
        if !(1..=12).contains(&self.max_depth) {
            return bad("max_depth must lie in [1, 12]");
        }
        if self.min_samples_leaf < 1 {
            return bad("min_samples_leaf must be >= 1");
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return bad("l2_reg must be finite and >= 0");
        }
        if !(2..=255).contains(&self.max_bins) {
            return bad("max_bins must lie in [2, 255]");
        }
        if self.early_stopping_rounds < 1 {
            return bad("early_stopping_rounds must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        /// Upper edge of the last bin sent left: `x <= threshold` goes left.
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HgbtModel {
    pub base_score: f64,
    pub trees: Vec<Tree>,
    /// Per-feature bin upper edges (non-decreasing); bin `b` holds values in
    /// `(edges[b-1], edges[b]]`, the last bin everything above.
    pub bin_edges: Vec<Vec<f64>>,
    pub n_features: usize,
    /// Validation RMSE after each tree, when a validation set was given.
    pub valid_history: Vec<f64>,
}

/// Quantile bin edges for one feature, at most `max_bins - 1` of them.
fn fit_bin_edges(values: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let mut edges = if distinct.len() <= max_bins {
        distinct[..distinct.len() - 1].to_vec()
    } else {
        let n = sorted.len();
        (1..max_bins).map(|i| sorted[((i * n) / max_bins).min(n - 1)]).collect()
    };
    edges.dedup();
    let top = *distinct.last().expect("non-empty feature");
    edges.retain(|&e| e < top);
    edges
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e < v)
}

struct Binned {
    /// Column-major bin indices.
    cols: Vec<Vec<u8>>,
    n_bins: Vec<usize>,
}

#[derive(Clone, Copy)]
struct SplitCandidate {
    feature: usize,
    bin: usize,
    gain: f64,
}

fn best_split(rows: &[usize], residual: &[f64], binned: &Binned, params: &HgbtParams) -> Option<SplitCandidate> {
    let n = rows.len();
    if n < 2 * params.min_samples_leaf {
        return None;
    }
    let total: f64 = rows.iter().map(|&r| residual[r]).sum();
    let lambda = params.l2_reg;
    let parent = total * total / (n as f64 + lambda);
    let mut best: Option<SplitCandidate> = None;
    let mut sums = [0.0f64; 256];
    let mut counts = [0usize; 256];
    for (f, col) in binned.cols.iter().enumerate() {
        let nb = binned.n_bins[f];
        if nb < 2 {
            continue;
        }
        sums[..nb].fill(0.0);
        counts[..nb].fill(0);
        for &r in rows {
            let b = col[r] as usize;
            sums[b] += residual[r];
            counts[b] += 1;
        }
        let mut sl = 0.0;
        let mut nl = 0usize;
        for b in 0..nb - 1 {
            sl += sums[b];
            nl += counts[b];
            let nr = n - nl;
            if nl < params.min_samples_leaf {
                continue;
            }
            if nr < params.min_samples_leaf {
                break;
            }
            let sr = total - sl;
            let gain = sl * sl / (nl as f64 + lambda) + sr * sr / (nr as f64 + lambda) - parent;
            if gain > 1e-12 && best.is_none_or(|c| gain > c.gain) {
                best = Some(SplitCandidate {
                    feature: f,
                    bin: b,
                    gain,
                });
            }
        }
    }
    best
}

fn leaf_value(rows: &[usize], residual: &[f64], lr: f64) -> f64 {
    lr * rows.iter().map(|&r| residual[r]).sum::<f64>() / rows.len() as f64
}

fn grow_tree(residual: &[f64], binned: &Binned, edges: &[Vec<f64>], params: &HgbtParams) -> Tree {
    struct Open {
        node: usize,
        rows: Vec<usize>,
        depth: usize,
        split: Option<SplitCandidate>,
    }
    let all: Vec<usize> = (0..residual.len()).collect();
    let mut nodes = vec![Node::Leaf {
        value: leaf_value(&all, residual, params.learning_rate),
    }];
    let split = (params.max_depth > 0)
        .then(|| best_split(&all, residual, binned, params))
        .flatten();
    let mut open = vec![Open {
        node: 0,
        rows: all,
        depth: 0,
        split,
    }];
    let mut leaves = 1;
    while leaves < params.max_leaves {
        // best-first: expand the open leaf with the largest gain, lowest node id on ties
        let Some(pick) = open
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.split.map(|s| (i, s.gain, o.node)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)))
            .map(|t| t.0)
        else {
            break;
        };
        let o = open.swap_remove(pick);
        let s = o.split.expect("picked leaf has a split");
        let col = &binned.cols[s.feature];
        let (lrows, rrows): (Vec<usize>, Vec<usize>) = o.rows.iter().partition(|&&r| (col[r] as usize) <= s.bin);
        let left = nodes.len();
        nodes.push(Node::Leaf {
            value: leaf_value(&lrows, residual, params.learning_rate),
        });
        let right = nodes.len();
        nodes.push(Node::Leaf {
            value: leaf_value(&rrows, residual, params.learning_rate),
        });
        nodes[o.node] = Node::Split {
            feature: s.feature,
            threshold: edges[s.feature][s.bin],
            left,
            right,
        };
        leaves += 1;
        let depth = o.depth + 1;
        for (node, rows) in [(left, lrows), (right, rrows)] {
            let split = (depth < params.max_depth)
                .then(|| best_split(&rows, residual, binned, params))
                .flatten();
            open.push(Open {
                node,
                rows,
                depth,
                split,
            });
        }
    }
    Tree { nodes }
}

fn check_matrix(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map_or(0, Vec::len);
    for (i, row) in x.iter().enumerate() {
        if row.len() != d {
            return Err(HgbtError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if let Some(f) = row.iter().position(|v| !v.is_finite()) {
            return Err(HgbtError::NonFiniteFeature { row: i, feature: f });
        }
    }
    Ok(d)
}

/// Fits a boosted ensemble; see the module docs for the algorithm.
pub fn hgbt_fit(
    x: &[Vec<f64>],
    y: &[f64],
    params: &HgbtParams,
    valid: Option<(&[Vec<f64>], &[f64])>,
) -> Result<HgbtModel> {
    params.validate()?;
    if x.len() < 2 || x.len() != y.len() {
        return Err(HgbtError::DegenerateInput);
    }
    let d = check_matrix(x)?;
    if d == 0 {
        return Err(HgbtError::DegenerateInput);
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(HgbtError::NonFiniteFeature { row: i, feature: d });
    }
    if let Some((xv, yv)) = valid {
        if xv.len() != yv.len() || xv.is_empty() {
            return Err(HgbtError::DegenerateInput);
        }
        if check_matrix(xv)? != d {
            return Err(HgbtError::DimensionMismatch {
                expected: d,
                got: xv[0].len(),
            });
        }
    }

    let bin_edges: Vec<Vec<f64>> = (0..d)
        .map(|f| {
            let col: Vec<f64> = x.iter().map(|r| r[f]).collect();
            fit_bin_edges(&col, params.max_bins)
        })
        .collect();
    let binned = Binned {
        cols: (0..d)
            .map(|f| x.iter().map(|r| bin_of(&bin_edges[f], r[f]) as u8).collect())
            .collect(),
        n_bins: bin_edges.iter().map(|e| e.len() + 1).collect(),
    };

    let base_score = y.iter().sum::<f64>() / y.len() as f64;
    let mut pred = vec![base_score; y.len()];
    let mut valid_pred = valid.map(|(xv, _)| vec![base_score; xv.len()]);
    let mut best_rmse = valid.map(|(_, yv)| rmse(valid_pred.as_ref().unwrap(), yv).unwrap());
    let mut best_len = 0usize;
    let mut since_best = 0usize;
    let mut trees = Vec::new();
    let mut valid_history = Vec::new();

    for _ in 0..params.n_trees {
        let residual: Vec<f64> = y.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let tree = grow_tree(&residual, &binned, &bin_edges, params);
        // a stump-less tree only re-adds the (already ~zero) mean residual
        if tree.nodes.len() == 1 {
            break;
        }
        for (p, row) in pred.iter_mut().zip(x) {
            *p += tree.predict_row(row);
        }
        trees.push(tree);
        if let (Some((xv, yv)), Some(vp)) = (valid, valid_pred.as_mut()) {
            let t = trees.last().unwrap();
            for (p, row) in vp.iter_mut().zip(xv) {
                *p += t.predict_row(row);
            }
            let r = rmse(vp, yv).expect("lengths checked");
            valid_history.push(r);
            if r < best_rmse.unwrap() {
                best_rmse = Some(r);
                best_len = trees.len();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= params.early_stopping_rounds {
                    break;
                }
            }
        }
    }
    if valid.is_some() {
        trees.truncate(best_len);
    }
    Ok(HgbtModel {
        base_score,
        trees,
        bin_edges,
        n_features: d,
        valid_history,
    })
}

pub fn hgbt_predict(m: &HgbtModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    x.iter()
        .map(|row| {
            if row.len() != m.n_features {
                return Err(HgbtError::DimensionMismatch {
                    expected: m.n_features,
                    got: row.len(),
                });
            }
            Ok(m.base_score + m.trees.iter().map(|t| t.predict_row(row)).sum::<f64>())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tuning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_trees: (usize, usize),
    /// Sampled log-uniformly.
    pub learning_rate: (f64, f64),
    pub max_leaves: (usize, usize),
    pub max_depth: (usize, usize),
    pub min_samples_leaf: (usize, usize),
    /// Sampled log-uniformly; both bounds must be positive.
    pub l2_reg: (f64, f64),
    pub max_bins: (usize, usize),
    pub early_stopping_rounds: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            n_trees: (50, 400),
            learning_rate: (0.01, 0.3),
            max_leaves: (4, 32),
            max_depth: (2, 8),
            min_samples_leaf: (3, 30),
            l2_reg: (1e-3, 10.0),
            max_bins: (16, 128),
            early_stopping_rounds: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    pub n_trials: usize,
    pub seed: u64,
    pub space: SearchSpace,
}

impl TunerConfig {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> HgbtParams {
        let s = &self.space;
        let log_uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| (rng.random_range(lo.ln()..=hi.ln())).exp();
        HgbtParams {
            n_trees: rng.random_range(s.n_trees.0..=s.n_trees.1),
            learning_rate: log_uniform(rng, s.learning_rate).min(1.0),
            max_leaves: rng.random_range(s.max_leaves.0..=s.max_leaves.1),
            max_depth: rng.random_range(s.max_depth.0..=s.max_depth.1),
            min_samples_leaf: rng.random_range(s.min_samples_leaf.0..=s.min_samples_leaf.1),
            l2_reg: log_uniform(rng, s.l2_reg),
            max_bins: rng.random_range(s.max_bins.0..=s.max_bins.1),
            early_stopping_rounds: s.early_stopping_rounds,
        }
    }
}

/// One inner split's training and validation design matrices.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub x_valid: Vec<Vec<f64>>,
    pub y_valid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub params: HgbtParams,
    pub fold_srcc: Vec<f64>,
    /// `-inf` when any fold failed; serialized as `null`.
    pub mean_srcc: f64,
    /// Trees kept after early stopping, per fold.
    pub best_iterations: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: HgbtParams,
    pub best_trial: usize,
    pub trials: Vec<Trial>,
}

impl TuneResult {
    /// Best parameters with `n_trees` set to the mean early-stopped tree
    /// count of the winning trial, for refitting without a validation set.
    pub fn refit_params(&self) -> HgbtParams {
        let t = &self.trials[self.best_trial];
        let mut p = self.best;
        if !t.best_iterations.is_empty() {
            let mean = t.best_iterations.iter().sum::<usize>() as f64 / t.best_iterations.len() as f64;
            p.n_trees = (mean.round() as usize).clamp(1, 500);
        }
        p
    }
}

/// Seeded random search maximizing the mean Spearman correlation over the
/// given folds. Ties go to the earliest trial; failing trials score `-inf`.
pub fn tune(folds: &[FoldData], cfg: &TunerConfig) -> Result<TuneResult> {
    if cfg.n_trials == 0 || folds.is_empty() {
        return Err(HgbtError::InvalidParams(
            "need n_trials >= 1 and at least one fold".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.n_trials);
    for trial in 0..cfg.n_trials {
        let params = cfg.sample(&mut rng);
        let mut fold_srcc = Vec::new();
        let mut best_iterations = Vec::new();
        let mut error = None;
        for f in folds {
            let outcome = hgbt_fit(&f.x_train, &f.y_train, &params, Some((&f.x_valid, &f.y_valid))).and_then(|m| {
                let p = hgbt_predict(&m, &f.x_valid)?;
                let s = spearman(&p, &f.y_valid).map_err(|e| HgbtError::Features(e.to_string()))?;
                Ok((s, m.trees.len()))
            });
            match outcome {
                Ok((s, n)) => {
                    fold_srcc.push(s);
                    best_iterations.push(n);
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let mean_srcc = if error.is_some() {
            f64::NEG_INFINITY
        } else {
            fold_srcc.iter().sum::<f64>() / fold_srcc.len() as f64
        };
        trials.push(Trial {
            trial,
            params,
            fold_srcc,
            mean_srcc,
            best_iterations,
            error,
        });
    }
    let best_trial = trials.iter().enumerate().fold(
        0,
        |best, (i, t)| if t.mean_srcc > trials[best].mean_srcc { i } else { best },
    );
    Ok(TuneResult {
        best: trials[best_trial].params,
        best_trial,
        trials,
    })
}

// ---------------------------------------------------------------------------
// Design matrix

/// Streams fed to the baseline. `text` covers the subtitle, title and
/// description embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSet {
    pub text: bool,
    pub numeric: bool,
    pub visual: bool,
    pub summary: bool,
    pub rationale: bool,
}

impl Default for FeatureSet {
    fn default() -> Self {
        Self {
            text: true,
            numeric: true,
            visual: true,
            summary: true,
            rationale: false,
        }
    }
}

impl FeatureSet {
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.text {
            parts.push("E5(Text)");
        }
        if self.numeric {
            parts.push("Numeric");
        }
        if self.visual {
            parts.push("ViT");
        }
        if self.summary {
            parts.push("SumEmb");
        }
        if self.rationale {
            parts.push("RatEmb");
        }
        parts.join("+")
    }

    fn streams(&self) -> Vec<Stream> {
        let mut s = Vec::new();
        if self.text {
            s.extend([Stream::Subtitles, Stream::Title, Stream::Description]);
        }
        if self.visual {
            s.push(Stream::Visual);
        }
        if self.summary {
            s.push(Stream::Summary);
        }
        if self.rationale {
            s.push(Stream::Rationale);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Stream {
    Subtitles,
    Title,
    Description,
    Summary,
    Rationale,
    Visual,
}

impl Stream {
    fn vector(self, b: &FeatureBundle) -> Vec<f64> {
        match self {
            Stream::Subtitles => b.e5_subtitles.clone(),
            Stream::Title => b.e5_title.clone(),
            Stream::Description => b.e5_description.clone(),
            Stream::Summary => b.e5_summary.clone(),
            Stream::Rationale => b.e5_rationale.clone(),
            Stream::Visual => {
                let rows = b.visual_block.len().max(1) as f64;
                let d = b.visual_block.first().map_or(0, Vec::len);
                let mut m = vec![0.0; d];
                for r in &b.visual_block {
                    m.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                }
                m.iter_mut().for_each(|a| *a /= rows);
                m
            }
        }
    }
}

/// Per-stream PCA models fitted on training bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub set: FeatureSet,
    streams: Vec<(Stream, PcaModel)>,
}

impl DesignMatrix {
    pub fn fit(
        bundles: &BTreeMap<String, FeatureBundle>,
        train_ids: &[String],
        set: FeatureSet,
        n_components: usize,
    ) -> Result<Self> {
        let train: Vec<&FeatureBundle> = train_ids
            .iter()
            .map(|id| {
                bundles
                    .get(id)
                    .ok_or_else(|| HgbtError::Features(format!("no bundle for {id}")))
            })
            .collect::<Result<_>>()?;
        let mut streams = Vec::new();
        for s in set.streams() {
            let rows: Vec<Vec<f64>> = train.iter().map(|b| s.vector(b)).collect();
            let d = rows.first().map_or(0, Vec::len);
            let k = n_components.min(d).min(rows.len().saturating_sub(1)).max(1);
            match fit_pca(&rows, k) {
                Ok(p) => streams.push((s, p)),
                // a constant stream carries no information
                Err(FeatureError::DegenerateData(_)) => continue,
                Err(e) => return Err(HgbtError::Features(e.to_string())),
            }
        }
        Ok(Self { set, streams })
    }

    pub fn row(&self, b: &FeatureBundle) -> Vec<f64> {
        let mut out = Vec::new();
        for (s, pca) in &self.streams {
            out.extend(pca.transform(&s.vector(b)));
        }
        if self.set.numeric {
            out.extend(&b.numeric);
        }
        out
    }

    pub fn rows(&self, bundles: &BTreeMap<String, FeatureBundle>, ids: &[String]) -> Result<Vec<Vec<f64>>> {
        ids.iter()
            .map(|id| {
                bundles
                    .get(id)
                    .map(|b| self.row(b))
                    .ok_or_else(|| HgbtError::Features(format!("no bundle for {id}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_sample(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let y = x.iter().map(|r| r[0]).collect();
        (x, y)
    }

    #[test]
    fn constant_target_predicts_constant() {
        let (x, _) = uniform_sample(50, 1);
        let y = vec![0.37; 50];
        let m = hgbt_fit(&x, &y, &HgbtParams::default(), None).unwrap();
        assert!(m.trees.iter().all(|t| t.n_leaves() == 1));
        for p in hgbt_predict(&m, &x).unwrap() {
            assert!((p - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn learns_identity_feature() {
        let (x, y) = uniform_sample(500, 2);
        let m = hgbt_fit(&x, &y, &HgbtParams::default(), None).unwrap();
        let (xt, yt) = uniform_sample(500, 3);
        let p = hgbt_predict(&m, &xt).unwrap();
        assert!(spearman(&p, &yt).unwrap() >= 0.95);
    }

    #[test]
    fn two_value_indicator_converges_geometrically() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 2) as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let params = HgbtParams {
            n_trees: 60,
            learning_rate: 0.5,
            max_bins: 2,
            min_samples_leaf: 1,
            l2_reg: 0.0,
            ..HgbtParams::default()
        };
        let m = hgbt_fit(&x, &y, &params, None).unwrap();
        // residual shrinks by (1 - lr) per tree: 0.5 * 0.5^t
        let p = hgbt_predict(&m, &x).unwrap();
        for (a, b) in p.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
        let after_one = hgbt_predict(
            &HgbtModel {
                trees: m.trees[..1].to_vec(),
                ..m.clone()
            },
            &x,
        )
        .unwrap();
        assert!((after_one[1] - 0.75).abs() < 1e-12);
        assert!((after_one[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn manual_trace_of_two_leaf_tree() {
        let m = HgbtModel {
            base_score: 0.5,
            trees: vec![Tree {
                nodes: vec![
                    Node::Split {
                        feature: 1,
                        threshold: 2.0,
                        left: 1,
                        right: 2,
                    },
                    Node::Leaf { value: -0.1 },
                    Node::Leaf { value: 0.2 },
                ],
            }],
            bin_edges: vec![vec![], vec![2.0]],
            n_features: 2,
            valid_history: vec![],
        };
        let p = hgbt_predict(&m, &[vec![9.0, 2.0], vec![-9.0, 2.5]]).unwrap();
        assert_eq!(p, vec![0.4, 0.7]);
        assert_eq!(
            hgbt_predict(&m, &[vec![1.0]]),
            Err(HgbtError::DimensionMismatch { expected: 2, got: 1 })
        );
        let empty = HgbtModel { trees: vec![], ..m };
        assert_eq!(hgbt_predict(&empty, &[vec![0.0, 0.0]]).unwrap(), vec![0.5]);
    }

    #[test]
    fn training_rmse_non_increasing_in_tree_count() {
        let (x, _) = uniform_sample(200, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = x
            .iter()
            .map(|r| (r[0] * 6.0).sin() + r[1] + 0.3 * rng.random::<f64>())
            .collect();
        let m = hgbt_fit(
            &x,
            &y,
            &HgbtParams {
                n_trees: 80,
                ..HgbtParams::default()
            },
            None,
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..=m.trees.len() {
            let sub = HgbtModel {
                trees: m.trees[..t].to_vec(),
                ..m.clone()
            };
            let r = rmse(&hgbt_predict(&sub, &x).unwrap(), &y).unwrap();
            assert!(r <= prev + 1e-12);
            prev = r;
        }
    }

    #[test]
    fn early_stopping_keeps_best_prefix() {
        let (x, y) = uniform_sample(150, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noisy: Vec<f64> = y.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let (xv, yv) = uniform_sample(100, 7);
        let params = HgbtParams {
            n_trees: 300,
            early_stopping_rounds: 5,
            ..HgbtParams::default()
        };
        let m = hgbt_fit(&x, &noisy, &params, Some((&xv, &yv))).unwrap();
        let best = m
            .valid_history
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |b, (i, &r)| if r < b.1 { (i + 1, r) } else { b });
        assert_eq!(m.trees.len(), best.0);
        assert!(m.valid_history.len() < 300);
    }

    #[test]
    fn bin_edges_non_decreasing_and_monotone_invariance() {
        let (x, y) = uniform_sample(120, 9);
        let params = HgbtParams {
            n_trees: 30,
            ..HgbtParams::default()
        };
        let m = hgbt_fit(&x, &y, &params, None).unwrap();
        for e in &m.bin_edges {
            assert!(e.windows(2).all(|w| w[0] <= w[1]));
        }
        // strictly increasing transform applied to both train and test
        let tx: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().map(|v| v.powi(3) + 2.0 * v).collect())
            .collect();
        let mt = hgbt_fit(&tx, &y, &params, None).unwrap();
        let (xt, _) = uniform_sample(50, 10);
        let txt: Vec<Vec<f64>> = xt
            .iter()
            .map(|r| r.iter().map(|v| v.powi(3) + 2.0 * v).collect())
            .collect();
        assert_eq!(hgbt_predict(&m, &xt).unwrap(), hgbt_predict(&mt, &txt).unwrap());
    }

    #[test]
    fn fit_errors() {
        let p = HgbtParams::default();
        assert_eq!(
            hgbt_fit(&[vec![1.0]], &[1.0], &p, None),
            Err(HgbtError::DegenerateInput)
        );
        assert_eq!(
            hgbt_fit(&[vec![1.0], vec![f64::NAN]], &[1.0, 2.0], &p, None),
            Err(HgbtError::NonFiniteFeature { row: 1, feature: 0 })
        );
        let bad = HgbtParams { max_bins: 300, ..p };
        assert!(matches!(
            hgbt_fit(&[vec![1.0], vec![2.0]], &[1.0, 2.0], &bad, None),
            Err(HgbtError::InvalidParams(_))
        ));
    }

    fn folds() -> Vec<FoldData> {
        (0..3)
            .map(|i| {
                let (x_train, y_train) = uniform_sample(80, 20 + i);
                let (x_valid, y_valid) = uniform_sample(40, 40 + i);
                FoldData {
                    x_train,
                    y_train,
                    x_valid,
                    y_valid,
                }
            })
            .collect()
    }

    #[test]
    fn tuner_argmax_and_determinism() {
        let f = folds();
        let cfg = TunerConfig {
            n_trials: 6,
            seed: 3,
            space: SearchSpace {
                n_trees: (10, 40),
                ..SearchSpace::default()
            },
        };
        let a = tune(&f, &cfg).unwrap();
        let b = tune(&f, &cfg).unwrap();
        assert_eq!(a, b);
        let best = a.trials[a.best_trial].mean_srcc;
        assert!(a.trials.iter().all(|t| t.mean_srcc <= best));
        assert_eq!(a.best, a.trials[a.best_trial].params);
        // earliest trial wins ties
        assert!(a.trials[..a.best_trial].iter().all(|t| t.mean_srcc < best));

        let one = tune(
            &f,
            &TunerConfig {
                n_trials: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(one.best, one.trials[0].params);
        assert_eq!(one.best, a.trials[0].params);
    }
}
