//! Channel rebalancing and nested, grouped, stratified cross-validation.
//!
//! Oversized channels are split into subchannels with PAM k-medoids over
//! cosine distances between title embeddings. Groups (channels or
//! subchannels) are then assigned whole to folds by a greedy pass that
//! balances fold sizes and each fold's target-quantile histogram against the
//! global one. Inner splits repeat the same procedure on each outer fold's
//! training groups.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{bin_index, quantile_edges, Dataset, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("k = {k} is invalid for {n} points")]
    KTooLarge { k: usize, n: usize },
    #[error("point {0} is a zero vector; cosine distance is undefined")]
    ZeroVector(usize),
    #[error("no title embedding for record {0:?}")]
    MissingEmbedding(String),
    #[error("record {0:?} has no group")]
    MissingGroup(String),
    #[error("need at least {needed} distinct groups, found {got}")]
    TooFewGroups { needed: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, SplitError>;

/// Group label: a channel name, or `channel#i` for the i-th subchannel.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupKey(pub String);

impl GroupKey {
    pub fn subchannel(channel: &str, i: usize) -> Self {
        Self(format!("{channel}#{i}"))
    }
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMedoids {
    pub medoids: Vec<usize>,
    /// Index into `medoids` for every point.
    pub assignment: Vec<usize>,
    pub cost: f64,
    /// Total cost after BUILD, then after every applied swap.
    pub cost_history: Vec<f64>,
    pub swaps: usize,
}

fn cosine_distance_matrix(points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut unit = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(SplitError::ZeroVector(i));
        }
        unit.push(p.iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    let n = unit.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            let dist = (1.0 - dot).max(0.0);
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    Ok(d)
}

fn total_cost(d: &[Vec<f64>], medoids: &[usize]) -> f64 {
    (0..d.len())
        .map(|j| medoids.iter().map(|&m| d[m][j]).fold(f64::INFINITY, f64::min))
        .sum()
}

fn assign(d: &[Vec<f64>], medoids: &[usize]) -> Vec<usize> {
    (0..d.len())
        .map(|j| {
            // a medoid always belongs to its own cluster
            if let Some(pos) = medoids.iter().position(|&m| m == j) {
                return pos;
            }
            let mut best = 0;
            for (mi, &m) in medoids.iter().enumerate() {
                if d[m][j] < d[medoids[best]][j] {
                    best = mi;
                }
            }
            best
        })
        .collect()
}

/// PAM k-medoids: greedy BUILD followed by best-improvement SWAP passes.
/// Ties always resolve to the lowest index.
pub fn kmedoids(points: &[Vec<f64>], k: usize, distance: Distance, max_iter: usize) -> Result<KMedoids> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(SplitError::KTooLarge { k, n });
    }
    let d = match distance {
        Distance::Cosine => cosine_distance_matrix(points)?,
    };

    // BUILD
    let first = (0..n)
        .map(|i| (i, d[i].iter().sum::<f64>()))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        .0;
    let mut medoids = vec![first];
    let mut nearest: Vec<f64> = d[first].clone();
    while medoids.len() < k {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for c in 0..n {
            if medoids.contains(&c) {
                continue;
            }
            let gain: f64 = (0..n).map(|j| (nearest[j] - d[c][j]).max(0.0)).sum();
            if gain > best.1 {
                best = (c, gain);
            }
        }
        medoids.push(best.0);
        for j in 0..n {
            nearest[j] = nearest[j].min(d[best.0][j]);
        }
    }

    // SWAP
    let mut cost = total_cost(&d, &medoids);
    let mut cost_history = vec![cost];
    let mut swaps = 0;
    for _ in 0..max_iter {
        let mut best: Option<(usize, usize, f64)> = None;
        for mi in 0..k {
            for c in 0..n {
                if medoids.contains(&c) {
                    continue;
                }
                let mut trial = medoids.clone();
                trial[mi] = c;
                let tc = total_cost(&d, &trial);
                if best.is_none_or(|b| tc < b.2) {
                    best = Some((mi, c, tc));
                }
            }
        }
        match best {
            Some((mi, c, tc)) if tc < cost - 1e-12 => {
                medoids[mi] = c;
                cost = tc;
                cost_history.push(cost);
                swaps += 1;
            }
            _ => break,
        }
    }

    let assignment = assign(&d, &medoids);
    Ok(KMedoids {
        medoids,
        assignment,
        cost,
        cost_history,
        swaps,
    })
}

/// Maps every record to a group, splitting each channel that holds more
/// than `max_fraction * |ds|` records into
/// `ceil(count / (max_fraction * |ds|))` subchannels by k-medoids on the
/// channel's title embeddings.
pub fn rebalance_channels(
    ds: &Dataset,
    title_embeddings: &HashMap<String, Vec<f64>>,
    max_fraction: f64,
    max_iter: usize,
) -> Result<BTreeMap<String, GroupKey>> {
    if !(max_fraction > 0.0 && max_fraction < 1.0) {
        return Err(SplitError::InvalidArgument("max_fraction must lie in (0, 1)".into()));
    }
    let threshold = max_fraction * ds.len() as f64;
    let mut by_channel: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for rec in ds.records() {
        if !title_embeddings.contains_key(&rec.id) {
            return Err(SplitError::MissingEmbedding(rec.id.clone()));
        }
        by_channel.entry(&rec.channel).or_default().push(&rec.id);
    }
    let mut groups = BTreeMap::new();
    for (channel, ids) in by_channel {
        if (ids.len() as f64) <= threshold {
            for id in ids {
                groups.insert(id.to_string(), GroupKey(channel.to_string()));
            }
            continue;
        }
        let k = ((ids.len() as f64 / threshold).ceil() as usize).min(ids.len());
        let points: Vec<Vec<f64>> = ids.iter().map(|id| title_embeddings[*id].clone()).collect();
        let km = kmedoids(&points, k, Distance::Cosine, max_iter)?;
        for (id, cluster) in ids.iter().zip(&km.assignment) {
            groups.insert(id.to_string(), GroupKey::subchannel(channel, *cluster));
        }
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerSplit {
    pub train_ids: Vec<String>,
    pub valid_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterFold {
    pub test_ids: Vec<String>,
    pub train_ids: Vec<String>,
    pub inner_splits: Vec<InnerSplit>,
}

/// The full nested split structure, as written to `splits.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedSplits {
    pub target: Target,
    pub seed: u64,
    pub n_bins: usize,
    pub groups: BTreeMap<String, GroupKey>,
    pub outer_folds: Vec<OuterFold>,
}

impl NestedSplits {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("splits serialize");
        std::fs::write(path, json)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Training ids for an outer fold, or for one of its inner splits.
    pub fn training_ids(&self, outer: usize, inner: Option<usize>) -> &[String] {
        let fold = &self.outer_folds[outer];
        match inner {
            Some(i) => &fold.inner_splits[i].train_ids,
            None => &fold.train_ids,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            n_outer: 5,
            n_inner: 5,
            n_bins: 5,
            seed: 13,
        }
    }
}

struct GroupStats {
    key: GroupKey,
    members: Vec<usize>,
    hist: Vec<f64>,
}

fn pearson_divergence(counts: &[f64], total: f64, global: &[f64]) -> f64 {
    counts
        .iter()
        .zip(global)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&c, &p)| {
            let q = c / total;
            (q - p) * (q - p) / p
        })
        .sum()
}

/// Greedy group-to-fold assignment. Returns, per fold, the member indices
/// of the groups assigned to it.
///
/// Groups are visited by decreasing size (ties by label). Each goes to the
/// fold minimizing `resulting_size / target_size` plus the chi-square
/// divergence of the resulting bin proportions from the global ones. When
/// the remaining groups are just enough to fill the empty folds, only empty
/// folds are eligible.
fn assign_groups(groups: &mut [GroupStats], global: &[f64], n_folds: usize, seed: u64) -> Vec<Vec<usize>> {
    groups.sort_by(|a, b| b.members.len().cmp(&a.members.len()).then_with(|| a.key.cmp(&b.key)));
    let total: usize = groups.iter().map(|g| g.members.len()).sum();
    let target = total as f64 / n_folds as f64;
    let n_bins = global.len();
    let mut sizes = vec![0usize; n_folds];
    let mut hists = vec![vec![0.0; n_bins]; n_folds];
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); n_folds];

    for (gi, g) in groups.iter().enumerate() {
        let remaining = groups.len() - gi;
        let empty = sizes.iter().filter(|&&s| s == 0).count();
        let only_empty = remaining <= empty;
        let mut best: Option<(usize, f64)> = None;
        for f in 0..n_folds {
            if only_empty && sizes[f] != 0 {
                continue;
            }
            let n_after = (sizes[f] + g.members.len()) as f64;
            let counts: Vec<f64> = hists[f].iter().zip(&g.hist).map(|(a, b)| a + b).collect();
            let cost = n_after / target + pearson_divergence(&counts, n_after, global);
            if best.is_none_or(|b| cost < b.1) {
                best = Some((f, cost));
            }
        }
        let f = best.expect("at least one eligible fold").0;
        sizes[f] += g.members.len();
        for (h, x) in hists[f].iter_mut().zip(&g.hist) {
            *h += x;
        }
        folds[f].extend(&g.members);
    }

    let mut order: Vec<usize> = (0..n_folds).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out: Vec<Vec<usize>> = order.into_iter().map(|i| std::mem::take(&mut folds[i])).collect();
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

fn build_groups(members: &[usize], group_of: &[GroupKey], bins: &[usize], n_bins: usize) -> Vec<GroupStats> {
    let mut map: BTreeMap<&GroupKey, Vec<usize>> = BTreeMap::new();
    for &i in members {
        map.entry(&group_of[i]).or_default().push(i);
    }
    map.into_iter()
        .map(|(key, members)| {
            let mut hist = vec![0.0; n_bins];
            for &i in &members {
                hist[bins[i]] += 1.0;
            }
            GroupStats {
                key: key.clone(),
                members,
                hist,
            }
        })
        .collect()
}

fn histogram(members: &[usize], bins: &[usize], n_bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; n_bins];
    for &i in members {
        h[bins[i]] += 1.0;
    }
    let n = members.len() as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Builds `n_outer` grouped, stratified outer folds, each with `n_inner`
/// inner train/validation splits over its training ids.
pub fn nested_split(
    ds: &Dataset,
    groups: &BTreeMap<String, GroupKey>,
    target: Target,
    params: SplitParams,
) -> Result<NestedSplits> {
    if params.n_outer < 2 || params.n_inner < 2 || params.n_bins < 1 {
        return Err(SplitError::InvalidArgument(
            "need n_outer >= 2, n_inner >= 2 and n_bins >= 1".into(),
        ));
    }
    let records = ds.records();
    let mut group_of = Vec::with_capacity(records.len());
    for rec in records {
        let g = groups
            .get(&rec.id)
            .ok_or_else(|| SplitError::MissingGroup(rec.id.clone()))?;
        group_of.push(g.clone());
    }
    let distinct: BTreeSet<&GroupKey> = group_of.iter().collect();
    if distinct.len() < params.n_outer {
        return Err(SplitError::TooFewGroups {
            needed: params.n_outer,
            got: distinct.len(),
        });
    }

    let values = ds.targets(target);
    let edges = quantile_edges(&values, params.n_bins);
    let bins: Vec<usize> = values.iter().map(|&v| bin_index(&edges, v)).collect();
    let all: Vec<usize> = (0..records.len()).collect();
    let global = histogram(&all, &bins, params.n_bins);

    let mut gs = build_groups(&all, &group_of, &bins, params.n_bins);
    let outer = assign_groups(&mut gs, &global, params.n_outer, params.seed);
    let ids = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| records[i].id.clone()).collect() };

    let mut outer_folds = Vec::with_capacity(params.n_outer);
    for (o, test) in outer.iter().enumerate() {
        let test_set: BTreeSet<usize> = test.iter().copied().collect();
        let train: Vec<usize> = all.iter().copied().filter(|i| !test_set.contains(i)).collect();
        let mut inner_groups = build_groups(&train, &group_of, &bins, params.n_bins);
        if inner_groups.len() < params.n_inner {
            return Err(SplitError::TooFewGroups {
                needed: params.n_inner,
                got: inner_groups.len(),
            });
        }
        let inner_global = histogram(&train, &bins, params.n_bins);
        let inner_seed = params.seed.wrapping_add(1 + o as u64);
        let inner = assign_groups(&mut inner_groups, &inner_global, params.n_inner, inner_seed);
        let inner_splits = inner
            .iter()
            .map(|valid| {
                let vs: BTreeSet<usize> = valid.iter().copied().collect();
                let tr: Vec<usize> = train.iter().copied().filter(|i| !vs.contains(i)).collect();
                InnerSplit {
                    train_ids: ids(&tr),
                    valid_ids: ids(valid),
                }
            })
            .collect();
        outer_folds.push(OuterFold {
            test_ids: ids(test),
            train_ids: ids(&train),
            inner_splits,
        });
    }

    Ok(NestedSplits {
        target,
        seed: params.seed,
        n_bins: params.n_bins,
        groups: groups
            .iter()
            .filter(|(id, _)| ds.get(id).is_some())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        outer_folds,
    })
}

/// Identity grouping: every record's group is its channel.
pub fn channel_groups(ds: &Dataset) -> BTreeMap<String, GroupKey> {
    ds.records()
        .iter()
        .map(|r| (r.id.clone(), GroupKey(r.channel.clone())))
        .collect()
}
