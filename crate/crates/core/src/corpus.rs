//! Video record schema, JSONL loading and writing, synthetic corpus
//! generation with a planted signal, and dataset summaries.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?}: {field} = {value} is outside [0, 1]")]
    TargetOutOfRange {
        id: String,
        field: &'static str,
        value: f64,
    },
    #[error("record {id:?}: inconsistent schema ({reason})")]
    InconsistentSchema { id: String, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Which of the two regression targets to model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Brand,
    Score,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Brand => "brand",
            Target::Score => "score",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "brand" => Ok(Target::Brand),
            "score" => Ok(Target::Score),
            other => Err(format!("unknown target {other:?} (expected brand or score)")),
        }
    }
}

/// One commercial: texts, numeric metadata, an optional visual block
/// (one row per visual token) and both memorability targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub channel: String,
    pub title: String,
    pub description: String,
    pub subtitles: String,
    pub numeric_metadata: BTreeMap<String, f64>,
    pub visual_block: Option<Vec<Vec<f64>>>,
    pub brand_memorability: f64,
    pub memorability_score: f64,
}

impl VideoRecord {
    pub fn target(&self, target: Target) -> f64 {
        match target {
            Target::Brand => self.brand_memorability,
            Target::Score => self.memorability_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub d_vis: Option<usize>,
    pub n_vis_tokens: Option<usize>,
    pub metadata_keys: Vec<String>,
}

/// A validated, immutable collection of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<VideoRecord>,
    schema: Schema,
}

fn visual_shape(rec: &VideoRecord) -> Result<Option<(usize, usize)>> {
    let Some(block) = &rec.visual_block else {
        return Ok(None);
    };
    let dim = block.first().map_or(0, Vec::len);
    if block.is_empty() || dim == 0 {
        return Err(CorpusError::InconsistentSchema {
            id: rec.id.clone(),
            reason: "visual_block must have at least one non-empty row".into(),
        });
    }
    if block.iter().any(|row| row.len() != dim) {
        return Err(CorpusError::InconsistentSchema {
            id: rec.id.clone(),
            reason: "visual_block rows differ in dimension".into(),
        });
    }
    if block.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CorpusError::InconsistentSchema {
            id: rec.id.clone(),
            reason: "visual_block contains a non-finite value".into(),
        });
    }
    Ok(Some((block.len(), dim)))
}

fn check_targets(rec: &VideoRecord) -> Result<()> {
    for (field, value) in [
        ("brand_memorability", rec.brand_memorability),
        ("memorability_score", rec.memorability_score),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(CorpusError::TargetOutOfRange {
                id: rec.id.clone(),
                field,
                value,
            });
        }
    }
    Ok(())
}

impl Dataset {
    /// Validates every record invariant and derives the schema from the
    /// first record.
    pub fn new(records: Vec<VideoRecord>) -> Result<Self> {
        let first = records.first().ok_or(CorpusError::EmptyDataset)?;
        let shape = visual_shape(first)?;
        let schema = Schema {
            d_vis: shape.map(|s| s.1),
            n_vis_tokens: shape.map(|s| s.0),
            metadata_keys: first.numeric_metadata.keys().cloned().collect(),
        };
        let mut seen = HashSet::new();
        for rec in &records {
            if !seen.insert(rec.id.as_str()) {
                return Err(CorpusError::DuplicateId(rec.id.clone()));
            }
            check_targets(rec)?;
            if visual_shape(rec)?.map(|s| (s.0, s.1)) != schema.n_vis_tokens.zip(schema.d_vis) {
                return Err(CorpusError::InconsistentSchema {
                    id: rec.id.clone(),
                    reason: "visual_block shape differs from the first record".into(),
                });
            }
            if !rec.numeric_metadata.keys().eq(schema.metadata_keys.iter()) {
                return Err(CorpusError::InconsistentSchema {
                    id: rec.id.clone(),
                    reason: "numeric_metadata keys differ from the first record".into(),
                });
            }
            if rec.numeric_metadata.values().any(|v| !v.is_finite()) {
                return Err(CorpusError::InconsistentSchema {
                    id: rec.id.clone(),
                    reason: "numeric_metadata contains a non-finite value".into(),
                });
            }
        }
        Ok(Self { records, schema })
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn targets(&self, target: Target) -> Vec<f64> {
        self.records.iter().map(|r| r.target(target)).collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads one JSON record per line. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VideoRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Dataset::new(records)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for rec in ds.records() {
        let line = serde_json::to_string(rec).expect("records always serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Parameters for the synthetic corpus generator.
///
/// When `dominant_channel_share > 0`, channel 0 receives
/// `round(share * sum(channel_sizes))` records and the remainder is spread
/// over the other channels in proportion to their listed sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_channels: usize,
    pub channel_sizes: Vec<usize>,
    pub d_vis: usize,
    pub n_vis_tokens: usize,
    /// Suggested text-embedding dimension for pipelines built on this corpus.
    pub d_text_hint: usize,
    pub signal_weight: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub dominant_channel_share: f64,
}

impl SyntheticSpec {
    /// `n_channels` channels of equal size summing to roughly `total`.
    pub fn balanced(seed: u64, n_channels: usize, total: usize) -> Self {
        let base = total / n_channels;
        let mut sizes = vec![base; n_channels];
        for s in sizes.iter_mut().take(total - base * n_channels) {
            *s += 1;
        }
        Self {
            seed,
            n_channels,
            channel_sizes: sizes,
            d_vis: 16,
            n_vis_tokens: 4,
            d_text_hint: 64,
            signal_weight: 0.4,
            noise_std: 0.02,
            dominant_channel_share: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.n_channels < 2 {
            return bad("n_channels must be at least 2");
        }
        if self.channel_sizes.len() != self.n_channels {
            return bad("channel_sizes must list one size per channel");
        }
        if self.channel_sizes.iter().sum::<usize>() < 10 {
            return bad("channel sizes must sum to at least 10");
        }
        if self.d_vis == 0 || self.n_vis_tokens == 0 || self.d_text_hint == 0 {
            return bad("dimensions must be positive");
        }
        if !(self.signal_weight >= 0.0 && self.signal_weight.is_finite()) {
            return bad("signal_weight must be finite and >= 0");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.dominant_channel_share) {
            return bad("dominant_channel_share must lie in [0, 1)");
        }
        Ok(())
    }

    /// Final per-channel record counts after applying the dominant share.
    pub fn resolved_sizes(&self) -> Vec<usize> {
        let total: usize = self.channel_sizes.iter().sum();
        if self.dominant_channel_share <= 0.0 {
            return self.channel_sizes.clone();
        }
        let first = ((self.dominant_channel_share * total as f64).round() as usize).min(total);
        let rest = total - first;
        let weights = &self.channel_sizes[1..];
        let wsum: usize = weights.iter().sum();
        let mut sizes = vec![first];
        if wsum == 0 {
            let n = weights.len();
            sizes.extend((0..n).map(|i| rest / n + usize::from(i < rest % n)));
            return sizes;
        }
        // largest-remainder apportionment
        let quotas: Vec<f64> = weights.iter().map(|&w| rest as f64 * w as f64 / wsum as f64).collect();
        let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = rest - alloc.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            alloc[i] += 1;
            left -= 1;
        }
        sizes.extend(alloc);
        sizes
    }
}

/// Word that is repeated in titles to carry the latent signal.
pub const MARKER_WORD: &str = "remember";

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ren", "sto", "va", "quin", "dor", "bel", "tra", "fen", "zu", "pol", "har", "nim", "ges", "or",
    "lux", "tem", "cad", "ver", "sil", "mon", "dra",
];

const SHARED_WORDS: [&str; 16] = [
    "bank", "market", "invest", "growth", "client", "capital", "fund", "future", "money", "savings", "credit",
    "quarter", "earnings", "outlook", "wealth", "advice",
];

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    (0..n)
        .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
        .collect()
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &'a [String]) -> &'a str {
    &words[rng.random_range(0..words.len())]
}

/// Number of marker repetitions for latent `s` in [-1, 1].
pub fn marker_count(s: f64) -> usize {
    (2.0 * (s + 1.0)).round().clamp(0.0, 4.0) as usize
}

/// Deterministic synthetic corpus.
///
/// Each record draws a latent `s ~ U(-1, 1)`; both targets are
/// `clamp(0.5 + signal_weight * s + eps, 0, 1)` with independent
/// `eps ~ N(0, noise_std^2)`. Coordinate 0 of the visual block has row
/// mean exactly `s`, and the title repeats [`MARKER_WORD`]
/// [`marker_count`]`(s)` times. Each channel has three title themes so
/// that k-medoids on titles finds natural subchannels.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let sizes = spec.resolved_sizes();

    let mut records = Vec::with_capacity(sizes.iter().sum());
    for (c, &size) in sizes.iter().enumerate() {
        let channel = format!("channel_{c:02}");
        let channel_words: Vec<String> = (0..6).map(|_| make_word(&mut rng)).collect();
        let themes: Vec<Vec<String>> = (0..3).map(|_| (0..5).map(|_| make_word(&mut rng)).collect()).collect();
        let about: Vec<&str> = channel_words.iter().take(3).map(String::as_str).collect();
        let channel_blurb = format!("official channel of {} financial", about.join(" "));
        for j in 0..size {
            let id = format!("v{c:02}_{j:04}");
            let theme = &themes[rng.random_range(0..themes.len())];
            let s: f64 = rng.random_range(-1.0..1.0);

            let mut title_words: Vec<String> = (0..3).map(|_| pick(&mut rng, theme).to_string()).collect();
            title_words.push(pick(&mut rng, &channel_words).to_string());
            title_words.push(format!("q{}", rng.random_range(1..=4)));
            title_words.extend(std::iter::repeat_n(MARKER_WORD.to_string(), marker_count(s)));
            let title = title_words.join(" ");

            let description = format!(
                "{} {} {} {}",
                channel_blurb,
                pick(&mut rng, theme),
                SHARED_WORDS[rng.random_range(0..SHARED_WORDS.len())],
                pick(&mut rng, theme)
            );

            let subtitles = if rng.random_bool(0.05) {
                String::new()
            } else {
                let n_words = rng.random_range(30..150);
                (0..n_words)
                    .map(|_| match rng.random_range(0..3) {
                        0 => pick(&mut rng, theme).to_string(),
                        1 => pick(&mut rng, &channel_words).to_string(),
                        _ => SHARED_WORDS[rng.random_range(0..SHARED_WORDS.len())].to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            };

            let mut numeric_metadata = BTreeMap::new();
            numeric_metadata.insert("comments".to_string(), rng.random_range(0..500) as f64);
            numeric_metadata.insert("duration_s".to_string(), (15.0 + 300.0 * rng.random::<f64>()).round());
            numeric_metadata.insert(
                "likes".to_string(),
                (10f64.powf(1.0 + 3.0 * rng.random::<f64>())).round(),
            );
            numeric_metadata.insert(
                "views".to_string(),
                (10f64.powf(3.0 + 3.0 * rng.random::<f64>())).round(),
            );

            let mut block: Vec<Vec<f64>> = (0..spec.n_vis_tokens)
                .map(|_| (0..spec.d_vis).map(|_| unit.sample(&mut rng)).collect())
                .collect();
            let col_mean = block.iter().map(|r| r[0]).sum::<f64>() / spec.n_vis_tokens as f64;
            for row in &mut block {
                row[0] += s - col_mean;
            }

            let brand = (0.5 + spec.signal_weight * s + noise.sample(&mut rng)).clamp(0.0, 1.0);
            let score = (0.5 + spec.signal_weight * s + noise.sample(&mut rng)).clamp(0.0, 1.0);
            records.push(VideoRecord {
                id,
                channel: channel.clone(),
                title,
                description,
                subtitles,
                numeric_metadata,
                visual_block: Some(block),
                brand_memorability: brand,
                memorability_score: score,
            });
        }
    }
    Dataset::new(records)
}

/// Latent signal of a synthetic record, recovered from its visual block.
pub fn planted_latent(rec: &VideoRecord) -> Option<f64> {
    let block = rec.visual_block.as_ref()?;
    Some(block.iter().map(|r| r[0]).sum::<f64>() / block.len() as f64)
}

/// Empirical quantile of sorted data by linear interpolation between order
/// statistics: position `p * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Interior bin edges at `i / n_bins` for `i = 1..n_bins`.
pub fn quantile_edges(values: &[f64], n_bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..n_bins)
        .map(|i| quantile_sorted(&sorted, i as f64 / n_bins as f64))
        .collect()
}

/// Bin index of `v` given interior edges: number of edges strictly below `v`.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e < v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_records: usize,
    pub channel_counts: BTreeMap<String, usize>,
    pub n_bins: usize,
    pub brand_edges: Vec<f64>,
    pub score_edges: Vec<f64>,
}

pub fn summarize_dataset(ds: &Dataset, n_bins: usize) -> Result<DatasetSummary> {
    if ds.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    if n_bins < 2 {
        return Err(CorpusError::InvalidArgument("n_bins must be at least 2".into()));
    }
    let mut channel_counts = BTreeMap::new();
    for rec in ds.records() {
        *channel_counts.entry(rec.channel.clone()).or_insert(0) += 1;
    }
    Ok(DatasetSummary {
        n_records: ds.len(),
        channel_counts,
        n_bins,
        brand_edges: quantile_edges(&ds.targets(Target::Brand), n_bins),
        score_edges: quantile_edges(&ds.targets(Target::Score), n_bins),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, channel: &str, brand: f64) -> VideoRecord {
        let mut meta = BTreeMap::new();
        meta.insert("views".into(), 10.0);
        VideoRecord {
            id: id.into(),
            channel: channel.into(),
            title: format!("title {id}"),
            description: "desc".into(),
            subtitles: String::new(),
            numeric_metadata: meta,
            visual_block: Some(vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
            brand_memorability: brand,
            memorability_score: 0.5,
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_preserves_order() {
        let lines = vec![
            serde_json::to_string(&record("b", "X", 0.2)).unwrap(),
            serde_json::to_string(&record("a", "Y", 0.3)).unwrap(),
        ];
        let f = write_lines(&lines);
        let ds = load_dataset(f.path()).unwrap();
        assert_eq!(ds.ids(), vec!["b", "a"]);
    }

    #[test]
    fn load_rejects_duplicates_and_out_of_range() {
        let r = serde_json::to_string(&record("v1", "X", 0.2)).unwrap();
        let f = write_lines(&[r.clone(), r]);
        assert!(matches!(load_dataset(f.path()), Err(CorpusError::DuplicateId(id)) if id == "v1"));

        let f = write_lines(&[serde_json::to_string(&record("v1", "X", 1.2)).unwrap()]);
        assert!(matches!(
            load_dataset(f.path()),
            Err(CorpusError::TargetOutOfRange {
                field: "brand_memorability",
                ..
            })
        ));
    }

    #[test]
    fn load_reports_malformed_line_number() {
        let good = serde_json::to_string(&record("v1", "X", 0.2)).unwrap();
        let f = write_lines(&[good, "{not json".into()]);
        assert!(matches!(
            load_dataset(f.path()),
            Err(CorpusError::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn load_rejects_inconsistent_schema() {
        let a = record("a", "X", 0.2);
        let mut b = record("b", "X", 0.2);
        b.visual_block = Some(vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 2.0]]);
        let f = write_lines(&[serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap()]);
        assert!(matches!(
            load_dataset(f.path()),
            Err(CorpusError::InconsistentSchema { .. })
        ));

        let mut c = record("c", "X", 0.2);
        c.numeric_metadata.insert("likes".into(), 1.0);
        assert!(matches!(
            Dataset::new(vec![a, c]),
            Err(CorpusError::InconsistentSchema { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_counts_match() {
        let mut spec = SyntheticSpec::balanced(7, 5, 50);
        spec.channel_sizes = vec![10; 5];
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        let ja: Vec<String> = a.records().iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        let jb: Vec<String> = b.records().iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        assert_eq!(ja, jb);
        assert_eq!(a.len(), 50);
        let channels: HashSet<_> = a.records().iter().map(|r| r.channel.clone()).collect();
        assert_eq!(channels.len(), 5);
    }

    #[test]
    fn dominant_share_allocation() {
        let mut spec = SyntheticSpec::balanced(1, 12, 339);
        spec.dominant_channel_share = 0.23;
        let sizes = spec.resolved_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 339);
        assert_eq!(sizes[0], 78);
        let ds = generate_synthetic(&spec).unwrap();
        let n0 = ds.records().iter().filter(|r| r.channel == "channel_00").count();
        assert_eq!(n0, 78);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = SyntheticSpec::balanced(1, 2, 4);
        assert!(matches!(generate_synthetic(&spec), Err(CorpusError::InvalidSpec(_))));
        spec = SyntheticSpec::balanced(1, 3, 30);
        spec.channel_sizes.pop();
        assert!(matches!(generate_synthetic(&spec), Err(CorpusError::InvalidSpec(_))));
        spec = SyntheticSpec::balanced(1, 3, 30);
        spec.dominant_channel_share = 1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn planted_visual_mean_and_marker() {
        let ds = generate_synthetic(&SyntheticSpec::balanced(3, 4, 40)).unwrap();
        for rec in ds.records() {
            let s = planted_latent(rec).unwrap();
            assert!((-1.0..=1.0).contains(&s));
            let markers = rec.title.split_whitespace().filter(|w| *w == MARKER_WORD).count();
            assert_eq!(markers, marker_count(s));
        }
    }

    #[test]
    fn summary_counts_and_edges() {
        let mut recs = Vec::new();
        for i in 0..10 {
            let ch = if i < 3 { "A" } else { "B" };
            recs.push(record(&format!("r{i}"), ch, i as f64 / 10.0));
        }
        let ds = Dataset::new(recs).unwrap();
        let s = summarize_dataset(&ds, 5).unwrap();
        assert_eq!(s.channel_counts["A"], 3);
        assert_eq!(s.channel_counts["B"], 7);
        // sort-based oracle: linear interpolation at p*(n-1)
        let sorted: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        for (i, edge) in s.brand_edges.iter().enumerate() {
            let p = (i + 1) as f64 / 5.0;
            let pos = p * 9.0;
            let oracle = sorted[pos as usize] + (pos - pos.floor()) * 0.1;
            assert!((edge - oracle).abs() < 1e-12);
        }
        let expect = [0.18, 0.36, 0.54, 0.72];
        for (e, x) in s.brand_edges.iter().zip(expect) {
            assert!((e - x).abs() < 1e-9, "{e} vs {x}");
        }
        assert!(matches!(
            summarize_dataset(&ds, 1),
            Err(CorpusError::InvalidArgument(_))
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(Dataset::new(vec![]), Err(CorpusError::EmptyDataset)));
    }

    #[test]
    fn bin_index_counts_edges_below() {
        let edges = [0.2, 0.4, 0.6];
        assert_eq!(bin_index(&edges, 0.1), 0);
        assert_eq!(bin_index(&edges, 0.2), 0);
        assert_eq!(bin_index(&edges, 0.3), 1);
        assert_eq!(bin_index(&edges, 0.9), 3);
    }
}
