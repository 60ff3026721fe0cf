//! Top-1 metrics, the nearest-neighbor baseline, and the benchmark matrix
//! over model configurations, shot counts and seeds.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, sample_support, split_base_novel, AugmentKind, LabeledDataset, SupportSet, SyntheticConfig};
use crate::embedder::{EmbedderConfig, EmbeddingNet};
use crate::error::{Error, Result};
use crate::head::CosineHead;
use crate::imprint::{imprint_all, imprint_all_augmented, InputAugmenter};
use crate::math::{dot, derive_seed, l2_normalize, seeded_rng, xavier_uniform_with};
use crate::model::Model;
use crate::optim::{finetune, train_base, TrainConfig, TrainHistory};

/// Which test rows are scored. Classification always runs over every head class.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassFilter {
    All,
    Only(Vec<u32>),
}

impl ClassFilter {
    fn keeps(&self, label: u32) -> bool {
        match self {
            ClassFilter::All => true,
            ClassFilter::Only(c) => c.contains(&label),
        }
    }
}

/// Fraction of (filtered) test rows whose prediction equals the label.
pub fn top1_accuracy(model: &Model, test: &LabeledDataset, filter: &ClassFilter) -> Result<f64> {
    let predictor = model.predictor()?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for (x, &label) in test.examples.iter().zip(&test.labels) {
        if !filter.keeps(label) {
            continue;
        }
        total += 1;
        if predictor.predict(x)? == label {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyFilteredSet);
    }
    Ok(correct as f64 / total as f64)
}

/// Reference embeddings with labels. Entries are normalized on insertion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    entries: Vec<(Vec<f64>, u32)>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, embedding: &[f64], label: u32) -> Result<()> {
        self.entries.push((l2_normalize(embedding)?, label));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Label of the entry with the largest inner product with `query`
/// (equivalently the smallest squared distance); earliest entry on ties.
pub fn nn_predict(store: &EmbeddingStore, query: &[f64]) -> Result<u32> {
    let mut best: Option<(f64, u32)> = None;
    for (e, label) in &store.entries {
        if e.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: e.len(),
                actual: query.len(),
            });
        }
        let s = dot(e, query);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, *label));
        }
    }
    best.map(|(_, l)| l).ok_or(Error::EmptyStore)
}

/// Model configurations compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelConfig {
    #[serde(rename = "Rand-noFT")]
    RandNoFt,
    #[serde(rename = "Imprinting")]
    Imprinting,
    #[serde(rename = "Imprinting+Aug")]
    ImprintingAug,
    #[serde(rename = "Rand+FT")]
    RandFt,
    #[serde(rename = "Imprinting+FT")]
    ImprintingFt,
    #[serde(rename = "AllClassJoint")]
    AllClassJoint,
    #[serde(rename = "NearestNeighbor")]
    NearestNeighbor,
}

impl ModelConfig {
    pub const ALL: [ModelConfig; 7] = [
        ModelConfig::RandNoFt,
        ModelConfig::Imprinting,
        ModelConfig::ImprintingAug,
        ModelConfig::RandFt,
        ModelConfig::ImprintingFt,
        ModelConfig::AllClassJoint,
        ModelConfig::NearestNeighbor,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelConfig::RandNoFt => "Rand-noFT",
            ModelConfig::Imprinting => "Imprinting",
            ModelConfig::ImprintingAug => "Imprinting+Aug",
            ModelConfig::RandFt => "Rand+FT",
            ModelConfig::ImprintingFt => "Imprinting+FT",
            ModelConfig::AllClassJoint => "AllClassJoint",
            ModelConfig::NearestNeighbor => "NearestNeighbor",
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelConfig::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownConfig(s.to_string()))
    }
}

/// Metric names used in reports.
pub mod metric {
    /// Novel-class test rows, classified over every head class.
    pub const NOVEL: &str = "novel_top1";
    /// All test rows, classified over every head class.
    pub const ALL: &str = "all_top1";
    /// Novel-class test rows, classified over novel classes only.
    pub const NOVEL_WAY: &str = "novel_top1_novel_way";
}

/// Appends Xavier-uniform templates for `labels`.
pub fn extend_random(model: &mut Model, labels: &[u32], seed: u64) -> Result<()> {
    let mut rng = seeded_rng(seed, &[0x7a2d]);
    let w = xavier_uniform_with(labels.len(), model.head.dim(), &mut rng)?;
    let mut staged = model.head.clone();
    for (r, &label) in labels.iter().enumerate() {
        staged.append_class(label, w.row(r), 1)?;
    }
    model.head = staged;
    Ok(())
}

/// Where benchmark data comes from. Synthetic data is regenerated for every
/// seed; fixed data is shared by all seeds.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Fixed { train: LabeledDataset, test: LabeledDataset },
}

/// Everything needed to build and evaluate every configuration.
#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub data: DataSource,
    pub base_classes: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub base_train: TrainConfig,
    pub finetune: TrainConfig,
    /// Augmented copies per exemplar for Imprinting+Aug.
    pub aug_copies: usize,
    /// Noise level of the jitter used for Imprinting+Aug on vector data.
    pub aug_sigma: f64,
}

impl BenchmarkSpec {
    /// 200 synthetic classes, 100 base / 100 novel, 64-d embeddings.
    pub fn standard() -> Self {
        BenchmarkSpec {
            data: DataSource::Synthetic(SyntheticConfig::default()),
            base_classes: 100,
            hidden_dims: vec![128],
            embedding_dim: 64,
            base_train: TrainConfig {
                epochs: 12,
                batch_size: 32,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 2,
                batch_size: 32,
                oversample_novel: true,
                augment: true,
                ..TrainConfig::default()
            },
            aug_copies: 5,
            aug_sigma: 0.05,
        }
    }

    /// The standard benchmark with heavier within-class noise.
    pub fn noisy() -> Self {
        let mut spec = Self::standard();
        if let DataSource::Synthetic(cfg) = &mut spec.data {
            cfg.noise_sigma = 0.25;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.base_train.validate()?;
        self.finetune.validate()?;
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig("embedding dimension must be at least 2".into()));
        }
        Ok(())
    }
}

/// One scalar measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub config: ModelConfig,
    pub n: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRecord {
    pub config: ModelConfig,
    pub n: usize,
    pub seed: u64,
    pub class: u32,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: ModelConfig,
    pub n: usize,
    pub metric: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub records: Vec<Record>,
    pub per_class: Vec<PerClassRecord>,
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn values(&self, config: ModelConfig, n: usize, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.config == config && r.n == n && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn value(&self, config: ModelConfig, n: usize, seed: u64, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.config == config && r.n == n && r.seed == seed && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn mean(&self, config: ModelConfig, n: usize, metric: &str) -> Option<f64> {
        let v = self.values(config, n, metric);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Seed aggregates in (config, n, metric) order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(ModelConfig, usize, String), Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            groups.entry((r.config, r.n, r.metric.clone())).or_default().push(r.value);
        }
        groups
            .into_iter()
            .map(|((config, n, metric), v)| SummaryRow {
                config,
                n,
                metric,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect()
    }

    /// Plain-text table, one line per (config, n, metric).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>3}  {:<22} {:>8} {:>8} {:>8}",
            "config", "n", "metric", "mean", "min", "max"
        );
        for row in self.summary() {
            let _ = writeln!(
                out,
                "{:<16} {:>3}  {:<22} {:>8.4} {:>8.4} {:>8.4}",
                row.config.label(),
                row.n,
                row.metric,
                row.mean,
                row.min,
                row.max
            );
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "seeds: {}  runtime: {:.1}s", seeds.join(","), self.runtime_secs);
        out
    }

    /// Machine-readable records: a JSON object with `seeds`, `runtime_secs`,
    /// `records` (config, n, seed, metric, value) and `per_class`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidConfig(format!("report json: {e}")))
    }

    pub fn merge(&mut self, other: EvalReport) {
        for s in other.seeds {
            if !self.seeds.contains(&s) {
                self.seeds.push(s);
            }
        }
        self.records.extend(other.records);
        self.per_class.extend(other.per_class);
        self.runtime_secs += other.runtime_secs;
    }
}

/// Per-class top-1 over the rows of `test`, using `predict`.
fn per_class_accuracy(
    test: &LabeledDataset,
    predictions: &[u32],
) -> BTreeMap<u32, f64> {
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&label, &pred) in test.labels.iter().zip(predictions) {
        let e = hits.entry(label).or_default();
        e.1 += 1;
        if pred == label {
            e.0 += 1;
        }
    }
    hits.into_iter().map(|(c, (h, t))| (c, h as f64 / t as f64)).collect()
}

fn accuracy_of(test: &LabeledDataset, predictions: &[u32], keep: impl Fn(u32) -> bool) -> Result<f64> {
    let mut total = 0;
    let mut correct = 0;
    for (&label, &pred) in test.labels.iter().zip(predictions) {
        if keep(label) {
            total += 1;
            correct += usize::from(pred == label);
        }
    }
    if total == 0 {
        return Err(Error::EmptyFilteredSet);
    }
    Ok(correct as f64 / total as f64)
}

/// Predictions, plus novel-way predictions for novel test rows where defined.
struct CellOutcome {
    predictions: Vec<u32>,
    novel_way: Option<Vec<u32>>,
}

fn head_outcome(model: &Model, test: &LabeledDataset, novel: &[u32]) -> Result<CellOutcome> {
    let embeddings = model.embedder.embed_batch(&test.examples)?;
    let full = model.head.prepare()?;
    let predictions = embeddings
        .iter()
        .map(|e| Ok(model.head.class_ids()[full.predict_index(e)?]))
        .collect::<Result<Vec<_>>>()?;
    // restrict the head to the novel templates
    let cols: Vec<usize> = novel.iter().filter_map(|&c| model.head.column_index(c)).collect();
    let novel_way = if cols.len() == novel.len() {
        let mut store = EmbeddingStore::new();
        for &c in &cols {
            store.insert(model.head.templates().row(c), model.head.class_ids()[c])?;
        }
        Some(nn_predictions(&store, &embeddings)?)
    } else {
        None
    };
    Ok(CellOutcome { predictions, novel_way })
}

fn nn_predictions(store: &EmbeddingStore, embeddings: &[Vec<f64>]) -> Result<Vec<u32>> {
    embeddings.iter().map(|e| nn_predict(store, e)).collect()
}

/// Nearest neighbor over the templates of `base_ids` plus every stored novel
/// embedding, and over the novel embeddings alone. Embeddings come from
/// `model`'s embedder.
fn nn_outcome(model: &Model, base_ids: &[u32], supports: &[SupportSet], test: &LabeledDataset) -> Result<CellOutcome> {
    let mut combined = EmbeddingStore::new();
    let w = model.head.templates();
    for &label in base_ids {
        let col = model.head.column_index(label).ok_or(Error::MissingClassColumn(label))?;
        combined.insert(w.row(col), label)?;
    }
    let mut novel_only = EmbeddingStore::new();
    for s in supports {
        for e in model.embedder.embed_batch(&s.examples)? {
            combined.insert(&e, s.label)?;
            novel_only.insert(&e, s.label)?;
        }
    }
    let embeddings = model.embedder.embed_batch(&test.examples)?;
    Ok(CellOutcome {
        predictions: nn_predictions(&combined, &embeddings)?,
        novel_way: Some(nn_predictions(&novel_only, &embeddings)?),
    })
}

/// Records and per-class accuracies for one (config, n, seed) cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellScores {
    pub records: Vec<Record>,
    pub per_class: Vec<PerClassRecord>,
}

fn score(
    outcome: &CellOutcome,
    test: &LabeledDataset,
    novel: &[u32],
    config: ModelConfig,
    n: usize,
    seed: u64,
) -> Result<CellScores> {
    let is_novel = |l: u32| novel.contains(&l);
    let record = |metric: &str, value: f64| Record {
        config,
        n,
        seed,
        metric: metric.into(),
        value,
    };
    let mut records = vec![
        record(metric::NOVEL, accuracy_of(test, &outcome.predictions, is_novel)?),
        record(metric::ALL, accuracy_of(test, &outcome.predictions, |_| true)?),
    ];
    if let Some(nw) = &outcome.novel_way {
        records.push(record(metric::NOVEL_WAY, accuracy_of(test, nw, is_novel)?));
    }
    let per_class = per_class_accuracy(test, &outcome.predictions)
        .into_iter()
        .map(|(class, accuracy)| PerClassRecord {
            config,
            n,
            seed,
            class,
            accuracy,
        })
        .collect();
    Ok(CellScores { records, per_class })
}

/// Scores a model with a head over base and novel classes.
pub fn score_model(
    model: &Model,
    test: &LabeledDataset,
    novel: &[u32],
    config: ModelConfig,
    n: usize,
    seed: u64,
) -> Result<CellScores> {
    score(&head_outcome(model, test, novel)?, test, novel, config, n, seed)
}

/// Scores the nearest-neighbor baseline built from `model`'s embedder, the
/// head templates of `base_ids`, and every support embedding.
pub fn score_nearest_neighbor(
    model: &Model,
    base_ids: &[u32],
    supports: &[SupportSet],
    test: &LabeledDataset,
    n: usize,
    seed: u64,
) -> Result<CellScores> {
    let novel: Vec<u32> = supports.iter().map(|s| s.label).collect();
    let outcome = nn_outcome(model, base_ids, supports, test)?;
    score(&outcome, test, &novel, ModelConfig::NearestNeighbor, n, seed)
}

/// Trains the base model for one seed.
pub fn build_base_model(
    spec: &BenchmarkSpec,
    train: &LabeledDataset,
    base_ids: &[u32],
    seed: u64,
) -> Result<(Model, TrainHistory)> {
    let embedder_cfg = EmbedderConfig {
        input_dim: train.input_dim(),
        hidden_dims: spec.hidden_dims.clone(),
        embedding_dim: spec.embedding_dim,
        nonlinearity: crate::embedder::Nonlinearity::Relu,
        seed: derive_seed(seed, &[1]),
    };
    let mut model = Model::new(
        EmbeddingNet::new(embedder_cfg)?,
        CosineHead::random(base_ids.to_vec(), spec.embedding_dim, derive_seed(seed, &[2]))?,
    )?;
    let base_data = train.restrict(base_ids);
    let cfg = TrainConfig {
        seed: derive_seed(seed, &[3]),
        ..spec.base_train.clone()
    };
    let history = train_base(&mut model, &base_data, &cfg)?;
    Ok((model, history))
}

/// Builds the model for one configuration from a trained base model.
/// Returns `None` for [`ModelConfig::NearestNeighbor`], which has no head of its own.
pub fn build_config_model(
    spec: &BenchmarkSpec,
    config: ModelConfig,
    base: &Model,
    train: &LabeledDataset,
    base_ids: &[u32],
    novel_ids: &[u32],
    supports: &[SupportSet],
    seed: u64,
) -> Result<Option<Model>> {
    let ft_cfg = TrainConfig {
        seed: derive_seed(seed, &[5]),
        ..spec.finetune.clone()
    };
    let base_data = || train.restrict(base_ids);
    let model = match config {
        ModelConfig::NearestNeighbor => return Ok(None),
        ModelConfig::RandNoFt | ModelConfig::RandFt => {
            let mut m = base.clone();
            extend_random(&mut m, novel_ids, derive_seed(seed, &[4]))?;
            if config == ModelConfig::RandFt {
                finetune(&mut m, &base_data(), supports, &ft_cfg)?;
            }
            m
        }
        ModelConfig::Imprinting | ModelConfig::ImprintingFt => {
            let mut m = base.clone();
            imprint_all(&mut m, supports)?;
            if config == ModelConfig::ImprintingFt {
                finetune(&mut m, &base_data(), supports, &ft_cfg)?;
            }
            m
        }
        ModelConfig::ImprintingAug => {
            let mut m = base.clone();
            let aug = InputAugmenter {
                kind: AugmentKind::default_for(train.modality, spec.aug_sigma),
                modality: train.modality,
            };
            imprint_all_augmented(&mut m, supports, &aug, spec.aug_copies, derive_seed(seed, &[6]))?;
            m
        }
        ModelConfig::AllClassJoint => {
            let mut ids = base_ids.to_vec();
            ids.extend_from_slice(novel_ids);
            let embedder_cfg = EmbedderConfig {
                seed: derive_seed(seed, &[7]),
                ..base.embedder.config().clone()
            };
            let mut m = Model::new(
                EmbeddingNet::new(embedder_cfg)?,
                CosineHead::random(ids, spec.embedding_dim, derive_seed(seed, &[8]))?,
            )?;
            let cfg = TrainConfig {
                seed: derive_seed(seed, &[9]),
                oversample_novel: true,
                ..spec.base_train.clone()
            };
            finetune(&mut m, &base_data(), supports, &cfg)?;
            m
        }
    };
    Ok(Some(model))
}

/// Seed for drawing the n-shot support sets of a benchmark seed.
pub fn support_seed(seed: u64, n: usize) -> u64 {
    derive_seed(seed, &[10, n as u64])
}

/// Train and test data for one benchmark seed.
pub fn seed_data(spec: &BenchmarkSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    match &spec.data {
        DataSource::Synthetic(cfg) => gen_synthetic(&SyntheticConfig {
            seed: derive_seed(seed, &[0]),
            ..cfg.clone()
        }),
        DataSource::Fixed { train, test } => Ok((train.clone(), test.clone())),
    }
}

fn run_seed(spec: &BenchmarkSpec, shots: &[usize], configs: &[ModelConfig], seed: u64) -> Result<EvalReport> {
    let (train, test) = seed_data(spec, seed)?;
    let split = split_base_novel(&train.catalog, spec.base_classes)?;
    let (base, _) = build_base_model(spec, &train, &split.base, seed)?;
    let cells: Vec<(usize, ModelConfig)> = shots
        .iter()
        .flat_map(|&n| configs.iter().map(move |&c| (n, c)))
        .collect();
    let results: Vec<Result<CellScores>> = cells
        .par_iter()
        .map(|&(n, config)| {
            let supports = sample_support(&train, &split.novel, n, support_seed(seed, n))?;
            match build_config_model(spec, config, &base, &train, &split.base, &split.novel, &supports, seed)? {
                Some(model) => score_model(&model, &test, &split.novel, config, n, seed),
                None => score_nearest_neighbor(&base, &split.base, &supports, &test, n, seed),
            }
        })
        .collect();
    let mut report = EvalReport {
        seeds: vec![seed],
        ..EvalReport::default()
    };
    for r in results {
        let cell = r?;
        report.records.extend(cell.records);
        report.per_class.extend(cell.per_class);
    }
    Ok(report)
}

/// Runs every (config, n, seed) cell. Seeds and cells are evaluated in
/// parallel; records are assembled in (seed, n, config) order.
pub fn run_benchmark(
    spec: &BenchmarkSpec,
    shots: &[usize],
    configs: &[ModelConfig],
    seeds: &[u64],
) -> Result<EvalReport> {
    spec.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    if shots.is_empty() || shots.contains(&0) {
        return Err(Error::InvalidConfig("shots must be a nonempty list of positive counts".into()));
    }
    if configs.is_empty() {
        return Err(Error::InvalidConfig("no configurations selected".into()));
    }
    let start = Instant::now();
    let per_seed: Vec<Result<EvalReport>> = seeds.par_iter().map(|&s| run_seed(spec, shots, configs, s)).collect();
    let mut report = EvalReport::default();
    for r in per_seed {
        report.merge(r?);
    }
    report.runtime_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Modality, Split};
    use crate::math::Matrix;

    fn constant_model(classes: u32, winner: usize) -> Model {
        // identity embedder on 2-d inputs; every template is the same direction
        // except that the winner is slightly closer to everything on the right half-plane
        let cfg = EmbedderConfig::new(2, vec![], 2);
        let net = EmbeddingNet::from_layers(cfg, vec![(Matrix::identity(2), vec![0.0, 0.0])]).unwrap();
        let mut w = Matrix::zeros(0, 2);
        for c in 0..classes as usize {
            if c == winner {
                w.push_row(&[1.0, 0.0]).unwrap();
            } else {
                w.push_row(&[-1.0, 0.0]).unwrap();
            }
        }
        Model::new(net, CosineHead::from_templates(w, (0..classes).collect(), 10.0).unwrap()).unwrap()
    }

    fn balanced_right_half(classes: u32, per: usize) -> LabeledDataset {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..classes {
            for k in 0..per {
                xs.push(vec![1.0, k as f64 * 0.1 - 0.2]);
                ys.push(c);
            }
        }
        LabeledDataset::new(xs, ys, (0..classes).collect(), Split::Test, Modality::Vector).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let test = balanced_right_half(10, 5);
        let m = constant_model(10, 3);
        assert!((top1_accuracy(&m, &test, &ClassFilter::All).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(top1_accuracy(&m, &test, &ClassFilter::Only(vec![3])).unwrap(), 1.0);
        assert!(matches!(
            top1_accuracy(&m, &test, &ClassFilter::Only(vec![42])),
            Err(Error::EmptyFilteredSet)
        ));
    }

    #[test]
    fn nn_examples() {
        let mut store = EmbeddingStore::new();
        assert!(matches!(nn_predict(&store, &[1.0, 0.0]), Err(Error::EmptyStore)));
        store.insert(&[1.0, 0.0], 1).unwrap();
        store.insert(&[0.0, 1.0], 2).unwrap();
        let q = l2_normalize(&[0.9, 0.1]).unwrap();
        assert_eq!(nn_predict(&store, &q).unwrap(), 1);
        let tie = l2_normalize(&[1.0, 1.0]).unwrap();
        assert_eq!(nn_predict(&store, &tie).unwrap(), 1);

        let mut single = EmbeddingStore::new();
        single.insert(&[0.3, -0.1], 9).unwrap();
        for q in [[1.0, 0.0], [0.0, -1.0], [-0.6, 0.8]] {
            assert_eq!(nn_predict(&single, &q).unwrap(), 9);
        }
    }

    #[test]
    fn config_labels_round_trip() {
        for c in ModelConfig::ALL {
            assert_eq!(c.label().parse::<ModelConfig>().unwrap(), c);
        }
        assert!(matches!("Bogus".parse::<ModelConfig>(), Err(Error::UnknownConfig(_))));
    }

    fn tiny_spec() -> BenchmarkSpec {
        BenchmarkSpec {
            data: DataSource::Synthetic(SyntheticConfig {
                num_classes: 12,
                per_class_train: 6,
                per_class_test: 4,
                input_dim: 8,
                noise_sigma: 0.1,
                min_angle_deg: 15.0,
                seed: 0,
            }),
            base_classes: 8,
            hidden_dims: vec![16],
            embedding_dim: 6,
            base_train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                base_lr: 1e-3,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 1,
                batch_size: 8,
                augment: true,
                ..TrainConfig::default()
            },
            aug_copies: 2,
            aug_sigma: 0.05,
        }
    }

    #[test]
    fn benchmark_is_deterministic_and_well_formed() {
        let spec = tiny_spec();
        let a = run_benchmark(&spec, &[1, 2], &ModelConfig::ALL, &[3, 4]).unwrap();
        let b = run_benchmark(&spec, &[1, 2], &ModelConfig::ALL, &[3, 4]).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.per_class, b.per_class);
        assert!(a.records.iter().all(|r| (0.0..=1.0).contains(&r.value)));
        // every cell reports novel and all-class accuracy
        assert_eq!(a.values(ModelConfig::ImprintingFt, 2, metric::NOVEL).len(), 2);
        assert!(a.to_table().contains("Imprinting+FT"));
        let parsed = EvalReport::from_json(&a.to_json()).unwrap();
        assert_eq!(parsed, a);
    }

    #[test]
    fn one_shot_imprinting_matches_nearest_neighbor() {
        let spec = tiny_spec();
        let r = run_benchmark(&spec, &[1], &[ModelConfig::Imprinting, ModelConfig::NearestNeighbor], &[1, 2, 3]).unwrap();
        for seed in [1, 2, 3] {
            for m in [metric::NOVEL, metric::ALL, metric::NOVEL_WAY] {
                let a = r.value(ModelConfig::Imprinting, 1, seed, m).unwrap();
                let b = r.value(ModelConfig::NearestNeighbor, 1, seed, m).unwrap();
                assert_eq!(a.to_bits(), b.to_bits(), "seed {seed} {m}");
            }
        }
        let imp: Vec<_> = r.per_class.iter().filter(|p| p.config == ModelConfig::Imprinting).map(|p| (p.seed, p.class, p.accuracy.to_bits())).collect();
        let nn: Vec<_> = r.per_class.iter().filter(|p| p.config == ModelConfig::NearestNeighbor).map(|p| (p.seed, p.class, p.accuracy.to_bits())).collect();
        assert_eq!(imp, nn);
    }

    #[test]
    fn all_class_accuracy_within_per_class_range() {
        let r = run_benchmark(&tiny_spec(), &[2], &[ModelConfig::Imprinting, ModelConfig::RandNoFt], &[5]).unwrap();
        for config in [ModelConfig::Imprinting, ModelConfig::RandNoFt] {
            let per: Vec<f64> = r.per_class.iter().filter(|p| p.config == config).map(|p| p.accuracy).collect();
            let all = r.value(config, 2, 5, metric::ALL).unwrap();
            let lo = per.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = per.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= all && all <= hi);
            // balanced test set: all-class accuracy is the per-class mean
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            assert!((mean - all).abs() < 1e-12);
        }
    }

    #[test]
    fn benchmark_rejects_bad_requests() {
        let spec = tiny_spec();
        assert!(run_benchmark(&spec, &[1], &[ModelConfig::Imprinting], &[]).is_err());
        assert!(run_benchmark(&spec, &[0], &[ModelConfig::Imprinting], &[1]).is_err());
        assert!(matches!(
            run_benchmark(&spec, &[7], &[ModelConfig::Imprinting], &[1]),
            Err(Error::InsufficientExamples { .. })
        ));
    }

    #[test]
    fn random_extension_keeps_old_columns() {
        let base = constant_model(3, 0);
        let mut m = base.clone();
        extend_random(&mut m, &[10, 11], 4).unwrap();
        assert_eq!(m.head.class_ids(), &[0, 1, 2, 10, 11]);
        for r in 0..3 {
            assert_eq!(m.head.templates().row(r), base.head.templates().row(r));
        }
        assert!(extend_random(&mut m, &[1], 4).is_err());
        assert_eq!(m.head.num_classes(), 5);
    }
}
