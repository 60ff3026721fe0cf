//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use imprint_core::data::SyntheticConfig;
use imprint_core::embedder::Nonlinearity;
use imprint_core::eval::{BenchmarkSpec, DataSource, ModelConfig};
use imprint_core::optim::TrainConfig;
use imprint_core::{Error, Result};

/// Keys that fix the data, the split and the architecture. A command that
/// continues from a checkpoint must not change them.
pub const LOCKED_KEYS: &[&str] = &[
    "dataset",
    "num_classes",
    "per_class_train",
    "per_class_test",
    "input_dim",
    "noise_sigma",
    "min_angle_deg",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "base_classes",
    "seed",
    "hidden_dims",
    "embedding_dim",
    "nonlinearity",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub synthetic: SyntheticConfig,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub base_classes: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
    pub n: usize,
    pub configs: Vec<ModelConfig>,
    pub base_train: TrainConfig,
    pub finetune: TrainConfig,
    pub imprint_augment: bool,
    pub aug_copies: usize,
    pub sweep_dims: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = BenchmarkSpec::standard();
        let DataSource::Synthetic(synthetic) = spec.data else {
            unreachable!("standard benchmark is synthetic")
        };
        RunConfig {
            dataset: DatasetKind::Synthetic,
            synthetic,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            base_classes: spec.base_classes,
            hidden_dims: spec.hidden_dims,
            embedding_dim: spec.embedding_dim,
            nonlinearity: Nonlinearity::Relu,
            seed: 0,
            seeds: vec![0],
            shots: vec![1, 2, 5, 10, 20],
            n: 1,
            configs: ModelConfig::ALL.to_vec(),
            base_train: spec.base_train,
            finetune: spec.finetune,
            imprint_augment: false,
            aug_copies: spec.aug_copies,
            sweep_dims: vec![64, 128, 256, 512],
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::InvalidConfig(format!("invalid value `{value}` for `{key}`"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v)).collect()
}

fn bool_of(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn path_of(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "idx" => DatasetKind::Idx,
                    _ => return Err(bad(key, value)),
                }
            }
            "num_classes" => self.synthetic.num_classes = num(key, v)?,
            "per_class_train" => self.synthetic.per_class_train = num(key, v)?,
            "per_class_test" => self.synthetic.per_class_test = num(key, v)?,
            "input_dim" => self.synthetic.input_dim = num(key, v)?,
            "noise_sigma" => self.synthetic.noise_sigma = num(key, v)?,
            "min_angle_deg" => self.synthetic.min_angle_deg = num(key, v)?,
            "train_images" => self.train_images = path_of(v),
            "train_labels" => self.train_labels = path_of(v),
            "test_images" => self.test_images = path_of(v),
            "test_labels" => self.test_labels = path_of(v),
            "base_classes" => self.base_classes = num(key, v)?,
            "hidden_dims" => self.hidden_dims = list(key, v)?,
            "embedding_dim" => self.embedding_dim = num(key, v)?,
            "nonlinearity" => self.nonlinearity = Nonlinearity::parse(v).ok_or_else(|| bad(key, value))?,
            "seed" => self.seed = num(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "shots" => self.shots = list(key, v)?,
            "n" => self.n = num(key, v)?,
            "configs" => {
                self.configs = v
                    .split(',')
                    .filter(|c| !c.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "lr" => {
                self.base_train.base_lr = num(key, v)?;
                self.finetune.base_lr = self.base_train.base_lr;
            }
            "fresh_multiplier" => {
                self.base_train.fresh_multiplier = num(key, v)?;
                self.finetune.fresh_multiplier = self.base_train.fresh_multiplier;
            }
            "decay_rate" => {
                self.base_train.decay_rate = num(key, v)?;
                self.finetune.decay_rate = self.base_train.decay_rate;
            }
            "decay_every_epochs" => {
                self.base_train.decay_every_epochs = num(key, v)?;
                self.finetune.decay_every_epochs = self.base_train.decay_every_epochs;
            }
            "rms_decay" => {
                self.base_train.rms_decay = num(key, v)?;
                self.finetune.rms_decay = self.base_train.rms_decay;
            }
            "momentum" => {
                self.base_train.momentum = num(key, v)?;
                self.finetune.momentum = self.base_train.momentum;
            }
            "epsilon" => {
                self.base_train.epsilon = num(key, v)?;
                self.finetune.epsilon = self.base_train.epsilon;
            }
            "train_scale" => {
                self.base_train.train_scale = bool_of(key, v)?;
                self.finetune.train_scale = self.base_train.train_scale;
            }
            "jitter_sigma" => {
                self.base_train.jitter_sigma = num(key, v)?;
                self.finetune.jitter_sigma = self.base_train.jitter_sigma;
            }
            "base_epochs" => self.base_train.epochs = num(key, v)?,
            "base_batch_size" => self.base_train.batch_size = num(key, v)?,
            "ft_epochs" => self.finetune.epochs = num(key, v)?,
            "ft_batch_size" => self.finetune.batch_size = num(key, v)?,
            "ft_augment" => self.finetune.augment = bool_of(key, v)?,
            "oversample_novel" => self.finetune.oversample_novel = bool_of(key, v)?,
            "imprint_augment" => self.imprint_augment = bool_of(key, v)?,
            "aug_copies" => self.aug_copies = num(key, v)?,
            "sweep_dims" => self.sweep_dims = list(key, v)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.synthetic;
        let b = &self.base_train;
        vec![
            (
                "dataset",
                match self.dataset {
                    DatasetKind::Synthetic => "synthetic",
                    DatasetKind::Idx => "idx",
                }
                .to_string(),
            ),
            ("num_classes", s.num_classes.to_string()),
            ("per_class_train", s.per_class_train.to_string()),
            ("per_class_test", s.per_class_test.to_string()),
            ("input_dim", s.input_dim.to_string()),
            ("noise_sigma", s.noise_sigma.to_string()),
            ("min_angle_deg", s.min_angle_deg.to_string()),
            ("train_images", show_path(&self.train_images)),
            ("train_labels", show_path(&self.train_labels)),
            ("test_images", show_path(&self.test_images)),
            ("test_labels", show_path(&self.test_labels)),
            ("base_classes", self.base_classes.to_string()),
            ("hidden_dims", join(&self.hidden_dims)),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("nonlinearity", self.nonlinearity.as_str().to_string()),
            ("seed", self.seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("shots", join(&self.shots)),
            ("n", self.n.to_string()),
            ("configs", join(&self.configs)),
            ("lr", b.base_lr.to_string()),
            ("fresh_multiplier", b.fresh_multiplier.to_string()),
            ("decay_rate", b.decay_rate.to_string()),
            ("decay_every_epochs", b.decay_every_epochs.to_string()),
            ("rms_decay", b.rms_decay.to_string()),
            ("momentum", b.momentum.to_string()),
            ("epsilon", b.epsilon.to_string()),
            ("train_scale", b.train_scale.to_string()),
            ("jitter_sigma", b.jitter_sigma.to_string()),
            ("base_epochs", b.epochs.to_string()),
            ("base_batch_size", b.batch_size.to_string()),
            ("ft_epochs", self.finetune.epochs.to_string()),
            ("ft_batch_size", self.finetune.batch_size.to_string()),
            ("ft_augment", self.finetune.augment.to_string()),
            ("oversample_novel", self.finetune.oversample_novel.to_string()),
            ("imprint_augment", self.imprint_augment.to_string()),
            ("aug_copies", self.aug_copies.to_string()),
            ("sweep_dims", join(&self.sweep_dims)),
        ]
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.pairs().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Config-file text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", i + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    #[cfg(test)]
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in Self::parse_text(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.base_train.validate()?;
        self.finetune.validate()?;
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig("embedding_dim must be at least 2".into()));
        }
        if self.n == 0 || self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::InvalidConfig("shot counts must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                let s = &self.synthetic;
                if self.base_classes == 0 || self.base_classes >= s.num_classes {
                    return Err(Error::InvalidBaseCount {
                        base: self.base_classes,
                        classes: s.num_classes,
                    });
                }
                let most = self.shots.iter().copied().max().unwrap_or(0).max(self.n);
                if most > s.per_class_train {
                    return Err(Error::InvalidConfig(format!(
                        "{most} shots requested but only {} training examples per class",
                        s.per_class_train
                    )));
                }
            }
            DatasetKind::Idx => {
                for (name, p) in [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("test_images", &self.test_images),
                    ("test_labels", &self.test_labels),
                ] {
                    if p.is_none() {
                        return Err(Error::InvalidConfig(format!("dataset = idx needs `{name}`")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn benchmark_spec(&self, data: DataSource) -> BenchmarkSpec {
        BenchmarkSpec {
            data,
            base_classes: self.base_classes,
            hidden_dims: self.hidden_dims.clone(),
            embedding_dim: self.embedding_dim,
            base_train: self.base_train.clone(),
            finetune: self.finetune.clone(),
            aug_copies: self.aug_copies,
            aug_sigma: self.base_train.jitter_sigma,
        }
    }
}
