mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imprint_core::checkpoint::Checkpoint;
use imprint_core::data::{load_idx, split_base_novel, sample_support, LabeledDataset, Split, SupportSet};
use imprint_core::eval::{
    build_base_model, extend_random, run_benchmark, score_model, score_nearest_neighbor, seed_data, support_seed,
    DataSource, EvalReport, ModelConfig,
};
use imprint_core::imprint::{imprint_all, imprint_all_augmented, InputAugmenter};
use imprint_core::data::AugmentKind;
use imprint_core::math::derive_seed;
use imprint_core::optim::{finetune, TrainConfig, TrainHistory};
use imprint_core::{Error, Result};
use serde_json::json;

use config::{DatasetKind, RunConfig, LOCKED_KEYS};

#[derive(Parser)]
#[command(name = "imprint", version, about = "Low-shot classification by weight imprinting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated shot counts, e.g. 1,2,5,10,20
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    base_classes: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// synthetic | idx
    #[arg(long)]
    dataset: Option<String>,
    /// Output checkpoint (training commands) or report directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config key
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the embedder and base-class head
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Add novel classes to a base checkpoint by imprinting
    Imprint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Exemplars per novel class
        #[arg(long)]
        n: Option<usize>,
        /// Average in augmented copies of each exemplar
        #[arg(long)]
        augment: bool,
    },
    /// Fine-tune an imprinted checkpoint, or a base checkpoint with random novel weights
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score a checkpoint and the matching nearest-neighbor baseline
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Averaged-template imprinting against stored-exemplar nearest neighbor
    CompareNn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Repeat the benchmark across embedding dimensions
    SweepDim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated embedding dimensions
        #[arg(long)]
        dims: Option<String>,
    },
    /// Full configuration x shots x seeds matrix
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated configuration labels
        #[arg(long)]
        configs: Option<String>,
    },
    /// Print a checkpoint's metadata in config-file form
    Inspect { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error[usage]: {}", e.to_string().trim_start_matches("error: ").trim_end());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// File values first, then flags, then `--set` pairs.
fn overrides(common: &Common, extra: Vec<(&str, String)>) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        out.extend(RunConfig::parse_text(&text)?);
    }
    let flags = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("shots", common.shots.clone()),
        ("base_classes", common.base_classes.map(|v| v.to_string())),
        ("embedding_dim", common.embedding_dim.map(|v| v.to_string())),
        ("dataset", common.dataset.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    }
    for (k, v) in extra {
        out.push((k.to_string(), v));
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies overrides on top of `base`. Keys in [`LOCKED_KEYS`] may not
/// change when continuing from a checkpoint.
fn resolve(base: Option<RunConfig>, pairs: &[(String, String)]) -> Result<RunConfig> {
    let locked = base.is_some();
    let mut cfg = base.unwrap_or_default();
    for (k, v) in pairs {
        let mut trial = cfg.clone();
        trial.set(k, v)?;
        if locked && LOCKED_KEYS.contains(&k.as_str()) && trial.get(k) != cfg.get(k) {
            return Err(config_error(format!(
                "`{k}` is fixed by the checkpoint ({}); got `{v}`",
                cfg.get(k).unwrap_or_default()
            )));
        }
        cfg = trial;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_config(command: &str, cfg: &RunConfig) {
    eprintln!("# {command}");
    for (k, v) in cfg.pairs() {
        eprintln!("# {k} = {v}");
    }
}

fn config_from_meta(meta: &BTreeMap<String, String>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in meta {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn meta_for(cfg: &RunConfig, command: &str) -> BTreeMap<String, String> {
    let mut meta: BTreeMap<String, String> = cfg.pairs().into_iter().map(|(k, v)| (format!("config.{k}"), v)).collect();
    meta.insert("command".into(), command.into());
    meta
}

fn load_data(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match cfg.dataset {
        DatasetKind::Synthetic => seed_data(&cfg.benchmark_spec(DataSource::Synthetic(cfg.synthetic.clone())), cfg.seed),
        DatasetKind::Idx => {
            let need = |p: &Option<PathBuf>| p.clone().ok_or_else(|| config_error("missing idx path"));
            let train = load_idx(&need(&cfg.train_images)?, &need(&cfg.train_labels)?, Split::Train)?;
            let test = load_idx(&need(&cfg.test_images)?, &need(&cfg.test_labels)?, Split::Test)?;
            Ok((train, test))
        }
    }
}

fn data_source(cfg: &RunConfig) -> Result<DataSource> {
    Ok(match cfg.dataset {
        DatasetKind::Synthetic => DataSource::Synthetic(cfg.synthetic.clone()),
        DatasetKind::Idx => {
            let (train, test) = load_data(cfg)?;
            DataSource::Fixed { train, test }
        }
    })
}

fn encode_supports(supports: &[SupportSet]) -> String {
    supports
        .iter()
        .map(|s| {
            let idx: Vec<String> = s.indices.iter().map(usize::to_string).collect();
            format!("{}:{}", s.label, idx.join(","))
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn decode_supports(text: &str, train: &LabeledDataset) -> Result<Vec<SupportSet>> {
    let bad = || Error::CorruptPayload("support index table is malformed".into());
    let mut out = Vec::new();
    for part in text.split(';').filter(|p| !p.is_empty()) {
        let (label, rest) = part.split_once(':').ok_or_else(bad)?;
        let label: u32 = label.parse().map_err(|_| bad())?;
        let indices: Vec<usize> = rest.split(',').map(|i| i.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let mut examples = Vec::with_capacity(indices.len());
        for &i in &indices {
            if train.labels.get(i) != Some(&label) {
                return Err(bad());
            }
            examples.push(train.examples[i].clone());
        }
        let mut s = SupportSet::new(label, examples)?;
        s.indices = indices;
        out.push(s);
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn config_header(cfg: &RunConfig, command: &str) -> String {
    let mut out = format!("# command = {command}\n");
    for (k, v) in cfg.pairs() {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out
}

fn write_losses(out: &Path, cfg: &RunConfig, command: &str, history: &TrainHistory) -> Result<()> {
    let mut text = config_header(cfg, command);
    text.push_str("epoch\tloss\n");
    for (e, l) in history.epoch_losses.iter().enumerate() {
        let _ = writeln!(text, "{e}\t{l}");
    }
    let path = PathBuf::from(format!("{}.losses.tsv", out.display()));
    write_file(&path, &text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_report(dir: &Path, cfg: &RunConfig, command: &str, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let table = report.to_table();
    print!("{table}");
    write_file(&dir.join("report.txt"), &(config_header(cfg, command) + &table))?;
    let config: BTreeMap<_, _> = cfg.pairs().into_iter().collect();
    let doc = json!({ "command": command, "config": config, "report": report });
    write_file(&dir.join("report.json"), &serde_json::to_string_pretty(&doc).expect("report serializes"))?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn load_checkpoint_arg(checkpoint: &Option<PathBuf>, command: &str) -> Result<Checkpoint> {
    let path = checkpoint
        .as_ref()
        .ok_or_else(|| config_error(format!("{command} requires --checkpoint")))?;
    Checkpoint::load(path)
}

fn stage(ckpt: &Checkpoint) -> &str {
    ckpt.meta.get("stage").map(String::as_str).unwrap_or("")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainBase { common } => {
            let cfg = resolve(None, &overrides(&common, vec![])?)?;
            log_config("train-base", &cfg);
            let out = common.out.clone().unwrap_or_else(|| "base.ckpt".into());
            let (train, _) = load_data(&cfg)?;
            let split = split_base_novel(&train.catalog, cfg.base_classes)?;
            let spec = cfg.benchmark_spec(DataSource::Synthetic(cfg.synthetic.clone()));
            let (model, history) = build_base_model(&spec, &train, &split.base, cfg.seed)?;
            for (e, l) in history.epoch_losses.iter().enumerate() {
                eprintln!("epoch {e}: loss {l:.6}");
            }
            let mut ckpt = Checkpoint::new(model);
            ckpt.meta = meta_for(&cfg, "train-base");
            ckpt.meta.insert("stage".into(), "base".into());
            ckpt.meta.insert("epoch".into(), history.epoch_losses.len().to_string());
            ckpt.save(&out)?;
            eprintln!("wrote {}", out.display());
            write_losses(&out, &cfg, "train-base", &history)
        }
        Command::Imprint {
            common,
            checkpoint,
            n,
            augment,
        } => {
            let mut extra = vec![];
            if let Some(n) = n {
                extra.push(("n", n.to_string()));
            }
            if augment {
                extra.push(("imprint_augment", "true".into()));
            }
            let pairs = overrides(&common, extra)?;
            let ckpt = load_checkpoint_arg(&checkpoint, "imprint")?;
            if stage(&ckpt) != "base" {
                return Err(config_error("imprint expects a train-base checkpoint"));
            }
            let cfg = resolve(Some(config_from_meta(&ckpt.meta)?), &pairs)?;
            log_config("imprint", &cfg);
            let out = common.out.clone().unwrap_or_else(|| "imprinted.ckpt".into());
            let (train, _) = load_data(&cfg)?;
            let split = split_base_novel(&train.catalog, cfg.base_classes)?;
            let supports = sample_support(&train, &split.novel, cfg.n, support_seed(cfg.seed, cfg.n))?;
            let mut model = ckpt.model;
            let label = if cfg.imprint_augment {
                let aug = InputAugmenter {
                    kind: AugmentKind::default_for(train.modality, cfg.base_train.jitter_sigma),
                    modality: train.modality,
                };
                imprint_all_augmented(&mut model, &supports, &aug, cfg.aug_copies, derive_seed(cfg.seed, &[6]))?;
                ModelConfig::ImprintingAug
            } else {
                imprint_all(&mut model, &supports)?;
                ModelConfig::Imprinting
            };
            let mut next = Checkpoint::new(model);
            next.meta = meta_for(&cfg, "imprint");
            next.meta.insert("stage".into(), "imprint".into());
            next.meta.insert("model_config".into(), label.to_string());
            next.meta.insert("support.n".into(), cfg.n.to_string());
            next.meta.insert("support.indices".into(), encode_supports(&supports));
            next.save(&out)?;
            eprintln!("imprinted {} classes with n = {}", supports.len(), cfg.n);
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Finetune { common, checkpoint, n } => {
            let mut extra = vec![];
            if let Some(n) = n {
                extra.push(("n", n.to_string()));
            }
            let pairs = overrides(&common, extra)?;
            let ckpt = load_checkpoint_arg(&checkpoint, "finetune")?;
            let cfg = resolve(Some(config_from_meta(&ckpt.meta)?), &pairs)?;
            log_config("finetune", &cfg);
            let out = common.out.clone().unwrap_or_else(|| "finetuned.ckpt".into());
            let (train, _) = load_data(&cfg)?;
            let split = split_base_novel(&train.catalog, cfg.base_classes)?;
            let mut model = ckpt.model.clone();
            let (label, supports, n) = match stage(&ckpt) {
                "base" => {
                    let supports = sample_support(&train, &split.novel, cfg.n, support_seed(cfg.seed, cfg.n))?;
                    extend_random(&mut model, &split.novel, derive_seed(cfg.seed, &[4]))?;
                    (ModelConfig::RandFt, supports, cfg.n)
                }
                "imprint" => {
                    let text = ckpt.meta.get("support.indices").map(String::as_str).unwrap_or("");
                    let n: usize = ckpt
                        .meta
                        .get("support.n")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::CorruptPayload("missing support.n".into()))?;
                    (ModelConfig::ImprintingFt, decode_supports(text, &train)?, n)
                }
                other => return Err(config_error(format!("cannot fine-tune a `{other}` checkpoint"))),
            };
            let ft = TrainConfig {
                seed: derive_seed(cfg.seed, &[5]),
                ..cfg.finetune.clone()
            };
            let history = finetune(&mut model, &train.restrict(&split.base), &supports, &ft)?;
            for (e, l) in history.epoch_losses.iter().enumerate() {
                eprintln!("epoch {e}: loss {l:.6}");
            }
            let mut next = Checkpoint::new(model);
            next.meta = meta_for(&cfg, "finetune");
            next.meta.insert("stage".into(), "finetune".into());
            next.meta.insert("model_config".into(), label.to_string());
            next.meta.insert("support.n".into(), n.to_string());
            next.meta.insert("support.indices".into(), encode_supports(&supports));
            next.meta.insert("epoch".into(), history.epoch_losses.len().to_string());
            next.save(&out)?;
            eprintln!("wrote {}", out.display());
            write_losses(&out, &cfg, "finetune", &history)
        }
        Command::Evaluate { common, checkpoint } => {
            let pairs = overrides(&common, vec![])?;
            let ckpt = load_checkpoint_arg(&checkpoint, "evaluate")?;
            let label: ModelConfig = match ckpt.meta.get("model_config") {
                Some(l) => l.parse()?,
                None => return Err(config_error("checkpoint has no novel classes; run imprint or finetune first")),
            };
            let cfg = resolve(Some(config_from_meta(&ckpt.meta)?), &pairs)?;
            log_config("evaluate", &cfg);
            let out = common.out.clone().unwrap_or_else(|| "report".into());
            let (train, test) = load_data(&cfg)?;
            let split = split_base_novel(&train.catalog, cfg.base_classes)?;
            let supports = decode_supports(ckpt.meta.get("support.indices").map(String::as_str).unwrap_or(""), &train)?;
            let n: usize = ckpt.meta.get("support.n").and_then(|v| v.parse().ok()).unwrap_or(0);
            let mut report = EvalReport {
                seeds: vec![cfg.seed],
                ..EvalReport::default()
            };
            for cell in [
                score_model(&ckpt.model, &test, &split.novel, label, n, cfg.seed)?,
                score_nearest_neighbor(&ckpt.model, &split.base, &supports, &test, n, cfg.seed)?,
            ] {
                report.records.extend(cell.records);
                report.per_class.extend(cell.per_class);
            }
            write_report(&out, &cfg, "evaluate", &report)
        }
        Command::CompareNn { common, seeds } => {
            let mut extra = vec![("configs", "Imprinting,NearestNeighbor".to_string())];
            if let Some(s) = seeds {
                extra.push(("seeds", s));
            }
            let cfg = resolve(None, &overrides(&common, extra)?)?;
            log_config("compare-nn", &cfg);
            let spec = cfg.benchmark_spec(data_source(&cfg)?);
            let report = run_benchmark(&spec, &cfg.shots, &cfg.configs, &cfg.seeds)?;
            write_report(&common.out.clone().unwrap_or_else(|| "report".into()), &cfg, "compare-nn", &report)
        }
        Command::Benchmark { common, seeds, configs } => {
            let mut extra = vec![];
            if let Some(s) = seeds {
                extra.push(("seeds", s));
            }
            if let Some(c) = configs {
                extra.push(("configs", c));
            }
            let cfg = resolve(None, &overrides(&common, extra)?)?;
            log_config("benchmark", &cfg);
            let spec = cfg.benchmark_spec(data_source(&cfg)?);
            let report = run_benchmark(&spec, &cfg.shots, &cfg.configs, &cfg.seeds)?;
            write_report(&common.out.clone().unwrap_or_else(|| "report".into()), &cfg, "benchmark", &report)
        }
        Command::SweepDim { common, seeds, dims } => {
            let mut extra = vec![];
            if let Some(s) = seeds {
                extra.push(("seeds", s));
            }
            if let Some(d) = dims {
                extra.push(("sweep_dims", d));
            }
            let cfg = resolve(None, &overrides(&common, extra)?)?;
            if cfg.sweep_dims.is_empty() || cfg.sweep_dims.iter().any(|&d| d < 2) {
                return Err(config_error("sweep_dims must list dimensions of at least 2"));
            }
            log_config("sweep-dim", &cfg);
            sweep_dim(&cfg, &common.out.clone().unwrap_or_else(|| "sweep".into()))
        }
        Command::Inspect { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = config_from_meta(&ckpt.meta)?;
            for (k, v) in &ckpt.meta {
                if !k.starts_with("config.") {
                    println!("# {k} = {v}");
                }
            }
            println!("# classes = {}", ckpt.model.head.num_classes());
            println!("# scale = {}", ckpt.model.head.scale());
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn sweep_dim(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let source = data_source(cfg)?;
    let mut runs = Vec::new();
    let mut text = config_header(cfg, "sweep-dim");
    for &d in &cfg.sweep_dims {
        let mut spec = cfg.benchmark_spec(source.clone());
        spec.embedding_dim = d;
        let report = run_benchmark(&spec, &cfg.shots, &cfg.configs, &cfg.seeds)?;
        let _ = write!(text, "\nembedding_dim = {d}\n{}", report.to_table());
        runs.push((d, report));
    }
    // spread of seed-mean accuracy across dimensions
    let mut spread: BTreeMap<(ModelConfig, usize, String), Vec<f64>> = BTreeMap::new();
    for (_, r) in &runs {
        for row in r.summary() {
            spread.entry((row.config, row.n, row.metric)).or_default().push(row.mean);
        }
    }
    text.push_str("\nspread across embedding dims (max - min of seed means)\n");
    for ((config, n, metric), means) in &spread {
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let _ = writeln!(text, "{:<16} {:>3}  {:<22} {:>8.4}", config.label(), n, metric, hi - lo);
    }
    print!("{text}");
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    write_file(&dir.join("sweep.txt"), &text)?;
    let config: BTreeMap<_, _> = cfg.pairs().into_iter().collect();
    let runs_json: Vec<_> = runs
        .iter()
        .map(|(d, r)| json!({ "embedding_dim": d, "report": r }))
        .collect();
    let doc = json!({ "command": "sweep-dim", "config": config, "runs": runs_json });
    write_file(&dir.join("sweep.json"), &serde_json::to_string_pretty(&doc).expect("report serializes"))?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}
