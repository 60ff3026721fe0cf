//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use imprint_core::checkpoint::Checkpoint;
use imprint_core::data::{sample_support, split_base_novel};
use imprint_core::embedder::{EmbedderConfig, EmbeddingNet, Nonlinearity};
use imprint_core::eval::{
    build_base_model, metric, nn_predict, run_benchmark, seed_data, support_seed, BenchmarkSpec, EmbeddingStore,
    ModelConfig,
};
use imprint_core::gradcheck::grad_check;
use imprint_core::head::{softmax_probs, CosineHead};
use imprint_core::imprint::imprint_all;
use imprint_core::losses::{cross_entropy_logits, nca_proxy_loss};
use imprint_core::math::{dot, l2_normalize, seeded_rng, squared_distance, Matrix};
use imprint_core::optim::{lr_at_epoch, rmsprop_step, Slot, TrainConfig};
use imprint_core::params::{Gradients, ParamGroup, ParamSet};
use imprint_core::{Error, Model};
use rand::Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    l2_normalize(&v).unwrap()
}

const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

fn scale_factor_example() -> Outcome {
    let mut w = Matrix::zeros(0, 2);
    w.push_row(&[1.0, 0.0]).unwrap();
    for _ in 1..100 {
        w.push_row(&[-1.0, 0.0]).unwrap();
    }
    let head = CosineHead::from_templates(w, (0..100).collect(), 1.0).map_err(|e| e.to_string())?;
    let logits = head.cosine_logits(&[1.0, 0.0]).map_err(|e| e.to_string())?;
    let p = softmax_probs(&logits).map_err(|e| e.to_string())?[0];
    check((p - 0.069).abs() <= 0.001, format!("p = {p:.5}"))
}

fn unit_vector_identity() -> Outcome {
    let mut rng = seeded_rng(2, &[]);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let d = rng.random_range(2..65);
        let u = random_unit(&mut rng, d);
        let v = random_unit(&mut rng, d);
        worst = worst.max((squared_distance(&u, &v) - (2.0 - 2.0 * dot(&u, &v))).abs());
    }
    check(worst <= 1e-12, format!("max deviation {worst:.2e} over 1e5 pairs"))
}

fn proxy_softmax_equivalence() -> Outcome {
    let mut rng = seeded_rng(3, &[]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(2..33);
        let c = rng.random_range(2..50);
        let mut proxies = Matrix::zeros(0, d);
        for _ in 0..c {
            proxies.push_row(&random_unit(&mut rng, d)).unwrap();
        }
        let x = random_unit(&mut rng, d);
        let label = rng.random_range(0..c);
        let proxy = nca_proxy_loss(&x, &proxies, label).map_err(|e| e.to_string())?.loss;
        let head = CosineHead::from_templates(proxies, (0..c as u32).collect(), 2.0).map_err(|e| e.to_string())?;
        let logits = head.cosine_logits(&x).map_err(|e| e.to_string())?;
        let ce = cross_entropy_logits(&logits, label).map_err(|e| e.to_string())?.loss;
        worst = worst.max((proxy - ce).abs());
    }
    check(worst <= 1e-10, format!("max |proxy - ce| {worst:.2e} over 1e3 instances"))
}

fn gradient_integrity() -> Outcome {
    let mut rng = seeded_rng(4, &[]);
    let mut worst = 0.0f64;
    let mut checked = 0u64;
    let mut redrawn = 0u64;
    while checked < 20 {
        let i = checked + redrawn;
        let input = rng.random_range(2..7);
        let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(2..8)).collect();
        let d = rng.random_range(2..6);
        let classes = rng.random_range(2..7u32);
        let mut cfg = EmbedderConfig::new(input, hidden, d);
        cfg.nonlinearity = if i % 2 == 0 { Nonlinearity::Tanh } else { Nonlinearity::Relu };
        cfg.seed = i;
        let mut head = CosineHead::random((0..classes).collect(), d, 100 + i).unwrap();
        head.set_scale(rng.random_range(1.0..20.0)).unwrap();
        let model = Model::new(EmbeddingNet::new(cfg).unwrap(), head).unwrap();
        let xs: Vec<Vec<f64>> = (0..rng.random_range(1..4))
            .map(|_| (0..input).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<(&[f64], usize)> = xs
            .iter()
            .map(|x| (x.as_slice(), rng.random_range(0..classes as usize)))
            .collect();
        // a dead ReLU layer can zero the embedding; normalization is undefined there
        let Ok((_, grads)) = model.batch_loss_and_grads(&batch) else {
            redrawn += 1;
            continue;
        };
        let f = |flat: &[f64]| {
            let mut m = model.clone();
            m.set_flat(flat)?;
            m.batch_loss(&batch)
        };
        let report = grad_check(f, &model.to_flat(), &grads.to_flat(), 1e-4).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error);
        if !report.passed {
            return Err(format!("instance {i}: max relative error {:.2e}", report.max_rel_error));
        }
        checked += 1;
    }
    check(
        worst <= 1e-4,
        format!("max relative error {worst:.2e} over 20 instances ({redrawn} degenerate draws redrawn)"),
    )
}

fn one_nn_equivalence() -> Outcome {
    let spec = BenchmarkSpec::standard();
    let mut queries = 0usize;
    for seed in SEEDS {
        let (train, test) = seed_data(&spec, seed).map_err(|e| e.to_string())?;
        let split = split_base_novel(&train.catalog, spec.base_classes).map_err(|e| e.to_string())?;
        let (base, _) = build_base_model(&spec, &train, &split.base, seed).map_err(|e| e.to_string())?;
        let supports = sample_support(&train, &split.novel, 1, support_seed(seed, 1)).map_err(|e| e.to_string())?;
        let mut model = base.clone();
        imprint_all(&mut model, &supports).map_err(|e| e.to_string())?;

        let mut store = EmbeddingStore::new();
        let w = base.head.templates();
        for (r, &label) in base.head.class_ids().iter().enumerate() {
            store.insert(w.row(r), label).unwrap();
        }
        for s in &supports {
            store.insert(&base.embedder.embed(&s.examples[0]).unwrap(), s.label).unwrap();
        }
        let predictor = model.predictor().map_err(|e| e.to_string())?;
        for (i, x) in test.examples.iter().enumerate() {
            let e = base.embedder.embed(x).unwrap();
            let a = predictor.predict_embedding(&e).unwrap();
            let b = nn_predict(&store, &e).unwrap();
            if a != b {
                return Err(format!("seed {seed}, query {i}: head {a} vs nn {b}"));
            }
            queries += 1;
        }
    }
    Ok(format!("{queries} queries identical over 10 seeds"))
}

fn imprinting_beats_random() -> Outcome {
    let spec = BenchmarkSpec::standard();
    let r = run_benchmark(&spec, &[1], &[ModelConfig::RandNoFt, ModelConfig::Imprinting], &SEEDS)
        .map_err(|e| e.to_string())?;
    // top-1 is taken over all 200 head classes
    let chance = 1.0 / 200.0;
    let mut worst_gap = f64::INFINITY;
    for seed in SEEDS {
        let imp = r.value(ModelConfig::Imprinting, 1, seed, metric::NOVEL).unwrap();
        let rand = r.value(ModelConfig::RandNoFt, 1, seed, metric::NOVEL).unwrap();
        worst_gap = worst_gap.min(imp - rand);
    }
    check(
        worst_gap >= 10.0 * chance,
        format!(
            "means {:.4} vs {:.4}; smallest per-seed gap {worst_gap:.4} (needs >= {:.3})",
            r.mean(ModelConfig::Imprinting, 1, metric::NOVEL).unwrap(),
            r.mean(ModelConfig::RandNoFt, 1, metric::NOVEL).unwrap(),
            10.0 * chance
        ),
    )
}

fn monotonic_shots() -> Outcome {
    let shots = [1, 2, 5, 10, 20];
    let r = run_benchmark(&BenchmarkSpec::standard(), &shots, &[ModelConfig::Imprinting], &SEEDS)
        .map_err(|e| e.to_string())?;
    let means: Vec<f64> = shots
        .iter()
        .map(|&n| r.mean(ModelConfig::Imprinting, n, metric::NOVEL).unwrap())
        .collect();
    let drops: Vec<f64> = means.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    let ok = drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.01);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    check(ok, format!("seed means {}", shown.join(" ")))
}

fn finetune_initialization() -> Outcome {
    let r = run_benchmark(
        &BenchmarkSpec::standard(),
        &[1, 2],
        &[ModelConfig::RandFt, ModelConfig::ImprintingFt],
        &SEEDS,
    )
    .map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    let mut ok = true;
    for n in [1, 2] {
        let wins = SEEDS
            .iter()
            .filter(|&&s| {
                r.value(ModelConfig::ImprintingFt, n, s, metric::NOVEL).unwrap()
                    >= r.value(ModelConfig::RandFt, n, s, metric::NOVEL).unwrap()
            })
            .count();
        let imp = r.mean(ModelConfig::ImprintingFt, n, metric::NOVEL).unwrap();
        let rand = r.mean(ModelConfig::RandFt, n, metric::NOVEL).unwrap();
        ok &= wins >= 8 && imp >= rand;
        details.push(format!("n={n}: {imp:.4} vs {rand:.4}, {wins}/10 seeds"));
    }
    check(ok, details.join("; "))
}

fn averaged_beats_stored_nn() -> Outcome {
    let r = run_benchmark(
        &BenchmarkSpec::noisy(),
        &[5],
        &[ModelConfig::Imprinting, ModelConfig::NearestNeighbor],
        &SEEDS,
    )
    .map_err(|e| e.to_string())?;
    let wins = |m: &str| {
        SEEDS
            .iter()
            .filter(|&&s| {
                r.value(ModelConfig::Imprinting, 5, s, m).unwrap()
                    >= r.value(ModelConfig::NearestNeighbor, 5, s, m).unwrap()
            })
            .count()
    };
    let all_way = wins(metric::NOVEL);
    let novel_way = wins(metric::NOVEL_WAY);
    check(
        all_way >= 7 && novel_way >= 7,
        format!(
            "{:.4} vs {:.4}; {all_way}/10 seeds over all classes, {novel_way}/10 over novel classes",
            r.mean(ModelConfig::Imprinting, 5, metric::NOVEL).unwrap(),
            r.mean(ModelConfig::NearestNeighbor, 5, metric::NOVEL).unwrap()
        ),
    )
}

fn non_interference() -> Outcome {
    let d = 16;
    let mut cfg = EmbedderConfig::new(8, vec![12], d);
    cfg.seed = 5;
    let base = Model::new(
        EmbeddingNet::new(cfg).unwrap(),
        CosineHead::random((0..10).collect(), d, 6).unwrap(),
    )
    .unwrap();
    let mut rng = seeded_rng(7, &[]);
    for n in [1, 3, 10] {
        let supports: Vec<_> = (100..105u32)
            .map(|label| {
                let xs = (0..n).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                imprint_core::data::SupportSet::new(label, xs).unwrap()
            })
            .collect();
        let mut m = base.clone();
        imprint_all(&mut m, &supports).map_err(|e| e.to_string())?;
        let old = base.head.templates().as_slice();
        let new = m.head.templates().as_slice();
        if old.iter().zip(new).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("n={n}: an old template changed"));
        }
        if m.head.log_scale().to_bits() != base.head.log_scale().to_bits() || m.embedder != base.embedder {
            return Err(format!("n={n}: scale or embedder changed"));
        }
        let grown = m.num_scalars() - base.num_scalars();
        if grown != d * supports.len() {
            return Err(format!("n={n}: grew by {grown}, expected {}", d * supports.len()));
        }
    }
    Ok(format!("old columns bitwise equal; +{d} scalars per class for n in 1, 3, 10"))
}

fn optimizer_conformance() -> Outcome {
    let cfg = TrainConfig::default();
    let mut params = ParamSet::new();
    params
        .push("p", ParamGroup::Pretrained, Matrix::from_vec(1, 2, vec![1.0, -0.5]).unwrap())
        .unwrap();
    params
        .push("f", ParamGroup::Fresh, Matrix::from_vec(1, 1, vec![0.25]).unwrap())
        .unwrap();
    let mut state = vec![Slot::zeros(2), Slot::zeros(1)];
    let lr = lr_at_epoch(&cfg, 0, ParamGroup::Pretrained);
    let steps = [
        (vec![vec![0.3, -0.2], vec![1.5]], [0.999_683_772_235_739_98, -0.499_683_772_237_936_01, 0.246_837_722_340_534_35]),
        (vec![vec![0.1, 0.4], vec![-0.7]], [0.999_294_338_764_809_76, -0.499_684_881_537_063_84, 0.245_387_491_252_731_22]),
    ];
    let mut worst = 0.0f64;
    for (g, expected) in steps {
        rmsprop_step(&mut params, &Gradients { values: g }, &mut state, lr, &cfg, &[]).map_err(|e| e.to_string())?;
        let got: Vec<f64> = params.iter().flat_map(|p| p.value.as_slice().to_vec()).collect();
        for (a, b) in got.iter().zip(expected) {
            worst = worst.max((a - b).abs());
        }
    }
    let schedule = [
        lr_at_epoch(&cfg, 0, ParamGroup::Pretrained),
        lr_at_epoch(&cfg, 4, ParamGroup::Pretrained),
        lr_at_epoch(&cfg, 8, ParamGroup::Pretrained),
    ];
    let exact = schedule == [1e-4, 9.4e-5, 8.836e-5];
    check(
        worst <= 1e-12 && exact,
        format!("max step error {worst:.2e}; schedule {schedule:?}"),
    )
}

fn persistence() -> Outcome {
    let mut cfg = EmbedderConfig::new(10, vec![16], 8);
    cfg.seed = 11;
    let mut model = Model::new(
        EmbeddingNet::new(cfg).unwrap(),
        CosineHead::random((0..20).collect(), 8, 12).unwrap(),
    )
    .unwrap();
    let mut rng = seeded_rng(13, &[]);
    let support = imprint_core::data::SupportSet::new(
        50,
        (0..3).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
    )
    .unwrap();
    imprint_all(&mut model, &[support]).unwrap();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    let mut ckpt = Checkpoint::new(model.clone());
    ckpt.meta.insert("seed".into(), "13".into());
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    for i in 0..100 {
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = model.logits(&x).unwrap();
        let b = back.model.logits(&x).unwrap();
        if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) || model.predict(&x).unwrap() != back.model.predict(&x).unwrap() {
            return Err(format!("input {i}: outputs differ after reload"));
        }
    }
    let bytes = std::fs::read(&path).unwrap();
    if back.encode().unwrap() != bytes {
        return Err("re-encoding is not byte-identical".into());
    }
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x01;
    let truncated = &bytes[..bytes.len() - 5];
    let mut future = bytes.clone();
    future[8] = 9;
    let rejected = matches!(Checkpoint::decode(&flipped), Err(Error::CorruptPayload(_)))
        && matches!(Checkpoint::decode(truncated), Err(Error::CorruptPayload(_)))
        && matches!(Checkpoint::decode(&future), Err(Error::BadVersion(9)));
    check(rejected, "100 inputs bitwise equal; flipped, truncated and future-version files rejected".into())
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "scale-factor example", budget: Duration::from_secs(1), run: scale_factor_example },
        Criterion { id: 2, name: "unit-vector identity", budget: Duration::from_secs(5), run: unit_vector_identity },
        Criterion { id: 3, name: "proxy/softmax equivalence", budget: Duration::from_secs(5), run: proxy_softmax_equivalence },
        Criterion { id: 4, name: "gradient integrity", budget: Duration::from_secs(30), run: gradient_integrity },
        Criterion { id: 5, name: "1-NN equivalence", budget: Duration::from_secs(30), run: one_nn_equivalence },
        Criterion { id: 6, name: "imprinting beats random", budget: Duration::from_secs(300), run: imprinting_beats_random },
        Criterion { id: 7, name: "monotonic shots trend", budget: Duration::from_secs(300), run: monotonic_shots },
        Criterion { id: 8, name: "fine-tuning initialization", budget: Duration::from_secs(900), run: finetune_initialization },
        Criterion { id: 9, name: "averaged vs stored NN", budget: Duration::from_secs(300), run: averaged_beats_stored_nn },
        Criterion { id: 10, name: "non-interference and size", budget: Duration::from_secs(1), run: non_interference },
        Criterion { id: 11, name: "optimizer conformance", budget: Duration::from_secs(1), run: optimizer_conformance },
        Criterion { id: 12, name: "persistence", budget: Duration::from_secs(5), run: persistence },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let (status, detail) = match (&outcome, in_budget) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over time budget")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "[{status}] criterion {:>2} {:<28} {:>8.2}s / {:>4}s  {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
