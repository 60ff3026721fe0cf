//! RMSProp with momentum, the stepwise exponential learning-rate schedule,
//! class-balanced sampling, base training and fine-tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentKind, LabeledDataset, SupportSet};
use crate::error::{Error, Result};
use crate::imprint::{Augmenter, InputAugmenter};
use crate::math::{all_finite, seeded_rng, Rng64};
use crate::model::{Model, ModelGrads};
use crate::params::{Gradients, ParamGroup, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub fresh_multiplier: f64,
    pub decay_rate: f64,
    pub decay_every_epochs: usize,
    pub rms_decay: f64,
    pub momentum: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub oversample_novel: bool,
    /// Train the head scale. When false the scale keeps its current value.
    pub train_scale: bool,
    /// Augment inputs while training.
    pub augment: bool,
    /// Noise level of the jitter augmentation used for vector inputs.
    pub jitter_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            fresh_multiplier: 10.0,
            decay_rate: 0.94,
            decay_every_epochs: 4,
            rms_decay: 0.9,
            momentum: 0.9,
            epsilon: 1e-10,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            oversample_novel: true,
            train_scale: true,
            augment: false,
            jitter_sigma: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.fresh_multiplier > 0.0 && self.fresh_multiplier.is_finite()) {
            return bad("fresh_multiplier must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must lie in (0, 1]");
        }
        if self.decay_every_epochs == 0 {
            return bad("decay_every_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return bad("rms_decay must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad("jitter_sigma must be nonnegative");
        }
        Ok(())
    }
}

/// `base_lr · decay^⌊epoch / every⌋`, times the fresh multiplier for fresh parameters.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize, group: ParamGroup) -> f64 {
    let lr = cfg.base_lr * cfg.decay_rate.powi((epoch / cfg.decay_every_epochs) as i32);
    match group {
        ParamGroup::Pretrained => lr,
        ParamGroup::Fresh => lr * cfg.fresh_multiplier,
    }
}

/// Squared-gradient accumulator and momentum buffer for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub acc: Vec<f64>,
    pub mom: Vec<f64>,
}

impl Slot {
    pub fn zeros(len: usize) -> Self {
        Slot {
            acc: vec![0.0; len],
            mom: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub embedder: Vec<Slot>,
    pub head: Vec<Slot>,
    pub epoch: usize,
    pub step: u64,
}

fn slots_for(params: &ParamSet) -> Vec<Slot> {
    params.iter().map(|p| Slot::zeros(p.value.as_slice().len())).collect()
}

impl OptimState {
    pub fn for_model(model: &Model) -> Self {
        OptimState {
            embedder: slots_for(model.embedder.params()),
            head: slots_for(model.head.params()),
            epoch: 0,
            step: 0,
        }
    }

    fn matches(&self, model: &Model) -> bool {
        let same = |slots: &[Slot], ps: &ParamSet| {
            slots.len() == ps.len() && slots.iter().zip(ps.iter()).all(|(s, p)| s.acc.len() == p.value.as_slice().len())
        };
        same(&self.embedder, model.embedder.params()) && same(&self.head, model.head.params())
    }
}

/// One RMSProp-with-momentum update of a single tensor:
///
/// ```text
/// acc ← ρ·acc + (1−ρ)·g²
/// mom ← μ·mom + lr·g / √(acc + ε)
/// w   ← w − mom
/// ```
pub fn rmsprop_update(values: &mut [f64], grads: &[f64], slot: &mut Slot, lr: f64, cfg: &TrainConfig) {
    let rho = cfg.rms_decay;
    let mu = cfg.momentum;
    for (((w, &g), acc), mom) in values
        .iter_mut()
        .zip(grads)
        .zip(slot.acc.iter_mut())
        .zip(slot.mom.iter_mut())
    {
        *acc = rho * *acc + (1.0 - rho) * g * g;
        let denom = (*acc + cfg.epsilon).sqrt();
        let step = if denom > 0.0 { lr * g / denom } else { 0.0 };
        *mom = mu * *mom + step;
        *w -= *mom;
    }
}

/// Updates every tensor of `params`. `lr` is the rate for pretrained
/// parameters; fresh ones use `lr · fresh_multiplier`. Tensors listed in
/// `frozen` are left alone.
pub fn rmsprop_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut [Slot],
    lr: f64,
    cfg: &TrainConfig,
    frozen: &[&str],
) -> Result<()> {
    if grads.values.len() != params.len() || state.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: grads.values.len().min(state.len()),
        });
    }
    grads.check_finite(params)?;
    for ((p, g), slot) in params.iter_mut().zip(&grads.values).zip(state.iter_mut()) {
        if frozen.contains(&p.name.as_str()) {
            continue;
        }
        let rate = match p.group {
            ParamGroup::Pretrained => lr,
            ParamGroup::Fresh => lr * cfg.fresh_multiplier,
        };
        rmsprop_update(p.value.as_mut_slice(), g, slot, rate, cfg);
    }
    Ok(())
}

fn apply_step(model: &mut Model, grads: &ModelGrads, state: &mut OptimState, cfg: &TrainConfig) -> Result<()> {
    let lr = lr_at_epoch(cfg, state.epoch, ParamGroup::Pretrained);
    let frozen: &[&str] = if cfg.train_scale { &[] } else { &["head.log_scale"] };
    rmsprop_step(model.embedder.params_mut(), &grads.embedder, &mut state.embedder, lr, cfg, &[])?;
    rmsprop_step(model.head.params_mut(), &grads.head, &mut state.head, lr, cfg, frozen)?;
    state.step += 1;
    Ok(())
}

/// Draws a class uniformly, then an example of that class uniformly, so
/// every class is equally likely regardless of how many examples it has.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<(u32, Vec<usize>)>,
}

impl BalancedSampler {
    pub fn new(labels: &[u32]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        Ok(BalancedSampler {
            by_class: map.into_iter().collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let (_, idx) = &self.by_class[rng.random_range(0..self.by_class.len())];
        idx[rng.random_range(0..idx.len())]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss of each epoch, measured on the batches as they
    /// were used (before each update).
    pub epoch_losses: Vec<f64>,
}

struct Pool<'a> {
    inputs: Vec<&'a [f64]>,
    columns: Vec<usize>,
    labels: Vec<u32>,
}

fn build_pool<'a>(model: &Model, parts: impl Iterator<Item = (&'a [f64], u32)>) -> Result<Pool<'a>> {
    let mut pool = Pool {
        inputs: Vec::new(),
        columns: Vec::new(),
        labels: Vec::new(),
    };
    for (x, label) in parts {
        let col = model.head.column_index(label).ok_or(Error::MissingClassColumn(label))?;
        if x.len() != model.embedder.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.embedder.input_dim(),
                actual: x.len(),
            });
        }
        pool.inputs.push(x);
        pool.columns.push(col);
        pool.labels.push(label);
    }
    if pool.inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(pool)
}

fn run_epochs(
    model: &mut Model,
    pool: &Pool<'_>,
    balanced: bool,
    augmenter: Option<InputAugmenter>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut state = OptimState::for_model(model);
    debug_assert!(state.matches(model));
    let sampler = if balanced {
        Some(BalancedSampler::new(&pool.labels)?)
    } else {
        None
    };
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut order_rng = seeded_rng(cfg.seed, &[0x0de7, epoch as u64]);
        let mut aug_rng: Rng64 = seeded_rng(cfg.seed, &[0xa09, epoch as u64]);
        let order: Vec<usize> = match &sampler {
            Some(s) => (0..pool.inputs.len()).map(|_| s.sample(&mut order_rng)).collect(),
            None => {
                let mut o: Vec<usize> = (0..pool.inputs.len()).collect();
                o.shuffle(&mut order_rng);
                o
            }
        };
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<Vec<f64>> = match &augmenter {
                Some(a) => chunk
                    .iter()
                    .map(|&i| a.augment(pool.inputs[i], &mut aug_rng))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let x = if augmenter.is_some() { augmented[k].as_slice() } else { pool.inputs[i] };
                    (x, pool.columns[i])
                })
                .collect();
            let (loss, grads) = model.batch_loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            loss_sum += loss * batch.len() as f64;
            apply_step(model, &grads, &mut state, cfg)?;
        }
        history.epoch_losses.push(loss_sum / order.len() as f64);
    }
    debug_assert!(history.epoch_losses.iter().all(|l| l.is_finite()));
    debug_assert!(state.embedder.iter().all(|s| all_finite(&s.acc)));
    Ok(history)
}

fn augmenter_for(data: &LabeledDataset, cfg: &TrainConfig) -> Option<InputAugmenter> {
    cfg.augment.then(|| InputAugmenter {
        kind: AugmentKind::default_for(data.modality, cfg.jitter_sigma),
        modality: data.modality,
    })
}

/// Trains embedder and head end to end with cross-entropy on the base
/// classes. The head must have exactly one column per base class. Afterwards
/// the embedder's parameters are tagged pretrained.
pub fn train_base(model: &mut Model, base: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    if base.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for &c in &base.catalog {
        if model.head.column_index(c).is_none() {
            return Err(Error::MissingClassColumn(c));
        }
    }
    if model.head.num_classes() != base.catalog.len() {
        return Err(Error::InvalidConfig(format!(
            "head has {} classes but base data has {}",
            model.head.num_classes(),
            base.catalog.len()
        )));
    }
    let pool = build_pool(model, base.examples.iter().map(Vec::as_slice).zip(base.labels.iter().copied()))?;
    let history = run_epochs(model, &pool, false, augmenter_for(base, cfg), cfg)?;
    if cfg.epochs > 0 {
        model.embedder.params_mut().set_group(ParamGroup::Pretrained);
    }
    Ok(history)
}

/// End-to-end training over all base examples plus the novel support sets.
/// With `oversample_novel` every class is drawn with equal probability.
pub fn finetune(
    model: &mut Model,
    base: &LabeledDataset,
    novel: &[SupportSet],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let parts = base
        .examples
        .iter()
        .map(Vec::as_slice)
        .zip(base.labels.iter().copied())
        .chain(novel.iter().flat_map(|s| s.examples.iter().map(move |x| (x.as_slice(), s.label))));
    let pool = build_pool(model, parts)?;
    run_epochs(model, &pool, cfg.oversample_novel, augmenter_for(base, cfg), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};
    use crate::embedder::{EmbedderConfig, EmbeddingNet};
    use crate::head::CosineHead;
    use crate::math::Matrix;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0, ParamGroup::Pretrained), 1.0e-4);
        assert_eq!(lr_at_epoch(&cfg, 3, ParamGroup::Pretrained), 1.0e-4);
        assert_eq!(lr_at_epoch(&cfg, 4, ParamGroup::Pretrained), 9.4e-5);
        assert_eq!(lr_at_epoch(&cfg, 8, ParamGroup::Pretrained), 8.836e-5);
        assert_eq!(lr_at_epoch(&cfg, 0, ParamGroup::Fresh), 1.0e-3);
    }

    #[test]
    fn schedule_is_stepwise_and_ratio_is_constant() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for epoch in 0..200 {
            let p = lr_at_epoch(&cfg, epoch, ParamGroup::Pretrained);
            let f = lr_at_epoch(&cfg, epoch, ParamGroup::Fresh);
            assert!(p <= prev);
            if epoch % 4 != 0 {
                assert_eq!(p, prev);
            }
            assert!((f / p - 10.0).abs() < 1e-12);
            prev = p;
        }
    }

    fn oracle_cfg() -> TrainConfig {
        TrainConfig {
            rms_decay: 0.9,
            momentum: 0.9,
            epsilon: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_step_oracle() {
        let mut w = [1.0];
        let mut slot = Slot::zeros(1);
        rmsprop_update(&mut w, &[1.0], &mut slot, 0.1, &oracle_cfg());
        // acc = 0.1, mom = 0.1 / sqrt(0.1) = sqrt(0.1)
        assert!((slot.acc[0] - 0.1).abs() < 1e-15);
        assert!((slot.mom[0] - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((w[0] - (1.0 - 0.1f64.sqrt())).abs() < 1e-12);
        assert!((w[0] - 0.68377).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_is_identity_and_coordinates_independent() {
        let mut w = [0.3, -2.0];
        let mut slot = Slot::zeros(2);
        rmsprop_update(&mut w, &[0.0, 0.0], &mut slot, 0.1, &oracle_cfg());
        assert_eq!(w, [0.3, -2.0]);

        let mut both = [1.0, 5.0];
        let mut s2 = Slot::zeros(2);
        rmsprop_update(&mut both, &[1.0, -0.5], &mut s2, 0.1, &TrainConfig::default());
        let mut a = [1.0];
        let mut sa = Slot::zeros(1);
        rmsprop_update(&mut a, &[1.0], &mut sa, 0.1, &TrainConfig::default());
        let mut b = [5.0];
        let mut sb = Slot::zeros(1);
        rmsprop_update(&mut b, &[-0.5], &mut sb, 0.1, &TrainConfig::default());
        assert_eq!(both, [a[0], b[0]]);
    }

    #[test]
    fn step_uses_group_rates_and_rejects_non_finite() {
        let mut ps = ParamSet::new();
        ps.push("p", ParamGroup::Pretrained, Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        ps.push("f", ParamGroup::Fresh, Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        ps.push("z", ParamGroup::Fresh, Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        let cfg = oracle_cfg();
        let mut state = slots_for(&ps);
        let g = Gradients {
            values: vec![vec![1.0], vec![1.0], vec![1.0]],
        };
        rmsprop_step(&mut ps, &g, &mut state, 0.01, &cfg, &["z"]).unwrap();
        let moved = |i: usize| 1.0 - ps.get(i).value.as_slice()[0];
        assert!((moved(1) / moved(0) - 10.0).abs() < 1e-12);
        assert_eq!(moved(2), 0.0);
        let bad = Gradients {
            values: vec![vec![f64::INFINITY], vec![0.0], vec![0.0]],
        };
        assert!(matches!(
            rmsprop_step(&mut ps, &bad, &mut state, 0.01, &cfg, &[]),
            Err(Error::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn balanced_sampler_is_uniform_over_classes() {
        // 100 classes with 30 examples and 100 with 2
        let mut labels = Vec::new();
        for c in 0..200u32 {
            let n = if c < 100 { 30 } else { 2 };
            labels.extend(std::iter::repeat_n(c, n));
        }
        let sampler = BalancedSampler::new(&labels).unwrap();
        let mut rng = seeded_rng(99, &[]);
        let draws = 100_000;
        let mut counts = vec![0usize; 200];
        for _ in 0..draws {
            counts[labels[sampler.sample(&mut rng)] as usize] += 1;
        }
        let expected = draws as f64 / 200.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Wilson-Hilferty upper 1% point of chi-square with 199 degrees of freedom
        let k: f64 = 199.0;
        let z99 = 2.326_347_874;
        let crit = k * (1.0 - 2.0 / (9.0 * k) + z99 * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
    }

    fn toy(seed: u64) -> (Model, LabeledDataset) {
        let data = SyntheticConfig {
            num_classes: 4,
            per_class_train: 25,
            per_class_test: 5,
            input_dim: 6,
            noise_sigma: 0.1,
            min_angle_deg: 60.0,
            seed,
        };
        let (train, _) = gen_synthetic(&data).unwrap();
        let mut ecfg = EmbedderConfig::new(6, vec![16], 4);
        ecfg.seed = seed;
        let model = Model::new(
            EmbeddingNet::new(ecfg).unwrap(),
            CosineHead::random(train.catalog.clone(), 4, seed).unwrap(),
        )
        .unwrap();
        (model, train)
    }

    fn toy_cfg(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 1e-3,
            batch_size: 10,
            epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (mut model, train) = toy(1);
        let before = model.clone();
        let h = train_base(&mut model, &train, &toy_cfg(1, 0)).unwrap();
        assert!(h.epoch_losses.is_empty());
        assert_eq!(model, before);
        let h = finetune(&mut model, &train, &[], &toy_cfg(1, 0)).unwrap();
        assert!(h.epoch_losses.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let (mut model, train) = toy(seed);
            train_base(&mut model, &train, &toy_cfg(seed, 30)).unwrap();
            let correct = train
                .examples
                .iter()
                .zip(&train.labels)
                .filter(|(x, &l)| model.predict(x).unwrap() == l)
                .count();
            accs.push(correct as f64 / train.len() as f64);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(mean >= 0.99, "{accs:?}");
    }

    #[test]
    fn early_epoch_losses_decrease() {
        let mut ok = 0;
        for seed in 0..10 {
            let (mut model, train) = toy(seed);
            let h = train_base(&mut model, &train, &toy_cfg(seed, 5)).unwrap();
            if h.epoch_losses.windows(2).all(|w| w[1] < w[0]) {
                ok += 1;
            }
        }
        assert!(ok >= 9, "{ok}/10");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut model, train) = toy(3);
            let h = train_base(&mut model, &train, &toy_cfg(3, 4)).unwrap();
            (h, model)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(
            h1.epoch_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            h2.epoch_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(m1, m2);
    }

    #[test]
    fn base_training_requires_matching_head() {
        let (model, train) = toy(0);
        let mut wrong = model.clone();
        wrong.head = CosineHead::random(vec![0, 1, 2], 4, 0).unwrap();
        assert!(matches!(
            train_base(&mut wrong, &train, &toy_cfg(0, 1)),
            Err(Error::MissingClassColumn(3))
        ));
        let mut extra = model.clone();
        extra.head = CosineHead::random(vec![0, 1, 2, 3, 4], 4, 0).unwrap();
        assert!(train_base(&mut extra, &train, &toy_cfg(0, 1)).is_err());
        let empty = train.restrict(&[]);
        let mut m = model.clone();
        assert!(matches!(train_base(&mut m, &empty, &toy_cfg(0, 1)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn finetune_needs_columns_for_novel_labels() {
        let (mut model, train) = toy(0);
        let support = SupportSet::new(42, vec![vec![0.1; 6]]).unwrap();
        assert!(matches!(
            finetune(&mut model, &train, &[support], &toy_cfg(0, 1)),
            Err(Error::MissingClassColumn(42))
        ));
    }

    #[test]
    fn frozen_scale_stays_put() {
        let (mut model, train) = toy(2);
        let s = model.head.log_scale();
        let cfg = TrainConfig {
            train_scale: false,
            ..toy_cfg(2, 2)
        };
        train_base(&mut model, &train, &cfg).unwrap();
        assert_eq!(model.head.log_scale(), s);
        let (mut model, train) = toy(2);
        train_base(&mut model, &train, &toy_cfg(2, 2)).unwrap();
        assert_ne!(model.head.log_scale(), s);
        assert!(model.head.scale() > 0.0);
    }
}
