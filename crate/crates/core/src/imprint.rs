//! Weight imprinting: new class templates set directly from normalized
//! embeddings of novel exemplars, without any gradient step.
//!
//! Every variant computes all new templates before touching the head and
//! then appends them, so existing templates and the scale are never
//! modified and a failure leaves the model as it was.

use crate::data::{augment_with, AugmentKind, Modality, SupportSet};
use crate::error::{Error, Result};
use crate::math::{axpy, norm, seeded_rng, Rng64, EPS_NORM};
use crate::model::Model;

/// Produces augmented copies of an input.
pub trait Augmenter {
    fn augment(&self, x: &[f64], rng: &mut Rng64) -> Result<Vec<f64>>;
}

/// Returns inputs unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAugmenter;

impl Augmenter for IdentityAugmenter {
    fn augment(&self, x: &[f64], _rng: &mut Rng64) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
}

/// Applies one [`AugmentKind`] to inputs of a fixed modality.
#[derive(Debug, Clone, Copy)]
pub struct InputAugmenter {
    pub kind: AugmentKind,
    pub modality: Modality,
}

impl Augmenter for InputAugmenter {
    fn augment(&self, x: &[f64], rng: &mut Rng64) -> Result<Vec<f64>> {
        augment_with(x, self.modality, self.kind, rng)
    }
}

/// Renormalized mean of unit embeddings. A single embedding is returned as is.
pub fn mean_template(embeddings: &[Vec<f64>], label: u32) -> Result<Vec<f64>> {
    match embeddings {
        [] => Err(Error::EmptyDataset),
        [only] => Ok(only.clone()),
        [first, ..] => {
            let mut sum = vec![0.0; first.len()];
            for e in embeddings {
                axpy(1.0, e, &mut sum);
            }
            let inv = 1.0 / embeddings.len() as f64;
            let mean: Vec<f64> = sum.iter().map(|v| v * inv).collect();
            let n = norm(&mean);
            if n <= EPS_NORM || !n.is_finite() {
                return Err(Error::DegenerateMean { label, norm: n });
            }
            Ok(mean.iter().map(|v| v / n).collect())
        }
    }
}

fn ensure_new(model: &Model, label: u32) -> Result<()> {
    match model.head.column_index(label) {
        Some(_) => Err(Error::DuplicateClass(label)),
        None => Ok(()),
    }
}

/// Adds a class whose template is `φ(x)`.
pub fn imprint_single(model: &mut Model, x: &[f64], label: u32) -> Result<()> {
    ensure_new(model, label)?;
    let e = model.embedder.embed(x)?;
    model.head.append_class(label, &e, 1)
}

fn support_embeddings(model: &Model, support: &SupportSet) -> Result<Vec<Vec<f64>>> {
    if support.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.embedder.embed_batch(&support.examples)
}

/// Adds a class whose template is the renormalized mean embedding of the support set.
pub fn imprint_average(model: &mut Model, support: &SupportSet) -> Result<()> {
    imprint_all(model, std::slice::from_ref(support))
}

/// Imprints several classes. Either all are appended or none.
pub fn imprint_all(model: &mut Model, supports: &[SupportSet]) -> Result<()> {
    let mut templates = Vec::with_capacity(supports.len());
    let mut seen = std::collections::HashSet::new();
    for s in supports {
        ensure_new(model, s.label)?;
        if !seen.insert(s.label) {
            return Err(Error::DuplicateClass(s.label));
        }
        let t = mean_template(&support_embeddings(model, s)?, s.label)?;
        templates.push((s.label, t, s.examples.len() as u32));
    }
    for (label, t, count) in templates {
        model.head.append_class(label, &t, count)?;
    }
    Ok(())
}

/// Embeddings of every original plus `k` augmented copies of each, in a
/// fixed order: original, then its copies.
pub fn augmented_embeddings(
    model: &Model,
    support: &SupportSet,
    augmenter: &dyn Augmenter,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(support.examples.len() * (k + 1));
    for (i, x) in support.examples.iter().enumerate() {
        out.push(model.embedder.embed(x)?);
        let mut rng = seeded_rng(seed, &[0x1a06, u64::from(support.label), i as u64]);
        for _ in 0..k {
            out.push(model.embedder.embed(&augmenter.augment(x, &mut rng)?)?);
        }
    }
    Ok(out)
}

/// Like [`imprint_average`], over the originals together with `k`
/// augmented versions of each.
pub fn imprint_augmented(
    model: &mut Model,
    support: &SupportSet,
    augmenter: &dyn Augmenter,
    k: usize,
    seed: u64,
) -> Result<()> {
    imprint_all_augmented(model, std::slice::from_ref(support), augmenter, k, seed)
}

pub fn imprint_all_augmented(
    model: &mut Model,
    supports: &[SupportSet],
    augmenter: &dyn Augmenter,
    k: usize,
    seed: u64,
) -> Result<()> {
    let mut templates = Vec::with_capacity(supports.len());
    for s in supports {
        ensure_new(model, s.label)?;
        if s.examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let embeddings = augmented_embeddings(model, s, augmenter, k, seed)?;
        let t = mean_template(&embeddings, s.label)?;
        templates.push((s.label, t, embeddings.len() as u32));
    }
    for (label, t, count) in templates {
        model.head.append_class(label, &t, count)?;
    }
    Ok(())
}

/// Folds new exemplars into a class template.
///
/// For an existing class the stored (normalized) template is weighted by
/// its imprint count and averaged with the new embeddings; the count grows
/// by `n`. For an unknown class this is [`imprint_average`].
pub fn imprint_update(model: &mut Model, support: &SupportSet) -> Result<()> {
    let Some(col) = model.head.column_index(support.label) else {
        return imprint_average(model, support);
    };
    let embeddings = support_embeddings(model, support)?;
    let old = model.head.templates().row(col);
    let old_norm = norm(old);
    if old_norm <= EPS_NORM {
        return Err(Error::DegenerateNorm { norm: old_norm });
    }
    let count = model.head.imprint_counts()[col];
    let mut sum: Vec<f64> = old.iter().map(|v| v / old_norm * f64::from(count)).collect();
    for e in &embeddings {
        axpy(1.0, e, &mut sum);
    }
    let total = count + embeddings.len() as u32;
    let mean: Vec<f64> = sum.iter().map(|v| v / f64::from(total)).collect();
    let n = norm(&mean);
    if n <= EPS_NORM || !n.is_finite() {
        return Err(Error::DegenerateMean {
            label: support.label,
            norm: n,
        });
    }
    let t: Vec<f64> = mean.iter().map(|v| v / n).collect();
    model.head.replace_class(col, &t, total);
    Ok(())
}
