//! Cosine classifier head: raw template columns normalized in the forward
//! pass, a shared positive scale `s = exp(σ)`, no bias.

use crate::error::{Error, Result};
use crate::math::{self, argmax, norm, seeded_rng, xavier_uniform_with, Matrix, EPS_NORM};
use crate::params::{Gradients, ParamGroup, ParamSet};

/// Tolerance on `‖φ(x)‖ = 1` for inputs to the head.
pub const UNIT_TOL: f64 = 1e-9;

pub const DEFAULT_SCALE: f64 = 10.0;

const WEIGHT: usize = 0;
const LOG_SCALE: usize = 1;

/// Final classifier layer.
///
/// Templates are stored one per row of `head.weight` (the transpose of the
/// usual `D × |C|` layout) so that appending a class is a single contiguous
/// extension. Rows are kept raw; every forward pass normalizes them.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineHead {
    params: ParamSet,
    class_ids: Vec<u32>,
    /// Number of embeddings averaged into each template. Trained and random
    /// templates count as one.
    imprint_counts: Vec<u32>,
}

/// Head with normalized templates cached for a batch of forward passes.
#[derive(Debug, Clone)]
pub struct PreparedHead {
    unit: Matrix,
    norms: Vec<f64>,
    scale: f64,
}

impl CosineHead {
    pub fn from_templates(templates: Matrix, class_ids: Vec<u32>, scale: f64) -> Result<Self> {
        if templates.rows() == 0 || templates.rows() != class_ids.len() {
            return Err(Error::InvalidShape(format!(
                "{} templates for {} class ids",
                templates.rows(),
                class_ids.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale must be positive, got {scale}")));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &class_ids {
            if !seen.insert(c) {
                return Err(Error::DuplicateClass(c));
            }
        }
        for r in 0..templates.rows() {
            let n = norm(templates.row(r));
            if n <= EPS_NORM {
                return Err(Error::DegenerateNorm { norm: n });
            }
        }
        let counts = vec![1; class_ids.len()];
        let mut params = ParamSet::new();
        params.push("head.weight", ParamGroup::Fresh, templates)?;
        params.push("head.log_scale", ParamGroup::Fresh, Matrix::from_vec(1, 1, vec![scale.ln()])?)?;
        Ok(CosineHead {
            params,
            class_ids,
            imprint_counts: counts,
        })
    }

    /// Xavier-uniform templates for `class_ids`, scale [`DEFAULT_SCALE`].
    pub fn random(class_ids: Vec<u32>, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, &[0x4ead]);
        let w = xavier_uniform_with(class_ids.len(), dim, &mut rng)?;
        Self::from_templates(w, class_ids, DEFAULT_SCALE)
    }

    pub(crate) fn from_parts(params: ParamSet, class_ids: Vec<u32>, imprint_counts: Vec<u32>) -> Result<Self> {
        if params.len() != 2 {
            return Err(Error::InvalidShape("head needs weight and log_scale".into()));
        }
        let w = &params.get(WEIGHT).value;
        if w.rows() != class_ids.len() || imprint_counts.len() != class_ids.len() {
            return Err(Error::InvalidShape("head class table does not match weights".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(&dup) = class_ids.iter().find(|&&c| !seen.insert(c)) {
            return Err(Error::DuplicateClass(dup));
        }
        let ls = &params.get(LOG_SCALE).value;
        if ls.rows() != 1 || ls.cols() != 1 {
            return Err(Error::InvalidShape("log_scale must be a scalar".into()));
        }
        Ok(CosineHead {
            params,
            class_ids,
            imprint_counts,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn templates(&self) -> &Matrix {
        &self.params.get(WEIGHT).value
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn imprint_counts(&self) -> &[u32] {
        &self.imprint_counts
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.templates().cols()
    }

    pub fn scale(&self) -> f64 {
        self.log_scale().exp()
    }

    pub fn log_scale(&self) -> f64 {
        self.params.get(LOG_SCALE).value.as_slice()[0]
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale must be positive, got {scale}")));
        }
        self.params.get_mut(LOG_SCALE).value.as_mut_slice()[0] = scale.ln();
        Ok(())
    }

    pub fn column_index(&self, label: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == label)
    }

    /// Appends a template. Existing rows are not touched.
    pub(crate) fn append_class(&mut self, label: u32, template: &[f64], count: u32) -> Result<()> {
        if self.column_index(label).is_some() {
            return Err(Error::DuplicateClass(label));
        }
        let n = norm(template);
        if n <= EPS_NORM || !n.is_finite() {
            return Err(Error::DegenerateNorm { norm: n });
        }
        self.params.get_mut(WEIGHT).value.push_row(template)?;
        self.class_ids.push(label);
        self.imprint_counts.push(count);
        Ok(())
    }

    pub(crate) fn replace_class(&mut self, index: usize, template: &[f64], count: u32) {
        self.params.get_mut(WEIGHT).value.row_mut(index).copy_from_slice(template);
        self.imprint_counts[index] = count;
    }

    pub fn prepare(&self) -> Result<PreparedHead> {
        let w = self.templates();
        let mut unit = Matrix::zeros(w.rows(), w.cols());
        let mut norms = Vec::with_capacity(w.rows());
        for r in 0..w.rows() {
            let row = w.row(r);
            let n = norm(row);
            if n <= EPS_NORM || !n.is_finite() {
                return Err(Error::DegenerateNorm { norm: n });
            }
            for (u, v) in unit.row_mut(r).iter_mut().zip(row) {
                *u = v / n;
            }
            norms.push(n);
        }
        Ok(PreparedHead {
            unit,
            norms,
            scale: self.scale(),
        })
    }

    pub fn cosine_logits(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.prepare()?.logits(embedding)
    }

    pub fn predict(&self, embedding: &[f64]) -> Result<u32> {
        let idx = self.prepare()?.predict_index(embedding)?;
        Ok(self.class_ids[idx])
    }
}

fn check_unit(embedding: &[f64]) -> Result<()> {
    let n = norm(embedding);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::DegenerateNorm { norm: n });
    }
    Ok(())
}

impl PreparedHead {
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn unit_templates(&self) -> &Matrix {
        &self.unit
    }

    /// Raw cosines `ŵᵢᵀφ`.
    pub fn cosines(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.unit.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.unit.cols(),
                actual: embedding.len(),
            });
        }
        check_unit(embedding)?;
        Ok(self.unit.matvec(embedding))
    }

    pub fn logits(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let mut c = self.cosines(embedding)?;
        for v in &mut c {
            *v *= self.scale;
        }
        Ok(c)
    }

    pub fn predict_index(&self, embedding: &[f64]) -> Result<usize> {
        let c = self.cosines(embedding)?;
        Ok(argmax(&c).expect("head has at least one class"))
    }

    /// Accumulates head-parameter gradients for upstream `d_logits` and
    /// returns the gradient w.r.t. the embedding.
    pub fn backward(
        &self,
        embedding: &[f64],
        logits: &[f64],
        d_logits: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let s = self.scale;
        let d = self.unit.cols();
        let mut d_embedding = vec![0.0; d];
        let mut d_log_scale = 0.0;
        for (i, (&g, &l)) in d_logits.iter().zip(logits).enumerate() {
            if g == 0.0 {
                continue;
            }
            let unit = self.unit.row(i);
            math::axpy(s * g, unit, &mut d_embedding);
            // (I − ŵŵᵀ)(s g φ) / ‖w‖ with ŵᵀφ = l / s
            let coef = s * g / self.norms[i];
            let cos = l / s;
            for ((acc, &p), &u) in grads.values[WEIGHT][i * d..(i + 1) * d]
                .iter_mut()
                .zip(embedding)
                .zip(unit)
            {
                *acc += coef * (p - cos * u);
            }
            d_log_scale += g * l;
        }
        grads.values[LOG_SCALE][0] += d_log_scale;
        d_embedding
    }
}

/// Max-shifted softmax.
pub fn softmax_probs(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || !math::all_finite(logits) {
        return Err(Error::InvalidShape("softmax needs finite, nonempty logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
