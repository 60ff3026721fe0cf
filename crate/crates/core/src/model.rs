//! Embedder and cosine head composed into one classifier.

use crate::embedder::EmbeddingNet;
use crate::error::{Error, Result};
use crate::head::{CosineHead, PreparedHead};
use crate::losses::cross_entropy_logits;
use crate::params::{Gradients, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub embedder: EmbeddingNet,
    pub head: CosineHead,
}

/// Gradients for both halves of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub embedder: Gradients,
    pub head: Gradients,
}

impl ModelGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.embedder.to_flat();
        v.extend(self.head.to_flat());
        v
    }
}

impl Model {
    pub fn new(embedder: EmbeddingNet, head: CosineHead) -> Result<Self> {
        if embedder.embedding_dim() != head.dim() {
            return Err(Error::DimensionMismatch {
                expected: embedder.embedding_dim(),
                actual: head.dim(),
            });
        }
        Ok(Model { embedder, head })
    }

    pub fn num_scalars(&self) -> usize {
        self.embedder.params().num_scalars() + self.head.params().num_scalars()
    }

    pub fn param_sets(&self) -> [&ParamSet; 2] {
        [self.embedder.params(), self.head.params()]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.embedder.params().to_flat();
        v.extend(self.head.params().to_flat());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let split = self.embedder.params().num_scalars();
        if flat.len() != self.num_scalars() {
            return Err(Error::DimensionMismatch {
                expected: self.num_scalars(),
                actual: flat.len(),
            });
        }
        self.embedder.params_mut().set_flat(&flat[..split])?;
        self.head.params_mut().set_flat(&flat[split..])
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            embedder: self.embedder.params().zeros_like(),
            head: self.head.params().zeros_like(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.head.cosine_logits(&self.embedder.embed(x)?)
    }

    pub fn predict(&self, x: &[f64]) -> Result<u32> {
        self.head.predict(&self.embedder.embed(x)?)
    }

    /// Frozen view with the head's templates normalized once.
    pub fn predictor(&self) -> Result<Predictor<'_>> {
        Ok(Predictor {
            model: self,
            head: self.head.prepare()?,
        })
    }

    /// Mean cross-entropy over `(input, column index)` pairs and its gradient.
    ///
    /// Per-example gradients are summed in batch order.
    pub fn batch_loss_and_grads(&self, batch: &[(&[f64], usize)]) -> Result<(f64, ModelGrads)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let head = self.head.prepare()?;
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        for &(x, col) in batch {
            let trace = self.embedder.embed_traced(x)?;
            let logits = head.logits(&trace.embedding)?;
            let lv = cross_entropy_logits(&logits, col)?;
            total += lv.loss;
            let d_phi = head.backward(&trace.embedding, &logits, &lv.grad, &mut grads.head);
            self.embedder.accumulate_backward(&trace, &d_phi, &mut grads.embedder);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.embedder.scale(inv);
        grads.head.scale(inv);
        Ok((total * inv, grads))
    }

    pub fn batch_loss(&self, batch: &[(&[f64], usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let head = self.head.prepare()?;
        let mut total = 0.0;
        for &(x, col) in batch {
            let logits = head.logits(&self.embedder.embed(x)?)?;
            total += cross_entropy_logits(&logits, col)?.loss;
        }
        Ok(total / batch.len() as f64)
    }
}

pub struct Predictor<'a> {
    model: &'a Model,
    head: PreparedHead,
}

impl Predictor<'_> {
    pub fn predict(&self, x: &[f64]) -> Result<u32> {
        let e = self.model.embedder.embed(x)?;
        Ok(self.model.head.class_ids()[self.head.predict_index(&e)?])
    }

    pub fn predict_embedding(&self, embedding: &[f64]) -> Result<u32> {
        Ok(self.model.head.class_ids()[self.head.predict_index(embedding)?])
    }
}
