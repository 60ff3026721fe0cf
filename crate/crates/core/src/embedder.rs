//! Feed-forward embedding extractor ending in L2 normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, l2_normalize, l2_normalize_backward, norm, seeded_rng, xavier_uniform_with, Matrix};
use crate::params::{Gradients, ParamGroup, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

impl Nonlinearity {
    pub fn as_str(self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Nonlinearity::Relu),
            "tanh" => Some(Nonlinearity::Tanh),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl EmbedderConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embedding_dim: usize) -> Self {
        EmbedderConfig {
            input_dim,
            hidden_dims,
            embedding_dim,
            nonlinearity: Nonlinearity::Relu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "embedding dimension must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("all layer widths must be at least 1".into()));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` of every dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    config: EmbedderConfig,
    params: ParamSet,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    /// Input to each dense layer (the first is the raw input).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Vec<f64>>,
    raw_norm: f64,
    pub embedding: Vec<f64>,
}

impl EmbeddingNet {
    /// Xavier-initialized weights, zero biases, every parameter in the fresh group.
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed, &[0xe3b0]);
        let mut params = ParamSet::new();
        for (i, (out, inp)) in config.layer_shapes().into_iter().enumerate() {
            params.push(
                format!("layer{i}.weight"),
                ParamGroup::Fresh,
                xavier_uniform_with(out, inp, &mut rng)?,
            )?;
            params.push(format!("layer{i}.bias"), ParamGroup::Fresh, Matrix::zeros(1, out))?;
        }
        Ok(EmbeddingNet { config, params })
    }

    /// Builds a net from explicit `(weight, bias)` pairs, checking shapes against the config.
    pub fn from_layers(config: EmbedderConfig, layers: Vec<(Matrix, Vec<f64>)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(Error::InvalidShape(format!(
                "config describes {} layers, {} given",
                shapes.len(),
                layers.len()
            )));
        }
        let mut params = ParamSet::new();
        for (i, ((w, b), (out, inp))) in layers.into_iter().zip(shapes).enumerate() {
            if w.rows() != out || w.cols() != inp || b.len() != out {
                return Err(Error::InvalidShape(format!(
                    "layer {i} expects {out}x{inp} weight and {out} biases"
                )));
            }
            params.push(format!("layer{i}.weight"), ParamGroup::Fresh, w)?;
            params.push(format!("layer{i}.bias"), ParamGroup::Fresh, Matrix::from_vec(1, out, b)?)?;
        }
        Ok(EmbeddingNet { config, params })
    }

    pub(crate) fn from_parts(config: EmbedderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if params.len() != 2 * shapes.len() {
            return Err(Error::InvalidShape("parameter count does not match config".into()));
        }
        for (i, (out, inp)) in shapes.into_iter().enumerate() {
            let w = &params.get(2 * i).value;
            let b = &params.get(2 * i + 1).value;
            if w.rows() != out || w.cols() != inp || b.rows() != 1 || b.cols() != out {
                return Err(Error::InvalidShape(format!("layer {i} shape does not match config")));
            }
        }
        Ok(EmbeddingNet { config, params })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn num_layers(&self) -> usize {
        self.params.len() / 2
    }

    fn weight(&self, layer: usize) -> &Matrix {
        &self.params.get(2 * layer).value
    }

    fn bias(&self, layer: usize) -> &[f64] {
        self.params.get(2 * layer + 1).value.as_slice()
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed_traced(x)?.embedding)
    }

    pub fn embed_traced(&self, x: &[f64]) -> Result<EmbedTrace> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                actual: x.len(),
            });
        }
        if !math::all_finite(x) {
            return Err(Error::InvalidShape("input contains non-finite values".into()));
        }
        let last = self.num_layers() - 1;
        let mut layer_inputs = Vec::with_capacity(last + 1);
        let mut hidden_pre = Vec::with_capacity(last);
        let mut act = x.to_vec();
        for layer in 0..=last {
            let mut z = self.weight(layer).matvec(&act);
            for (zi, bi) in z.iter_mut().zip(self.bias(layer)) {
                *zi += bi;
            }
            layer_inputs.push(act);
            if layer == last {
                act = z;
            } else {
                act = z.iter().map(|&v| self.config.nonlinearity.apply(v)).collect();
                hidden_pre.push(z);
            }
        }
        let raw_norm = norm(&act);
        let embedding = l2_normalize(&act)?;
        Ok(EmbedTrace {
            layer_inputs,
            hidden_pre,
            raw_norm,
            embedding,
        })
    }

    /// Parameter gradients of a scalar whose gradient w.r.t. the embedding is `upstream`.
    pub fn backward(&self, trace: &EmbedTrace, upstream: &[f64]) -> Gradients {
        let mut grads = self.params.zeros_like();
        self.accumulate_backward(trace, upstream, &mut grads);
        grads
    }

    pub(crate) fn accumulate_backward(&self, trace: &EmbedTrace, upstream: &[f64], grads: &mut Gradients) {
        let mut delta = l2_normalize_backward(&trace.embedding, trace.raw_norm, upstream);
        for layer in (0..self.num_layers()).rev() {
            let input = &trace.layer_inputs[layer];
            let gw = &mut grads.values[2 * layer];
            let cols = input.len();
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    math::axpy(d, input, &mut gw[r * cols..(r + 1) * cols]);
                }
            }
            for (gb, d) in grads.values[2 * layer + 1].iter_mut().zip(&delta) {
                *gb += d;
            }
            if layer > 0 {
                let mut back = self.weight(layer).matvec_t(&delta);
                let pre = &trace.hidden_pre[layer - 1];
                for ((g, &z), &a) in back.iter_mut().zip(pre).zip(input) {
                    *g *= self.config.nonlinearity.derivative(z, a);
                }
                delta = back;
            }
        }
    }

    pub fn embed_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .enumerate()
            .map(|(row, x)| {
                self.embed(x).map_err(|e| Error::BatchRow {
                    row,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}
