// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small deterministic decoder-only transformer.
//!
//! Pre-norm blocks with single-head causal attention, learned positions and
//! a non-gated FFN `act(x W_1) W_2`. A fixed random linear "pseudo encoder"
//! maps image patches into the embedding space; its outputs are prepended to
//! the text embeddings. Every forward records hidden states, FFN activations
//! and both residual branches so downstream analysis never re-runs the model.

mod forward;
mod io;
mod mask;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::trace_store::{ModuleSpec, TokenTypeSpec};

pub use forward::{
    emit_trace, forward, forward_unmasked, gelu, hidden_states, ForwardTrace, ModelInput,
    TokenType,
};
pub use mask::DeactivationMask;

/// Number of reserved token ids at the bottom of the vocabulary.
pub const RESERVED_TOKENS: u32 = 4;
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Name of the only FFN module the reference model has.
pub const LLM_MODULE: &str = "llm";

/// Half-width of the uniform initialisation range.
pub const INIT_RANGE: f32 = 0.08;

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: u32,
    pub d_model: usize,
    pub n_layers: usize,
    pub ffn_size: usize,
    pub activation: Activation,
    pub n_heads: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    /// Length of the learned position table.
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with one head, 8 patches of width 8 and a 64-entry position table.
    pub fn small(vocab_size: u32, d_model: usize, n_layers: usize, ffn_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model,
            n_layers,
            ffn_size,
            activation: Activation::Relu,
            n_heads: 1,
            n_patches: 8,
            patch_dim: 8,
            max_seq: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("ffn_size", self.ffn_size),
            ("n_heads", self.n_heads),
            ("patch_dim", self.patch_dim),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("{name} must be at least 1")));
        }
        if self.vocab_size < RESERVED_TOKENS {
            return Err(Error::arg(format!(
                "vocab_size {} leaves no room for the {RESERVED_TOKENS} reserved tokens",
                self.vocab_size
            )));
        }
        if self.n_heads != 1 {
            return Err(Error::arg("only single-head attention is supported"));
        }
        if self.n_layers > usize::from(u16::MAX) || self.ffn_size > u32::MAX as usize {
            return Err(Error::arg("layer count or FFN size exceeds trace limits"));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (v, d, s, q) = (self.vocab_size as usize, self.d_model, self.ffn_size, self.patch_dim);
        v * d + self.max_seq * d + self.n_layers * (4 * d + 4 * d * d + 2 * d * s) + 2 * d + d * v
            + q * q
            + q * d
    }

    /// FFN module description for corpus manifests.
    pub fn modules(&self) -> Vec<ModuleSpec> {
        vec![ModuleSpec {
            name: LLM_MODULE.into(),
            layer_count: self.n_layers as u16,
            neurons_per_layer: self.ffn_size as u32,
        }]
    }

    pub fn token_types() -> Vec<TokenTypeSpec> {
        vec![
            TokenTypeSpec { id: TokenType::Image as u8, name: "image".into() },
            TokenTypeSpec { id: TokenType::Text as u8, name: "text".into() },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self { gain: vec![1.0; d], bias: vec![0.0; d], eps: LN_EPS }
    }

    /// `(x - mean) / sqrt(var + eps)` without the affine part.
    pub fn standardize(x: &[f32], eps: f32) -> Vec<f32> {
        let n = x.len() as f32;
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        x.iter().map(|v| (v - mean) * inv).collect()
    }

    pub fn apply_row(&self, x: &[f32]) -> Vec<f32> {
        Self::standardize(x, self.eps)
            .into_iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(z, (g, b))| z * g + b)
            .collect()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.apply_row(x.row(r)));
        }
        out
    }
}

/// Fixed linear stand-in for a vision encoder plus projector.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoEncoder {
    /// `q x q` feature map.
    pub feature: Matrix,
    /// `q x d` projector into the embedding space.
    pub projector: Matrix,
}

impl PseudoEncoder {
    pub fn encode(&self, patches: &Matrix) -> Result<Matrix> {
        patches.matmul(&self.feature)?.matmul(&self.projector)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: LayerNorm,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn_norm: LayerNorm,
    /// `d x s`; column `j` is neuron `j`'s input weights.
    pub w1: Matrix,
    /// `s x d`; row `j` is neuron `j`'s output weights.
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub positions: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: LayerNorm,
    /// `d x V`.
    pub unembedding: Matrix,
    pub encoder: PseudoEncoder,
}

impl ModelParams {
    /// All-zero parameters of the right shapes, LayerNorm epsilon set.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, s, q) = (config.vocab_size as usize, config.d_model, config.ffn_size, config.patch_dim);
        let ln = || LayerNorm { gain: vec![0.0; d], bias: vec![0.0; d], eps: LN_EPS };
        let layer = || LayerParams {
            attn_norm: ln(),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ffn_norm: ln(),
            w1: Matrix::zeros(d, s),
            w2: Matrix::zeros(s, d),
        };
        Ok(Self {
            config: config.clone(),
            token_embedding: Matrix::zeros(v, d),
            positions: Matrix::zeros(config.max_seq, d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_norm: ln(),
            unembedding: Matrix::zeros(d, v),
            encoder: PseudoEncoder { feature: Matrix::zeros(q, q), projector: Matrix::zeros(q, d) },
        })
    }

    /// Every tensor in serialisation order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.token_embedding.as_slice(), self.positions.as_slice()];
        for l in &self.layers {
            out.extend([
                l.attn_norm.gain.as_slice(),
                &l.attn_norm.bias,
                l.w_q.as_slice(),
                l.w_k.as_slice(),
                l.w_v.as_slice(),
                l.w_o.as_slice(),
                &l.ffn_norm.gain,
                &l.ffn_norm.bias,
                l.w1.as_slice(),
                l.w2.as_slice(),
            ]);
        }
        out.extend([
            self.final_norm.gain.as_slice(),
            &self.final_norm.bias,
            self.unembedding.as_slice(),
            self.encoder.feature.as_slice(),
            self.encoder.projector.as_slice(),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> =
            vec![self.token_embedding.as_mut_slice(), self.positions.as_mut_slice()];
        for l in &mut self.layers {
            out.extend([
                l.attn_norm.gain.as_mut_slice(),
                &mut l.attn_norm.bias,
                l.w_q.as_mut_slice(),
                l.w_k.as_mut_slice(),
                l.w_v.as_mut_slice(),
                l.w_o.as_mut_slice(),
                &mut l.ffn_norm.gain,
                &mut l.ffn_norm.bias,
                l.w1.as_mut_slice(),
                l.w2.as_mut_slice(),
            ]);
        }
        out.extend([
            self.final_norm.gain.as_mut_slice(),
            &mut self.final_norm.bias,
            self.unembedding.as_mut_slice(),
            self.encoder.feature.as_mut_slice(),
            self.encoder.projector.as_mut_slice(),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Draw every parameter from a seeded uniform(-0.08, 0.08), tensor by tensor
/// in serialisation order, then set LayerNorm gains to 1.
pub fn build_model(config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = rng.random_range(-INIT_RANGE..INIT_RANGE);
        }
    }
    for l in &mut params.layers {
        l.attn_norm.gain.fill(1.0);
        l.ffn_norm.gain.fill(1.0);
    }
    params.final_norm.gain.fill(1.0);
    Ok(params)
}
