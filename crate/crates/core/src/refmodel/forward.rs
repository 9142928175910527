// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Activation, DeactivationMask, LayerNorm, LayerParams, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::trace_store::{HiddenStateDump, RawBitmaps, TracePayload, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TokenType {
    Image = 0,
    Text = 1,
}

impl TokenType {
    pub const ALL: [TokenType; 2] = [TokenType::Image, TokenType::Text];
}

/// Pseudo-image patches (optional) plus text token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub patches: Option<Matrix>,
    pub tokens: Vec<u32>,
}

impl ModelInput {
    pub fn text(tokens: Vec<u32>) -> Self {
        Self { patches: None, tokens }
    }

    pub fn run(&self, params: &ModelParams, mask: Option<&DeactivationMask>) -> Result<ForwardTrace> {
        run(params, self.patches.as_ref(), &self.tokens, mask)
    }
}

/// Everything one forward computed, kept for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `L + 1` states; `hidden[0]` is the embedded input, `hidden[L]` feeds the final norm.
    pub hidden: Vec<Matrix>,
    pub attn_residual: Vec<Matrix>,
    pub ffn_residual: Vec<Matrix>,
    /// Post-activation, post-mask FFN values (`tokens x s`) per layer.
    pub activations: Vec<Matrix>,
    pub token_types: Vec<TokenType>,
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.token_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_types.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn positions_of(&self, ty: TokenType) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.token_types[i] == ty).collect()
    }

    /// Input to layer `l`'s FFN LayerNorm: `h_l + attn_l`.
    pub fn ffn_input(&self, layer: usize) -> Matrix {
        self.hidden[layer]
            .add(&self.attn_residual[layer])
            .expect("residual shapes agree")
    }

    /// Argmax of the output logits at `position`, lowest id on ties.
    pub fn greedy_next(&self, position: usize) -> u32 {
        argmax(self.logits.row(position))
    }
}

pub(crate) fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn activate(kind: Activation, x: f32) -> f32 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Gelu => gelu(x),
    }
}

/// Forward with a deactivation mask.
pub fn forward(
    params: &ModelParams,
    patches: Option<&Matrix>,
    tokens: &[u32],
    mask: &DeactivationMask,
) -> Result<ForwardTrace> {
    run(params, patches, tokens, Some(mask))
}

/// Forward with no masking code path at all.
pub fn forward_unmasked(params: &ModelParams, patches: Option<&Matrix>, tokens: &[u32]) -> Result<ForwardTrace> {
    run(params, patches, tokens, None)
}

fn embed(params: &ModelParams, patches: Option<&Matrix>, tokens: &[u32]) -> Result<(Matrix, Vec<TokenType>)> {
    let c = &params.config;
    let d = c.d_model;
    let image = match patches {
        Some(p) => {
            if p.shape() != (c.n_patches, c.patch_dim) {
                return Err(Error::shape(format!(
                    "patches are {:?}, model expects {} x {}",
                    p.shape(),
                    c.n_patches,
                    c.patch_dim
                )));
            }
            Some(params.encoder.encode(p)?)
        }
        None => None,
    };
    let n_img = image.as_ref().map_or(0, Matrix::rows);
    let n = n_img + tokens.len();
    if n == 0 {
        return Err(Error::arg("empty input sequence"));
    }
    if n > c.max_seq {
        return Err(Error::arg(format!("sequence length {n} exceeds max_seq {}", c.max_seq)));
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::arg(format!("token id {t} out of range (V = {})", c.vocab_size)));
    }
    let mut h = Matrix::zeros(n, d);
    let mut types = Vec::with_capacity(n);
    for i in 0..n {
        let src = if i < n_img {
            types.push(TokenType::Image);
            image.as_ref().expect("image rows exist").row(i)
        } else {
            types.push(TokenType::Text);
            params.token_embedding.row(tokens[i - n_img] as usize)
        };
        let pos = params.positions.row(i);
        for (o, (a, b)) in h.row_mut(i).iter_mut().zip(src.iter().zip(pos)) {
            *o = a + b;
        }
    }
    Ok((h, types))
}

fn attention(layer: &LayerParams, h: &Matrix) -> Result<Matrix> {
    let x = layer.attn_norm.apply(h);
    let q = x.matmul(&layer.w_q)?;
    let k = x.matmul(&layer.w_k)?;
    let v = x.matmul(&layer.w_v)?;
    let (n, d) = h.shape();
    let scale = 1.0 / (d as f32).sqrt();
    let mut mixed = Matrix::zeros(n, d);
    let mut weights = vec![0.0f32; n];
    for i in 0..n {
        let qi = q.row(i);
        for (j, w) in weights[..=i].iter_mut().enumerate() {
            *w = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
        let max = weights[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0;
        for w in &mut weights[..=i] {
            *w = (*w - max).exp();
            total += *w;
        }
        let out = mixed.row_mut(i);
        for (j, w) in weights[..=i].iter().enumerate() {
            let a = w / total;
            for (o, vj) in out.iter_mut().zip(v.row(j)) {
                *o += a * vj;
            }
        }
    }
    mixed.matmul(&layer.w_o)
}

fn run(
    params: &ModelParams,
    patches: Option<&Matrix>,
    tokens: &[u32],
    mask: Option<&DeactivationMask>,
) -> Result<ForwardTrace> {
    let c = &params.config;
    if let Some(m) = mask {
        m.check(c)?;
    }
    let (mut h, token_types) = embed(params, patches, tokens)?;
    let mut hidden = vec![h.clone()];
    let mut attn_residual = Vec::with_capacity(c.n_layers);
    let mut ffn_residual = Vec::with_capacity(c.n_layers);
    let mut activations = Vec::with_capacity(c.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let attn = attention(layer, &h)?;
        let mid = h.add(&attn)?;
        let mut act = layer.ffn_norm.apply(&mid).matmul(&layer.w1)?;
        for v in act.as_mut_slice() {
            *v = activate(c.activation, *v);
        }
        if let Some(m) = mask {
            for r in 0..act.rows() {
                for j in m.masked_in_layer(0, l) {
                    act.row_mut(r)[j] = 0.0;
                }
            }
        }
        let ffn = act.matmul(&layer.w2)?;
        h = mid.add(&ffn)?;
        hidden.push(h.clone());
        attn_residual.push(attn);
        ffn_residual.push(ffn);
        activations.push(act);
    }
    let logits = params.final_norm.apply(&h).matmul(&params.unembedding)?;
    Ok(ForwardTrace {
        hidden,
        attn_residual,
        ffn_residual,
        activations,
        token_types,
        logits,
    })
}

/// One raw-bitmap record per (layer, token type present), bit set iff the
/// recorded activation is strictly positive.
pub fn emit_trace(trace: &ForwardTrace, domain_id: u16) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (l, act) in trace.activations.iter().enumerate() {
        for ty in TokenType::ALL {
            let positions = trace.positions_of(ty);
            if positions.is_empty() {
                continue;
            }
            let mut bitmaps = RawBitmaps::empty(act.cols() as u32);
            for p in positions {
                bitmaps.push_activations(act.row(p))?;
            }
            out.push(TraceRecord {
                domain_id,
                module_id: 0,
                layer: l as u16,
                token_type: ty as u8,
                payload: TracePayload::Raw(bitmaps),
            });
        }
    }
    Ok(out)
}

/// Dump of `h_layer` for every position; layer 0 is the embedded input.
pub fn hidden_states(trace: &ForwardTrace, layer: usize) -> Result<HiddenStateDump> {
    let h = trace.hidden.get(layer).ok_or_else(|| {
        Error::arg(format!("layer {layer} out of range (0..={})", trace.n_layers()))
    })?;
    HiddenStateDump::new(layer as u32, 0, h.cols() as u64, h.as_slice().to_vec())
}

impl LayerNorm {
    /// Standardise every row in f64 (used for feature extraction).
    pub fn standardize_f64(x: &[f32], eps: f32) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = x.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        x.iter().map(|&v| (f64::from(v) - mean) * inv).collect()
    }
}
