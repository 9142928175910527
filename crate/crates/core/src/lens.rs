// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens: decode any hidden state through the final LayerNorm and the
//! unembedding, as if every later residual update were zero.
//!
//! All arithmetic is f64 on top of the f32 model parameters.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dape::entropy_nats;
use crate::error::{Error, Result};
use crate::refmodel::{ForwardTrace, LayerNorm, ModelParams, TokenType};
use crate::stats::sig10;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopToken {
    pub token: u32,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensDistribution {
    pub layer: usize,
    pub position: usize,
    pub probabilities: Vec<f64>,
    /// Descending by probability, ascending token id on ties.
    pub top: Vec<TopToken>,
    pub entropy: f64,
}

impl LensDistribution {
    fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let mut top: Vec<TopToken> = probabilities
            .iter()
            .enumerate()
            .map(|(j, &p)| TopToken { token: j as u32, probability: p })
            .collect();
        top.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.token.cmp(&b.token)));
        let max = (probabilities.len() as f64).ln();
        let entropy = entropy_nats(&probabilities).clamp(0.0, max);
        Self { layer: 0, position: 0, probabilities, top, entropy }
    }

    pub fn truncate_top(&mut self, k: usize) {
        self.top.truncate(k);
    }

    pub fn argmax(&self) -> u32 {
        self.top[0].token
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `softmax(LayerNorm(h) W_U)`; reads nothing but `h`, the norm and `W_U`.
pub fn logit_lens(h: &[f32], final_norm: &LayerNorm, unembedding: &Matrix) -> Result<LensDistribution> {
    let d = unembedding.rows();
    if h.len() != d || final_norm.gain.len() != d || final_norm.bias.len() != d {
        return Err(Error::shape(format!(
            "hidden width {} vs unembedding rows {d} / norm width {}",
            h.len(),
            final_norm.gain.len()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite hidden state".into()));
    }
    let n = d as f64;
    let mean = h.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = h.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + f64::from(final_norm.eps)).sqrt();
    let x: Vec<f64> = h
        .iter()
        .zip(final_norm.gain.iter().zip(&final_norm.bias))
        .map(|(&v, (&g, &b))| (f64::from(v) - mean) * inv * f64::from(g) + f64::from(b))
        .collect();
    let mut logits = vec![0.0f64; unembedding.cols()];
    for (i, xi) in x.iter().enumerate() {
        for (z, w) in logits.iter_mut().zip(unembedding.row(i)) {
            *z += xi * f64::from(*w);
        }
    }
    Ok(LensDistribution::from_probabilities(softmax(&logits)))
}

/// The model's own next-token distribution at `position`.
pub fn output_distribution(trace: &ForwardTrace, position: usize) -> Vec<f64> {
    let logits: Vec<f64> = trace.logits.row(position).iter().map(|&v| f64::from(v)).collect();
    softmax(&logits)
}

/// Lens distributions of layers `0..=L` at one position, each cut to the top `k`.
pub fn heatmap(params: &ModelParams, trace: &ForwardTrace, position: usize, k: usize) -> Result<Vec<LensDistribution>> {
    if position >= trace.len() {
        return Err(Error::arg(format!("position {position} out of range (sequence length {})", trace.len())));
    }
    if k == 0 {
        return Err(Error::arg("top-k must be at least 1"));
    }
    trace
        .hidden
        .iter()
        .enumerate()
        .map(|(layer, h)| {
            let mut dist = logit_lens(h.row(position), &params.final_norm, &params.unembedding)?;
            dist.layer = layer;
            dist.position = position;
            dist.truncate_top(k);
            Ok(dist)
        })
        .collect()
}

/// One heatmap cell as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub rank: usize,
    pub token_id: u32,
    pub token_text: String,
    pub probability: f64,
}

/// Rows for every `(layer, rank)`; probabilities are rounded to the 10
/// significant digits the file stores so rows survive a write/read cycle.
pub fn heatmap_rows(dists: &[LensDistribution], vocab: &[String]) -> Vec<HeatmapRow> {
    dists
        .iter()
        .flat_map(|d| {
            d.top.iter().enumerate().map(move |(rank, t)| HeatmapRow {
                layer: d.layer,
                rank,
                token_id: t.token,
                token_text: vocab.get(t.token as usize).cloned().unwrap_or_else(|| format!("<{}>", t.token)),
                probability: sig10(t.probability).parse().expect("formatted float parses"),
            })
        })
        .collect()
}

pub fn write_heatmap_csv<W: Write>(rows: &[HeatmapRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["layer", "rank", "token_id", "token_text", "probability"])?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.rank.to_string(),
            r.token_id.to_string(),
            r.token_text.clone(),
            sig10(r.probability),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_heatmap_csv<R: Read>(source: R) -> Result<Vec<HeatmapRow>> {
    let mut r = csv::Reader::from_reader(source);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["layer", "rank", "token_id", "token_text", "probability"] {
        return Err(Error::doc(format!("unexpected heatmap header {:?}", header)));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyPoint {
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<f64>,
}

/// Mean per-position lens entropy (nats) per layer, split by token type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyCurve {
    pub unit: String,
    pub image_positions: u64,
    pub text_positions: u64,
    pub layers: Vec<EntropyPoint>,
}

impl EntropyCurve {
    pub fn save(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Sums entropies over any number of forwards before averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyAccumulator {
    sums: Vec<[f64; 2]>,
    counts: [u64; 2],
}

impl EntropyAccumulator {
    pub fn new(n_layers: usize) -> Self {
        Self { sums: vec![[0.0; 2]; n_layers + 1], counts: [0; 2] }
    }

    pub fn add(&mut self, params: &ModelParams, trace: &ForwardTrace) -> Result<()> {
        if trace.hidden.len() != self.sums.len() {
            return Err(Error::shape(format!(
                "trace has {} hidden states, accumulator {}",
                trace.hidden.len(),
                self.sums.len()
            )));
        }
        for (l, h) in trace.hidden.iter().enumerate() {
            for (p, ty) in trace.token_types.iter().enumerate() {
                let e = logit_lens(h.row(p), &params.final_norm, &params.unembedding)?.entropy;
                self.sums[l][*ty as usize] += e;
            }
        }
        for ty in &trace.token_types {
            self.counts[*ty as usize] += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> EntropyCurve {
        let mean = |l: usize, ty: TokenType| {
            let n = self.counts[ty as usize];
            (n > 0).then(|| self.sums[l][ty as usize] / n as f64)
        };
        EntropyCurve {
            unit: "nats".into(),
            image_positions: self.counts[TokenType::Image as usize],
            text_positions: self.counts[TokenType::Text as usize],
            layers: (0..self.sums.len())
                .map(|l| EntropyPoint { layer: l, image: mean(l, TokenType::Image), text: mean(l, TokenType::Text) })
                .collect(),
        }
    }
}

/// Entropy curves of a single forward.
pub fn entropy_curves(params: &ModelParams, trace: &ForwardTrace) -> Result<EntropyCurve> {
    let mut acc = EntropyAccumulator::new(trace.n_layers());
    acc.add(params, trace)?;
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::{build_model, forward_unmasked, ModelConfig};

    #[test]
    fn hand_case() {
        let norm = LayerNorm { gain: vec![1.0; 2], bias: vec![0.0; 2], eps: 0.0 };
        let wu = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = logit_lens(&[1.0, -1.0], &norm, &wu).unwrap();
        // mpmath: 1 / (1 + e^-2) = 0.8807970779778824440597...
        assert!((d.probabilities[0] - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!((d.probabilities[1] - 0.119_202_922_022_117_6).abs() < 1e-15);
        assert_eq!(d.argmax(), 0);
    }

    #[test]
    fn zero_unembedding_is_uniform() {
        let norm = LayerNorm::identity(3);
        let wu = Matrix::zeros(3, 7);
        let d = logit_lens(&[0.3, 1.0, -2.0], &norm, &wu).unwrap();
        assert!(d.probabilities.iter().all(|p| (p - 1.0 / 7.0).abs() < 1e-15));
        assert!((d.entropy - 7f64.ln()).abs() < 1e-12);
        assert_eq!(d.top.iter().map(|t| t.token).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_input() {
        let norm = LayerNorm::identity(2);
        let wu = Matrix::zeros(2, 3);
        assert!(logit_lens(&[1.0], &norm, &wu).is_err());
        assert!(logit_lens(&[f32::NAN, 0.0], &norm, &wu).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.25).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn heatmap_shape_and_csv_round_trip() {
        let p = build_model(&ModelConfig::small(16, 8, 3, 12, 1)).unwrap();
        let t = forward_unmasked(&p, None, &[4, 5, 6]).unwrap();
        let rows = heatmap(&p, &t, 2, 5).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.top.len() == 5));
        assert_eq!(rows[3].argmax(), t.greedy_next(2));
        let full = heatmap(&p, &t, 0, 16).unwrap();
        assert!(full.iter().all(|r| (r.top.iter().map(|t| t.probability).sum::<f64>() - 1.0).abs() < 1e-9));
        assert!(heatmap(&p, &t, 3, 5).is_err());
        assert!(heatmap(&p, &t, 0, 0).is_err());

        let vocab: Vec<String> = (0..16).map(|i| format!("t,{i}")).collect();
        let cells = heatmap_rows(&rows, &vocab);
        let mut buf = Vec::new();
        write_heatmap_csv(&cells, &mut buf).unwrap();
        assert_eq!(read_heatmap_csv(buf.as_slice()).unwrap(), cells);
    }

    #[test]
    fn single_position_groups() {
        let mut c = ModelConfig::small(16, 8, 2, 12, 2);
        c.n_patches = 1;
        let p = build_model(&c).unwrap();
        let img = Matrix::from_vec(1, 8, vec![0.5; 8]).unwrap();
        let t = forward_unmasked(&p, Some(&img), &[9]).unwrap();
        let curve = entropy_curves(&p, &t).unwrap();
        for pt in &curve.layers {
            let e = |pos: usize| logit_lens(t.hidden[pt.layer].row(pos), &p.final_norm, &p.unembedding).unwrap().entropy;
            assert_eq!(pt.image, Some(e(0)));
            assert_eq!(pt.text, Some(e(1)));
        }
        let text_only = forward_unmasked(&p, None, &[9, 10]).unwrap();
        let curve = entropy_curves(&p, &text_only).unwrap();
        assert!(curve.layers.iter().all(|pt| pt.image.is_none() && pt.text.is_some()));
        assert_eq!(EntropyCurve::load(&curve.save().unwrap()).unwrap(), curve);
    }
}
