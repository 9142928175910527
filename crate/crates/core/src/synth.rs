// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded multi-domain corpora and models with planted domain neurons.
//!
//! The vocabulary is split into reserved ids, a shared range and one
//! exclusive range per domain. Each domain also has its own pseudo-image
//! distribution: patches cluster around a large, basis-aligned mean, so the
//! image positions of different domains are far apart in the residual
//! stream.
//!
//! Planting rewrites FFN input columns so that chosen neurons fire on their
//! target domain's image positions and stay silent on every position of
//! every other domain. The column is found by a margin perceptron on the
//! standardised FFN inputs and mapped back through the FFN LayerNorm; the
//! result is then checked with full forwards over the corpus, and a neuron
//! that misses its targets is a hard error.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refmodel::{
    LayerNorm, ModelConfig, ModelInput, ModelParams, TokenType, LLM_MODULE, RESERVED_TOKENS,
};
use crate::stats::NeuronId;
use crate::tensor::Matrix;
use crate::trace_store::{
    read_f32s, read_prefixed_header, write_f32s, write_prefixed_header, CorpusManifest, DomainSpec,
    MANIFEST_FORMAT_VERSION,
};

/// Shape of the per-domain pseudo-image distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    /// Norm scale of the domain means.
    pub scale: f64,
    /// Weight of a random component shared by every domain's mean.
    pub common: f64,
    /// Random offset of each mean, relative to `scale`.
    pub spread: f64,
    /// Per-patch noise, relative to `scale`.
    pub noise: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { scale: 30.0, common: 0.0, spread: 0.3, noise: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCorpusSpec {
    pub domains: u16,
    pub vocab_size: u32,
    pub shared_tokens: u32,
    /// Size of each domain's exclusive range.
    pub exclusive_tokens: u32,
    pub samples_per_domain: usize,
    pub tokens_per_sample: usize,
    /// Probability that a text position after the first draws from the exclusive range.
    pub exclusive_fraction: f64,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub patch: PatchSpec,
    pub seed: u64,
}

impl SynthCorpusSpec {
    /// Two thirds of the non-reserved vocabulary split evenly into exclusive
    /// ranges, the rest shared.
    pub fn for_model(config: &ModelConfig, domains: u16, samples_per_domain: usize, tokens_per_sample: usize, seed: u64) -> Self {
        let free = config.vocab_size.saturating_sub(RESERVED_TOKENS);
        let exclusive_tokens = if domains == 0 { 0 } else { free * 2 / 3 / u32::from(domains) };
        Self {
            domains,
            vocab_size: config.vocab_size,
            shared_tokens: free - exclusive_tokens * u32::from(domains),
            exclusive_tokens,
            samples_per_domain,
            tokens_per_sample,
            exclusive_fraction: 0.5,
            n_patches: config.n_patches,
            patch_dim: config.patch_dim,
            patch: PatchSpec::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains < 2 {
            return Err(Error::arg("need at least 2 domains"));
        }
        if self.exclusive_tokens == 0 {
            return Err(Error::arg("each domain needs at least one exclusive token"));
        }
        let end = u64::from(RESERVED_TOKENS)
            + u64::from(self.shared_tokens)
            + u64::from(self.exclusive_tokens) * u64::from(self.domains);
        if end > u64::from(self.vocab_size) {
            return Err(Error::arg(format!(
                "vocab ranges overlap: reserved + shared + exclusive need {end} ids, vocab has {}",
                self.vocab_size
            )));
        }
        if self.samples_per_domain == 0 || self.tokens_per_sample == 0 || self.n_patches == 0 {
            return Err(Error::arg("samples, tokens per sample and patches must be at least 1"));
        }
        if self.patch_dim < usize::from(self.domains) {
            return Err(Error::arg(format!(
                "patch_dim {} must be at least the domain count {}",
                self.patch_dim, self.domains
            )));
        }
        if !(0.0..=1.0).contains(&self.exclusive_fraction) || !(self.patch.scale > 0.0) {
            return Err(Error::arg("exclusive_fraction must lie in [0, 1] and patch scale be positive"));
        }
        Ok(())
    }

    pub fn shared_range(&self) -> Range<u32> {
        RESERVED_TOKENS..RESERVED_TOKENS + self.shared_tokens
    }

    pub fn exclusive_range(&self, domain: u16) -> Range<u32> {
        let start = RESERVED_TOKENS + self.shared_tokens + u32::from(domain) * self.exclusive_tokens;
        start..start + self.exclusive_tokens
    }

    pub fn domain_names(&self) -> Vec<String> {
        (0..self.domains).map(|d| format!("domain{d}")).collect()
    }

    /// Display text for every token id.
    pub fn vocab(&self) -> Vec<String> {
        (0..self.vocab_size)
            .map(|t| {
                if t < RESERVED_TOKENS {
                    ["<pad>", "<bos>", "<eos>", "<unk>"][t as usize].to_string()
                } else if self.shared_range().contains(&t) {
                    format!("s{}", t - RESERVED_TOKENS)
                } else if let Some(d) = (0..self.domains).find(|&d| self.exclusive_range(d).contains(&t)) {
                    format!("d{d}_{}", t - self.exclusive_range(d).start)
                } else {
                    format!("x{t}")
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub domain: u16,
    pub input: ModelInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthCorpusSpec,
    /// Grouped by domain, in generation order.
    pub samples: Vec<SynthSample>,
}

pub fn generate_corpus(spec: &SynthCorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (q, scale) = (spec.patch_dim, spec.patch.scale);
    let common: Vec<f64> = (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let means: Vec<Vec<f64>> = (0..spec.domains)
        .map(|d| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (0..q)
                .map(|i| {
                    let axis = if i == usize::from(d) { sign } else { 0.0 };
                    let jitter: f64 = rng.sample(StandardNormal);
                    scale * (spec.patch.common * common[i] + axis + spec.patch.spread * jitter)
                })
                .collect()
        })
        .collect();
    let shared = spec.shared_range();
    let mut samples = Vec::with_capacity(usize::from(spec.domains) * spec.samples_per_domain);
    for d in 0..spec.domains {
        let excl = spec.exclusive_range(d);
        for _ in 0..spec.samples_per_domain {
            let tokens = (0..spec.tokens_per_sample)
                .map(|i| {
                    if i == 0 || shared.is_empty() || rng.random_bool(spec.exclusive_fraction) {
                        rng.random_range(excl.clone())
                    } else {
                        rng.random_range(shared.clone())
                    }
                })
                .collect();
            let data = (0..spec.n_patches * q)
                .map(|i| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (means[usize::from(d)][i % q] + spec.patch.noise * scale * noise) as f32
                })
                .collect();
            let patches = Matrix::from_vec(spec.n_patches, q, data)?;
            samples.push(SynthSample { domain: d, input: ModelInput { patches: Some(patches), tokens } });
        }
    }
    Ok(SynthCorpus { spec: spec.clone(), samples })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleDoc {
    domain: u16,
    tokens: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusDoc {
    spec: SynthCorpusSpec,
    samples: Vec<SampleDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchHeader {
    domain: u16,
    samples: u64,
    rows: u64,
    cols: u64,
    dtype: String,
}

pub const SAMPLES_FILE: &str = "samples.toml";
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn patch_file_name(domain: u16) -> String {
    format!("patches-{domain}.bin")
}

impl SynthCorpus {
    pub fn domain_inputs(&self, domain: u16) -> Vec<ModelInput> {
        self.samples.iter().filter(|s| s.domain == domain).map(|s| s.input.clone()).collect()
    }

    pub fn inputs(&self) -> Vec<ModelInput> {
        self.samples.iter().map(|s| s.input.clone()).collect()
    }

    /// Sequence positions (image + text) per domain.
    pub fn token_totals(&self) -> Vec<usize> {
        let mut totals = vec![0; usize::from(self.spec.domains)];
        for s in &self.samples {
            totals[usize::from(s.domain)] += s.input.tokens.len() + s.input.patches.as_ref().map_or(0, Matrix::rows);
        }
        totals
    }

    /// Write `samples.toml`, one patch file per domain and `vocab.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let doc = CorpusDoc {
            spec: self.spec.clone(),
            samples: self.samples.iter().map(|s| SampleDoc { domain: s.domain, tokens: s.input.tokens.clone() }).collect(),
        };
        fs::write(dir.join(SAMPLES_FILE), toml::to_string(&doc)?)?;
        for d in 0..self.spec.domains {
            let mut out = BufWriter::new(fs::File::create(dir.join(patch_file_name(d)))?);
            self.write_patches(d, &mut out)?;
            out.flush()?;
        }
        fs::write(dir.join(VOCAB_FILE), self.spec.vocab().join("\n") + "\n")?;
        Ok(())
    }

    pub fn write_patches<W: Write>(&self, domain: u16, sink: &mut W) -> Result<()> {
        let patches: Vec<&Matrix> = self
            .samples
            .iter()
            .filter(|s| s.domain == domain)
            .map(|s| s.input.patches.as_ref().expect("synthetic samples carry patches"))
            .collect();
        let header = PatchHeader {
            domain,
            samples: patches.len() as u64,
            rows: self.spec.n_patches as u64,
            cols: self.spec.patch_dim as u64,
            dtype: "f32le".into(),
        };
        write_prefixed_header(sink, &toml::to_string(&header)?)?;
        for p in patches {
            write_f32s(sink, p.as_slice())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let doc: CorpusDoc = toml::from_str(&fs::read_to_string(dir.join(SAMPLES_FILE))?)?;
        doc.spec.validate().map_err(|e| Error::doc(e.to_string()))?;
        let spec = doc.spec;
        let mut patches: Vec<Vec<Matrix>> = Vec::new();
        for d in 0..spec.domains {
            let mut src = BufReader::new(fs::File::open(dir.join(patch_file_name(d)))?);
            patches.push(read_patches(&spec, d, &mut src)?);
        }
        let mut next = vec![0usize; usize::from(spec.domains)];
        let mut samples = Vec::with_capacity(doc.samples.len());
        for s in doc.samples {
            let d = usize::from(s.domain);
            if d >= patches.len() {
                return Err(Error::doc(format!("sample names unknown domain {}", s.domain)));
            }
            if let Some(t) = s.tokens.iter().find(|&&t| t >= spec.vocab_size) {
                return Err(Error::doc(format!("token {t} outside vocab")));
            }
            let p = patches[d].get(next[d]).cloned().ok_or_else(|| {
                Error::doc(format!("patch file for domain {d} has fewer samples than {SAMPLES_FILE}"))
            })?;
            next[d] += 1;
            samples.push(SynthSample { domain: s.domain, input: ModelInput { patches: Some(p), tokens: s.tokens } });
        }
        if let Some(d) = (0..patches.len()).find(|&d| next[d] != patches[d].len()) {
            return Err(Error::doc(format!("patch file for domain {d} has extra samples")));
        }
        Ok(Self { spec, samples })
    }

    /// Manifest describing a trace of this corpus through a model.
    pub fn manifest(&self, config: &ModelConfig, model_id: &str) -> CorpusManifest {
        CorpusManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            model_id: model_id.into(),
            modules: config.modules(),
            domains: self
                .spec
                .domain_names()
                .into_iter()
                .enumerate()
                .map(|(id, name)| DomainSpec { id: id as u16, name })
                .collect(),
            token_types: ModelConfig::token_types(),
        }
    }
}

fn read_patches<R: Read>(spec: &SynthCorpusSpec, domain: u16, src: &mut R) -> Result<Vec<Matrix>> {
    let (text, consumed) = read_prefixed_header(src)?;
    let h: PatchHeader = toml::from_str(&text)?;
    if h.domain != domain || h.rows != spec.n_patches as u64 || h.cols != spec.patch_dim as u64 || h.dtype != "f32le" {
        return Err(Error::doc(format!("patch file header does not match domain {domain} of the corpus spec")));
    }
    let per = spec.n_patches * spec.patch_dim;
    let mut out = Vec::with_capacity(h.samples as usize);
    for i in 0..h.samples {
        let values = read_f32s(src, per, consumed + i * 4 * per as u64)?;
        out.push(Matrix::from_vec(spec.n_patches, spec.patch_dim, values)?);
    }
    let mut extra = [0u8; 1];
    if src.read(&mut extra)? != 0 {
        return Err(Error::format(consumed + h.samples * 4 * per as u64, "trailing bytes in patch file"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantTarget {
    pub neuron: NeuronId,
    pub domain: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub targets: Vec<PlantTarget>,
    /// Fraction of the module population the targets were drawn for.
    pub fraction: f64,
    /// Largest absolute entry of a planted input column.
    pub w1_magnitude: f32,
    /// Multiplier on planted output rows ("loud" variant); `None` leaves them as is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2_scale: Option<f32>,
}

impl PlantSpec {
    /// `floor(fraction * L * s)` neurons; the i-th goes to layer `i mod L` and
    /// domain `i mod k`, at a seeded random index within its layer.
    pub fn spread(config: &ModelConfig, domains: u16, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::arg(format!("plant fraction {fraction} outside [0, 1]")));
        }
        if domains == 0 {
            return Err(Error::arg("need at least one domain"));
        }
        let (layers, s) = (config.n_layers, config.ffn_size);
        let count = (fraction * (layers * s) as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<Vec<usize>> = (0..layers)
            .map(|l| {
                let needed = (count + layers - 1 - l) / layers;
                index::sample(&mut rng, s, needed).into_vec()
            })
            .collect();
        let targets = (0..count)
            .map(|i| PlantTarget {
                neuron: NeuronId::new(0, (i % layers) as u16, picks[i % layers][i / layers] as u32),
                domain: (i % usize::from(domains)) as u16,
            })
            .collect();
        Ok(Self { targets, fraction, w1_magnitude: 1.0, w2_scale: None })
    }

    pub fn loud(mut self, w2_scale: f32) -> Self {
        self.w2_scale = Some(w2_scale);
        self
    }

    pub fn neurons(&self) -> Vec<NeuronId> {
        self.targets.iter().map(|t| t.neuron).collect()
    }

    fn check(&self, config: &ModelConfig, domains: u16) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.targets {
            let n = t.neuron;
            if n.module != 0 || usize::from(n.layer) >= config.n_layers || n.index as usize >= config.ffn_size {
                return Err(Error::arg(format!("planted neuron {n} outside the model")));
            }
            if t.domain >= domains {
                return Err(Error::arg(format!("planted neuron {n} targets unknown domain {}", t.domain)));
            }
            if !seen.insert(n) {
                return Err(Error::arg(format!("neuron {n} planted twice")));
            }
        }
        if !(self.w1_magnitude > 0.0) || self.w2_scale.is_some_and(|s| !s.is_finite()) {
            return Err(Error::arg("planting magnitudes must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedNeuron {
    pub module: String,
    pub layer: u16,
    pub index: u32,
    pub domain: u16,
    pub epochs: usize,
    /// Fraction of target-domain image positions where the neuron fires.
    pub target_image_rate: f64,
    /// Fraction of all target-domain positions where it fires.
    pub target_rate: f64,
    pub off_domain_rate: f64,
}

impl PlantedNeuron {
    pub fn neuron(&self) -> NeuronId {
        NeuronId::new(0, self.layer, self.index)
    }
}

/// Empirical verification of every planted neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantReport {
    pub fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2_scale: Option<f32>,
    pub neurons: Vec<PlantedNeuron>,
    /// Unplanted neurons that fire on exactly one domain of the corpus. They
    /// score DAPE 0 like the planted ones, so exact recovery of the planted
    /// set is only well-posed when this is empty.
    #[serde(default)]
    pub rivals: Vec<NeuronId>,
}

impl PlantReport {
    pub fn save(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn neurons_of(&self, domain: u16) -> Vec<NeuronId> {
        self.neurons.iter().filter(|n| n.domain == domain).map(PlantedNeuron::neuron).collect()
    }
}

/// Minimum fraction of target image positions a planted neuron must fire on.
pub const MIN_TARGET_RATE: f64 = 0.9;
const MAX_EPOCHS: usize = 2000;
const MARGIN: f64 = 1.0;
/// Margin escalations before a column is declared unbuildable.
const MAX_ROUNDS: usize = 12;

/// FFN LayerNorm inputs of one layer over the whole corpus.
struct LayerFeatures {
    /// Raw `h_l + attn_l` rows, as the model sees them.
    raw: Vec<Vec<f32>>,
    /// The same rows standardised in f64.
    standard: Vec<Vec<f64>>,
    /// `(domain, is image)` per row.
    labels: Vec<(u16, bool)>,
}

/// FFN inputs and labels of one sample.
type SampleFeatures = (Vec<Vec<f32>>, Vec<(u16, bool)>);

fn layer_features(params: &ModelParams, corpus: &SynthCorpus, layer: usize) -> Result<LayerFeatures> {
    let eps = params.layers[layer].ffn_norm.eps;
    let per_sample: Vec<SampleFeatures> = corpus
        .samples
        .par_iter()
        .map(|s| {
            let t = s.input.run(params, None)?;
            let x = t.ffn_input(layer);
            let rows = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
            let labels = t.token_types.iter().map(|ty| (s.domain, *ty == TokenType::Image)).collect();
            Ok((rows, labels))
        })
        .collect::<Result<_>>()?;
    let mut f = LayerFeatures { raw: Vec::new(), standard: Vec::new(), labels: Vec::new() };
    for (rows, labels) in per_sample {
        f.standard.extend(rows.iter().map(|r| LayerNorm::standardize_f64(r, eps)));
        f.raw.extend(rows);
        f.labels.extend(labels);
    }
    Ok(f)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `+1` for target image positions, `-1` for other domains, `None` for target text.
fn plant_label((domain, image): (u16, bool), target: u16) -> Option<f64> {
    match (domain == target, image) {
        (true, true) => Some(1.0),
        (true, false) => None,
        (false, _) => Some(-1.0),
    }
}

/// Margin perceptron with bias, continued from `(u, b)`. Returns epochs used
/// and whether a full pass made no mistake.
fn perceptron(points: &[(&[f64], f64)], u: &mut [f64], b: &mut f64, margin: f64) -> (usize, bool) {
    let radius = (u.len() as f64).sqrt();
    for epoch in 1..=MAX_EPOCHS {
        let mut errors = 0;
        for (x, y) in points {
            if y * (dot(x, u) + *b) < margin {
                for (ui, xi) in u.iter_mut().zip(*x) {
                    *ui += y * xi;
                }
                *b += y * radius;
                errors += 1;
            }
        }
        if errors == 0 {
            return (epoch, true);
        }
    }
    (MAX_EPOCHS, false)
}

/// Input column `w` with `LN(h) . w = u . x_hat + b` for standardised `x_hat`,
/// using that standardised vectors sum to zero, scaled so `max |w| = magnitude`.
fn column_through_norm(u: &[f64], b: f64, norm: &LayerNorm, magnitude: f32) -> Option<Vec<f32>> {
    let g: Vec<f64> = norm.gain.iter().map(|&v| f64::from(v)).collect();
    let beta: Vec<f64> = norm.bias.iter().map(|&v| f64::from(v)).collect();
    if g.contains(&0.0) {
        return None;
    }
    let ratio: f64 = beta.iter().zip(&g).map(|(b, g)| b / g).sum();
    if ratio.abs() < 1e-12 {
        return None;
    }
    let c = (b - u.iter().zip(&beta).zip(&g).map(|((u, b), g)| u * b / g).sum::<f64>()) / ratio;
    let w: Vec<f64> = u.iter().zip(&g).map(|(u, g)| (u + c) / g).collect();
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(max > 0.0 && max.is_finite()) {
        return None;
    }
    let scale = f64::from(magnitude) / max;
    Some(w.iter().map(|v| (v * scale) as f32).collect())
}

/// f32 pre-activation exactly as the forward computes it.
fn pre_activation(raw: &[f32], norm: &LayerNorm, column: &[f32]) -> f32 {
    let mut z = 0.0f32;
    for (x, w) in norm.apply_row(raw).iter().zip(column) {
        if *x != 0.0 {
            z += x * w;
        }
    }
    z
}

/// Build one planted column: perceptron in standardised space, mapped through
/// the LayerNorm, accepted once the f32 pre-activations classify every
/// labelled row. The margin grows until they do.
fn plant_column(f: &LayerFeatures, target: u16, norm: &LayerNorm, magnitude: f32, neuron: NeuronId) -> Result<(Vec<f32>, usize)> {
    let points: Vec<(&[f64], f64)> = f
        .standard
        .iter()
        .zip(&f.labels)
        .filter_map(|(x, l)| plant_label(*l, target).map(|y| (x.as_slice(), y)))
        .collect();
    let positives: Vec<&[f64]> = points.iter().filter(|p| p.1 > 0.0).map(|p| p.0).collect();
    if positives.is_empty() {
        return Err(Error::Plant { neuron, reason: "target domain has no image positions".into() });
    }
    let mut u = vec![0.0; positives[0].len()];
    for x in &positives {
        for (ui, xi) in u.iter_mut().zip(*x) {
            *ui += xi / positives.len() as f64;
        }
    }
    let mut b = 0.0;
    let mut margin = MARGIN;
    let mut total_epochs = 0;
    for _ in 0..MAX_ROUNDS {
        let (epochs, converged) = perceptron(&points, &mut u, &mut b, margin);
        total_epochs += epochs;
        let column = column_through_norm(&u, b, norm, magnitude).ok_or_else(|| Error::Plant {
            neuron,
            reason: "FFN LayerNorm gain/bias leave no usable threshold direction".into(),
        })?;
        let clean = f.raw.iter().zip(&f.labels).all(|(raw, l)| match plant_label(*l, target) {
            Some(y) => (pre_activation(raw, norm, &column) > 0.0) == (y > 0.0),
            None => true,
        });
        log::debug!("plant {neuron}: margin {margin}, {epochs} epochs, converged {converged}, clean {clean}");
        if clean {
            return Ok((column, total_epochs));
        }
        if converged {
            margin *= 4.0;
        }
    }
    Err(Error::Plant {
        neuron,
        reason: format!("no input column separates the target domain's image positions ({total_epochs} epochs)"),
    })
}

/// Rewrite the input columns (and, for the loud variant, output rows) of the
/// planted neurons, layer by layer, then verify every neuron over the corpus.
pub fn plant_neurons(params: &ModelParams, spec: &PlantSpec, corpus: &SynthCorpus) -> Result<(ModelParams, PlantReport)> {
    spec.check(&params.config, corpus.spec.domains)?;
    let mut out = params.clone();
    let mut epochs = std::collections::BTreeMap::new();
    for layer in 0..params.config.n_layers {
        let here: Vec<&PlantTarget> = spec.targets.iter().filter(|t| usize::from(t.neuron.layer) == layer).collect();
        if here.is_empty() {
            continue;
        }
        let features = layer_features(&out, corpus, layer)?;
        for t in here {
            let (column, n_epochs) =
                plant_column(&features, t.domain, &out.layers[layer].ffn_norm, spec.w1_magnitude, t.neuron)?;
            let j = t.neuron.index as usize;
            let ly = &mut out.layers[layer];
            for (i, w) in column.into_iter().enumerate() {
                ly.w1.set(i, j, w);
            }
            if let Some(scale) = spec.w2_scale {
                for v in ly.w2.row_mut(j) {
                    *v *= scale;
                }
            }
            epochs.insert(t.neuron, n_epochs);
        }
    }
    let report = verify_planting(&out, spec, corpus, &epochs)?;
    Ok((out, report))
}

fn verify_planting(
    params: &ModelParams,
    spec: &PlantSpec,
    corpus: &SynthCorpus,
    epochs: &std::collections::BTreeMap<NeuronId, usize>,
) -> Result<PlantReport> {
    let cfg = &params.config;
    // Per target: [target image fired, target image total, target fired, target total, off fired, off total].
    let per_sample: Vec<(Vec<[u64; 6]>, Vec<bool>)> = corpus
        .samples
        .par_iter()
        .map(|s| {
            let t = s.input.run(params, None)?;
            let fired: Vec<bool> = t
                .activations
                .iter()
                .flat_map(|act| (0..cfg.ffn_size).map(move |j| (0..act.rows()).any(|r| act.get(r, j) > 0.0)))
                .collect();
            let counts = spec
                .targets
                .iter()
                .map(|p| {
                    let act = &t.activations[usize::from(p.neuron.layer)];
                    let mut c = [0u64; 6];
                    for (pos, ty) in t.token_types.iter().enumerate() {
                        let fired = u64::from(act.get(pos, p.neuron.index as usize) > 0.0);
                        if s.domain == p.domain {
                            if *ty == TokenType::Image {
                                c[0] += fired;
                                c[1] += 1;
                            }
                            c[2] += fired;
                            c[3] += 1;
                        } else {
                            c[4] += fired;
                            c[5] += 1;
                        }
                    }
                    c
                })
                .collect();
            Ok((counts, fired))
        })
        .collect::<Result<_>>()?;
    let k = usize::from(corpus.spec.domains);
    let mut domains_fired = vec![vec![false; k]; cfg.n_layers * cfg.ffn_size];
    for ((_, fired), sample) in per_sample.iter().zip(&corpus.samples) {
        for (flat, f) in fired.iter().enumerate() {
            domains_fired[flat][usize::from(sample.domain)] |= *f;
        }
    }
    let planted: std::collections::BTreeSet<NeuronId> = spec.neurons().into_iter().collect();
    let rivals: Vec<NeuronId> = domains_fired
        .iter()
        .enumerate()
        .filter(|(_, d)| d.iter().filter(|f| **f).count() == 1)
        .map(|(flat, _)| NeuronId::new(0, (flat / cfg.ffn_size) as u16, (flat % cfg.ffn_size) as u32))
        .filter(|n| !planted.contains(n))
        .collect();
    let mut neurons = Vec::with_capacity(spec.targets.len());
    for (i, p) in spec.targets.iter().enumerate() {
        let mut c = [0u64; 6];
        for (s, _) in &per_sample {
            for (acc, v) in c.iter_mut().zip(s[i]) {
                *acc += v;
            }
        }
        let rate = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let image_rate = rate(c[0], c[1]);
        if c[1] == 0 || image_rate < MIN_TARGET_RATE {
            return Err(Error::Plant {
                neuron: p.neuron,
                reason: format!("fires on {:.3} of target-domain image positions, need {MIN_TARGET_RATE}", image_rate),
            });
        }
        if c[4] != 0 {
            return Err(Error::Plant {
                neuron: p.neuron,
                reason: format!("fires on {} of {} positions of other domains", c[4], c[5]),
            });
        }
        neurons.push(PlantedNeuron {
            module: LLM_MODULE.into(),
            layer: p.neuron.layer,
            index: p.neuron.index,
            domain: p.domain,
            epochs: epochs.get(&p.neuron).copied().unwrap_or(0),
            target_image_rate: image_rate,
            target_rate: rate(c[2], c[3]),
            off_domain_rate: 0.0,
        });
    }
    Ok(PlantReport { fraction: spec.fraction, w2_scale: spec.w2_scale, neurons, rivals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::build_model;

    fn small() -> (ModelConfig, SynthCorpusSpec) {
        let config = ModelConfig::small(64, 32, 2, 64, 3);
        let spec = SynthCorpusSpec::for_model(&config, 5, 12, 8, 1);
        (config, spec)
    }

    #[test]
    fn partition_and_totals() {
        let (_, mut spec) = small();
        spec.samples_per_domain = 100;
        spec.tokens_per_sample = 32;
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(spec.shared_range(), 4..24);
        assert_eq!(spec.exclusive_range(4), 56..64);
        for d in 0..5u16 {
            let text: usize = c.samples.iter().filter(|s| s.domain == d).map(|s| s.input.tokens.len()).sum();
            assert_eq!(text, 3200);
        }
        let totals = c.token_totals();
        assert!(totals.iter().all(|&t| t == totals[0]));
        for s in &c.samples {
            assert!(s.input.tokens.iter().any(|t| spec.exclusive_range(s.domain).contains(t)));
            for other in (0..5).filter(|&o| o != s.domain) {
                assert!(!s.input.tokens.iter().any(|t| spec.exclusive_range(other).contains(t)));
            }
        }
        assert_eq!(generate_corpus(&spec).unwrap(), c);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let (_, mut spec) = small();
        spec.exclusive_tokens = 20;
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn corpus_round_trip_on_disk() {
        let (_, spec) = small();
        let c = generate_corpus(&spec).unwrap();
        let dir = std::env::temp_dir().join(format!("dneuron-corpus-{}", std::process::id()));
        c.save(&dir).unwrap();
        assert_eq!(SynthCorpus::load(&dir).unwrap(), c);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn spread_assigns_round_robin() {
        let config = ModelConfig::small(64, 32, 4, 256, 0);
        let spec = PlantSpec::spread(&config, 5, 0.02, 9).unwrap();
        assert_eq!(spec.targets.len(), 20);
        let mut pairs: Vec<(u16, u16)> = spec.targets.iter().map(|t| (t.neuron.layer, t.domain)).collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 20);
        assert!(spec.check(&config, 5).is_ok());
    }

    #[test]
    fn plant_nothing_is_identity() {
        let (config, spec) = small();
        let p = build_model(&config).unwrap();
        let c = generate_corpus(&spec).unwrap();
        let empty = PlantSpec { targets: vec![], fraction: 0.0, w1_magnitude: 1.0, w2_scale: None };
        let (q, report) = plant_neurons(&p, &empty, &c).unwrap();
        assert_eq!(q, p);
        assert!(report.neurons.is_empty());
    }

    #[test]
    fn planted_neurons_are_domain_detectors() {
        let (config, spec) = small();
        let p = build_model(&config).unwrap();
        let c = generate_corpus(&spec).unwrap();
        let plant = PlantSpec::spread(&config, 5, 0.04, 2).unwrap();
        let (q, report) = plant_neurons(&p, &plant, &c).unwrap();
        assert_eq!(report.neurons.len(), 5);
        for n in &report.neurons {
            assert!(n.target_image_rate >= MIN_TARGET_RATE);
            assert_eq!(n.off_domain_rate, 0.0);
        }
        // Only the planted input columns changed.
        for (l, (a, b)) in p.layers.iter().zip(&q.layers).enumerate() {
            assert_eq!(a.w2, b.w2);
            assert_eq!(a.w_q, b.w_q);
            for j in 0..config.ffn_size {
                let planted = plant.targets.iter().any(|t| t.neuron == NeuronId::new(0, l as u16, j as u32));
                assert_eq!(a.w1.column(j) == b.w1.column(j), !planted, "layer {l} column {j}");
            }
        }
        assert_eq!(p.token_embedding, q.token_embedding);
        assert_eq!(p.unembedding, q.unembedding);
    }
}
