// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal footprint of deactivating neuron sets.
//!
//! The deviation of a mask is the relative Frobenius change it causes in the
//! final-layer hidden states (before the output norm, all positions, all
//! samples stacked). It is compared against random masks of identical
//! per-module cardinality. Task metrics are top-1 accuracy and ANLS.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refmodel::{DeactivationMask, ForwardTrace, ModelInput, ModelParams};
use crate::stats::NeuronId;
use crate::tensor::Matrix;

/// `||H_n - H_d||_F / ||H_n||_F`.
pub fn deviation(intact: &Matrix, deactivated: &Matrix) -> Result<f64> {
    if intact.shape() != deactivated.shape() {
        return Err(Error::shape(format!(
            "{:?} vs {:?}",
            intact.shape(),
            deactivated.shape()
        )));
    }
    let (mut diff, mut base) = (0.0f64, 0.0f64);
    for (a, b) in intact.as_slice().iter().zip(deactivated.as_slice()) {
        let (a, b) = (f64::from(*a), f64::from(*b));
        diff += (a - b) * (a - b);
        base += a * a;
    }
    if base == 0.0 {
        return Err(Error::Domain("intact hidden states have zero norm".into()));
    }
    Ok((diff / base).sqrt())
}

/// Run every input and return the traces in input order.
pub fn run_all(params: &ModelParams, inputs: &[ModelInput], mask: Option<&DeactivationMask>) -> Result<Vec<ForwardTrace>> {
    inputs.par_iter().map(|i| i.run(params, mask)).collect()
}

/// Final-layer hidden states of every input stacked row-wise.
pub fn final_states(params: &ModelParams, inputs: &[ModelInput], mask: Option<&DeactivationMask>) -> Result<Matrix> {
    let states: Vec<Matrix> = inputs
        .par_iter()
        .map(|i| i.run(params, mask).map(|t| t.hidden.last().expect("at least the input state").clone()))
        .collect::<Result<_>>()?;
    Matrix::vstack(&states.iter().collect::<Vec<_>>())
}

/// Random mask with the same number of neurons as `target` in every module,
/// drawn without replacement. Trial `t` uses stream `t` of the seeded generator.
pub fn random_mask_like(params: &ModelParams, target: &DeactivationMask, seed: u64, trial: u64) -> Result<DeactivationMask> {
    let c = &params.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let population = c.n_layers * c.ffn_size;
    let picks = index::sample(&mut rng, population, target.count());
    let mask = DeactivationMask::from_neurons(
        c,
        picks
            .into_iter()
            .map(|f| NeuronId::new(0, (f / c.ffn_size) as u16, (f % c.ffn_size) as u32)),
    )?;
    assert_eq!(mask.count(), target.count(), "random mask cardinality drifted");
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBaseline {
    pub trials: usize,
    pub seed: u64,
    pub deviations: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); absent for a single trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl RandomBaseline {
    fn from_trials(seed: u64, deviations: Vec<f64>) -> Self {
        let n = deviations.len() as f64;
        let mean = deviations.iter().sum::<f64>() / n;
        let std = (deviations.len() > 1)
            .then(|| (deviations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { trials: deviations.len(), seed, deviations, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationOutcome {
    pub target: f64,
    pub baseline: RandomBaseline,
    pub masked_neurons: usize,
    pub positions: usize,
}

/// Target deviation of `mask` plus `trials` equal-cardinality random masks.
pub fn deviation_experiment(
    params: &ModelParams,
    inputs: &[ModelInput],
    mask: &DeactivationMask,
    trials: usize,
    seed: u64,
) -> Result<DeviationOutcome> {
    if inputs.is_empty() {
        return Err(Error::arg("deviation needs at least one input"));
    }
    if trials == 0 {
        return Err(Error::arg("at least one random trial is required"));
    }
    let intact = final_states(params, inputs, None)?;
    let target = deviation(&intact, &final_states(params, inputs, Some(mask))?)?;
    let deviations = (0..trials as u64)
        .map(|t| {
            let random = random_mask_like(params, mask, seed, t)?;
            deviation(&intact, &final_states(params, inputs, Some(&random))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeviationOutcome {
        target,
        baseline: RandomBaseline::from_trials(seed, deviations),
        masked_neurons: mask.count(),
        positions: intact.rows(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Top1Accuracy,
    Anls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalResult {
    pub metric: Metric,
    pub value: f64,
    pub samples: usize,
    pub normalization: String,
}

pub fn top1_accuracy<T: PartialEq>(predictions: &[T], gold: &[T]) -> Result<EvalResult> {
    if predictions.len() != gold.len() {
        return Err(Error::shape(format!("{} predictions vs {} gold labels", predictions.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::arg("no samples to score"));
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(EvalResult {
        metric: Metric::Top1Accuracy,
        value: hits as f64 / gold.len() as f64,
        samples: gold.len(),
        normalization: "exact".into(),
    })
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// `1 - lev(a, b) / max(|a|, |b|)` on case-folded, trimmed strings.
pub fn similarity(pred: &str, gold: &str) -> f64 {
    let (p, g) = (normalize_answer(pred), normalize_answer(gold));
    let longest = p.chars().count().max(g.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&p, &g) as f64 / longest as f64
}

/// Per-sample best similarity over the gold set, floored to 0 below 0.5, averaged.
pub fn anls<S: AsRef<str>>(predictions: &[S], golds: &[Vec<S>]) -> Result<EvalResult> {
    if predictions.len() != golds.len() {
        return Err(Error::shape(format!("{} predictions vs {} gold sets", predictions.len(), golds.len())));
    }
    if golds.is_empty() {
        return Err(Error::arg("no samples to score"));
    }
    let mut total = 0.0;
    for (i, (p, gs)) in predictions.iter().zip(golds).enumerate() {
        if gs.is_empty() {
            return Err(Error::arg(format!("sample {i} has an empty gold set")));
        }
        let best = gs.iter().map(|g| similarity(p.as_ref(), g.as_ref())).fold(0.0, f64::max);
        total += if best < 0.5 { 0.0 } else { best };
    }
    Ok(EvalResult {
        metric: Metric::Anls,
        value: total / golds.len() as f64,
        samples: golds.len(),
        normalization: "casefold+strip".into(),
    })
}

/// Greedy continuation of `steps` tokens.
pub fn greedy_continuation(
    params: &ModelParams,
    input: &ModelInput,
    mask: Option<&DeactivationMask>,
    steps: usize,
) -> Result<Vec<u32>> {
    let mut cur = input.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = cur.run(params, mask)?;
        let next = t.greedy_next(t.len() - 1);
        out.push(next);
        cur.tokens.push(next);
    }
    Ok(out)
}

/// Agreement of a deactivated model with the intact one: top-1 of the
/// next-token prediction at every text position, and ANLS of greedy
/// continuations rendered through `vocab`.
pub fn agreement_metrics(
    params: &ModelParams,
    inputs: &[ModelInput],
    mask: &DeactivationMask,
    vocab: &[String],
    steps: usize,
) -> Result<(EvalResult, EvalResult)> {
    let render = |toks: &[u32]| {
        toks.iter()
            .map(|&t| vocab.get(t as usize).cloned().unwrap_or_else(|| format!("<{t}>")))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let per_input: Vec<(Vec<u32>, Vec<u32>, String, String)> = inputs
        .par_iter()
        .map(|inp| {
            let a = inp.run(params, None)?;
            let b = inp.run(params, Some(mask))?;
            let text = a.positions_of(crate::refmodel::TokenType::Text);
            let gold: Vec<u32> = text.iter().map(|&p| a.greedy_next(p)).collect();
            let pred: Vec<u32> = text.iter().map(|&p| b.greedy_next(p)).collect();
            let g = render(&greedy_continuation(params, inp, None, steps)?);
            let p = render(&greedy_continuation(params, inp, Some(mask), steps)?);
            Ok((pred, gold, p, g))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<u32> = per_input.iter().flat_map(|r| r.0.iter().copied()).collect();
    let golds: Vec<u32> = per_input.iter().flat_map(|r| r.1.iter().copied()).collect();
    let top1 = top1_accuracy(&preds, &golds)?;
    let texts: Vec<&str> = per_input.iter().map(|r| r.2.as_str()).collect();
    let gold_sets: Vec<Vec<&str>> = per_input.iter().map(|r| vec![r.3.as_str()]).collect();
    Ok((top1, anls(&texts, &gold_sets)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleNeuronCount {
    pub module: String,
    pub neurons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDeviation {
    pub domain: u16,
    pub name: String,
    pub samples: usize,
    pub positions: usize,
    /// Per-module neuron counts, shared by the target and every random mask.
    pub mask_neurons: Vec<ModuleNeuronCount>,
    pub target: f64,
    pub random: RandomBaseline,
    #[serde(default)]
    pub metrics: Vec<EvalResult>,
}

/// Deviation results for every domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationReport {
    pub seed: u64,
    pub trials: usize,
    /// Which states the deviation is computed on.
    pub hidden_states: String,
    pub positions: String,
    pub domains: Vec<DomainDeviation>,
}

impl DeviationReport {
    pub fn new(seed: u64, trials: usize, domains: Vec<DomainDeviation>) -> Self {
        Self {
            seed,
            trials,
            hidden_states: "final layer, before output norm".into(),
            positions: "all".into(),
            domains,
        }
    }

    pub fn save(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::{build_model, ModelConfig};

    #[test]
    fn deviation_hand_cases() {
        let hn = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let hd = Matrix::from_rows(&[vec![3.0, 0.0]]).unwrap();
        assert!((deviation(&hn, &hd).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(deviation(&hn, &hn).unwrap(), 0.0);
        assert_eq!(deviation(&hn, &Matrix::zeros(1, 2)).unwrap(), 1.0);
        assert!(deviation(&Matrix::zeros(1, 2), &hn).is_err());
        assert!(deviation(&hn, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn levenshtein_matches_dp_oracle() {
        // Full-matrix Wagner-Fischer as the oracle.
        fn oracle(a: &str, b: &str) -> usize {
            let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
            for (i, row) in m.iter_mut().enumerate() {
                row[0] = i;
            }
            for (j, cell) in m[0].iter_mut().enumerate() {
                *cell = j;
            }
            for i in 1..=a.len() {
                for j in 1..=b.len() {
                    let c = usize::from(a[i - 1] != b[j - 1]);
                    m[i][j] = (m[i - 1][j] + 1).min(m[i][j - 1] + 1).min(m[i - 1][j - 1] + c);
                }
            }
            m[a.len()][b.len()]
        }
        for (a, b) in [("abc", "abd"), ("kitten", "sitting"), ("", "xy"), ("flaw", "lawn"), ("ünï", "uni")] {
            assert_eq!(levenshtein(a, b), oracle(a, b), "{a} / {b}");
        }
        assert_eq!(levenshtein("abc", "abd"), 1);
    }

    #[test]
    fn anls_examples() {
        let r = anls(&["abc"], &[vec!["abd"]]).unwrap();
        assert!((r.value - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(anls(&["xyz"], &[vec!["abc"]]).unwrap().value, 0.0);
        assert_eq!(anls(&["Paris "], &[vec!["paris"]]).unwrap().value, 1.0);
        assert_eq!(anls(&["abc"], &[vec!["zzz", "abc"]]).unwrap().value, 1.0);
        assert!(anls(&["abc"], &[vec![]]).is_err());
        assert!(anls::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn top1_examples() {
        assert_eq!(top1_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap().value, 1.0);
        assert_eq!(top1_accuracy(&[1, 2], &[3, 4]).unwrap().value, 0.0);
        assert_eq!(top1_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 5]).unwrap().value, 0.75);
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
    }

    fn setup() -> (ModelParams, Vec<ModelInput>) {
        let p = build_model(&ModelConfig::small(16, 8, 2, 32, 9)).unwrap();
        let inputs = (0..3).map(|i| ModelInput::text(vec![4 + i, 5, 6 + i])).collect();
        (p, inputs)
    }

    #[test]
    fn empty_mask_and_layer_zero() {
        let (p, inputs) = setup();
        let out = deviation_experiment(&p, &inputs, &DeactivationMask::empty(&p.config), 2, 0).unwrap();
        assert_eq!(out.target, 0.0);
        assert_eq!(out.positions, 9);

        let mask = DeactivationMask::full_layer(&p.config, 0).unwrap();
        let a = run_all(&p, &inputs, None).unwrap();
        let b = run_all(&p, &inputs, Some(&mask)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(deviation(&x.hidden[0], &y.hidden[0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn random_masks_match_cardinality_and_reproduce() {
        let (p, inputs) = setup();
        let target =
            DeactivationMask::from_neurons(&p.config, (0..5).map(|j| NeuronId::new(0, 1, j))).unwrap();
        for t in 0..4 {
            assert_eq!(random_mask_like(&p, &target, 3, t).unwrap().count(), 5);
        }
        assert_ne!(random_mask_like(&p, &target, 3, 0).unwrap(), random_mask_like(&p, &target, 3, 1).unwrap());
        let a = deviation_experiment(&p, &inputs, &target, 1, 42).unwrap();
        let b = deviation_experiment(&p, &inputs, &target, 1, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.baseline.std, None);
        assert!(deviation_experiment(&p, &[], &target, 1, 0).is_err());
        assert!(deviation_experiment(&p, &inputs, &target, 0, 0).is_err());
    }

    #[test]
    fn report_round_trip() {
        let report = DeviationReport::new(
            7,
            2,
            vec![DomainDeviation {
                domain: 0,
                name: "d0".into(),
                samples: 3,
                positions: 9,
                mask_neurons: vec![ModuleNeuronCount { module: "llm".into(), neurons: 4 }],
                target: 0.25,
                random: RandomBaseline::from_trials(7, vec![0.1, 0.2]),
                metrics: vec![top1_accuracy(&[1], &[1]).unwrap()],
            }],
        );
        assert_eq!(DeviationReport::load(&report.save().unwrap()).unwrap(), report);
    }
}
