// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL line; the process exits non-zero if
//! any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use domain_neurons::dape::{
    assign_domains, dape_score, select_bottom, DapeTable, ProbabilityTable, SelectionFile, SelectionScope,
};
use domain_neurons::lens::{entropy_curves, heatmap, logit_lens, output_distribution, EntropyAccumulator};
use domain_neurons::perturb::{anls, deviation, deviation_experiment, final_states, similarity};
use domain_neurons::refmodel::{
    build_model, emit_trace, forward, forward_unmasked, Activation, DeactivationMask, ModelConfig, ModelInput,
    ModelParams, TokenType,
};
use domain_neurons::stats::{ActivationCounters, PopulationShape};
use domain_neurons::synth::{generate_corpus, plant_neurons, PlantSpec, SynthCorpus, SynthCorpusSpec};
use domain_neurons::tensor::Matrix;
use domain_neurons::trace_store::{
    read_trace, write_trace, AggCounts, CorpusManifest, DomainSpec, HiddenStateDump, ModuleSpec, RawBitmaps,
    TokenTypeSpec, TracePayload, TraceRecord, MANIFEST_FORMAT_VERSION,
};
use domain_neurons::NeuronId;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Fixed-point natural log used as the entropy oracle.

const FRAC: u32 = 192;

fn one() -> BigInt {
    BigInt::one() << FRAC
}

fn to_fixed(x: f64) -> BigInt {
    let r = BigRational::from_float(x).expect("finite");
    (r.numer() << FRAC) / r.denom()
}

fn from_fixed(x: &BigInt) -> f64 {
    BigRational::new(x.clone(), one()).to_f64().expect("representable")
}

/// `2 atanh(t)` for fixed-point `0 <= t < 1/2`.
fn two_atanh(t: &BigInt) -> BigInt {
    let t2 = (t * t) >> FRAC;
    let mut power = t.clone();
    let mut sum = BigInt::zero();
    let mut k = 1u32;
    while !power.is_zero() {
        sum += &power / k;
        power = (&power * &t2) >> FRAC;
        k += 2;
    }
    sum << 1
}

fn ln2() -> BigInt {
    // ln 2 = 2 atanh(1/3)
    two_atanh(&(one() / 3))
}

/// `ln x` for fixed-point `x > 0`.
fn ln_fixed(x: &BigInt, ln2: &BigInt) -> BigInt {
    let mut y = x.clone();
    let mut shift: i64 = 0;
    let two = one() << 1;
    while y < one() {
        y <<= 1;
        shift -= 1;
    }
    while y >= two {
        y >>= 1;
        shift += 1;
    }
    let t = ((&y - one()) << FRAC) / (&y + one());
    two_atanh(&t) + ln2 * shift
}

fn oracle_entropy(p: &[f64], ln2: &BigInt) -> f64 {
    let mut h = BigInt::zero();
    for &pi in p.iter().filter(|&&v| v > 0.0) {
        let x = to_fixed(pi);
        h -= (&x * ln_fixed(&x, ln2)) >> FRAC;
    }
    from_fixed(&h)
}

fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let sharp = rng.random_range(1..6);
        let raw: Vec<f64> = (0..k)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>().powi(sharp) })
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            return raw.iter().map(|v| v / total).collect();
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let ln2 = ln2();
    ensure!((from_fixed(&ln2) - std::f64::consts::LN_2).abs() < 1e-16, "oracle ln 2 is off");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let p = random_distribution(&mut rng, 5);
        let got = ok(dape_score(&p))?;
        let want = oracle_entropy(&p, &ln2);
        worst = worst.max((got - want).abs());
    }
    ensure!(worst <= 1e-10, "max |dape - oracle| = {worst:e}");
    let uniform = ok(dape_score(&[0.2; 5]))?;
    ensure!((uniform - 5f64.ln()).abs() <= 1e-12, "uniform gives {uniform}");
    for j in 0..5 {
        let mut hot = [0.0; 5];
        hot[j] = 1.0;
        let h = ok(dape_score(&hot))?;
        ensure!(h.abs() <= 1e-12, "one-hot at {j} gives {h}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("10000 distributions, max error {worst:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------

fn tied_table(seed: u64, modules: Vec<ModuleSpec>, k: usize) -> ProbabilityTable {
    let shape = PopulationShape::new(k, modules);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::with_capacity(shape.population() * k);
    for _ in 0..shape.population() {
        // Quarter steps make many rows share a DAPE value.
        let mut row: Vec<f64> = (0..k).map(|_| f64::from(rng.random_range(0..5u8)) / 4.0).collect();
        if row.iter().all(|&p| p == 0.0) {
            row[rng.random_range(0..k)] = 1.0;
        }
        cells.extend(row.into_iter().map(Some));
    }
    ProbabilityTable::from_cells(shape, cells).expect("valid table")
}

fn selection_text(probs: &ProbabilityTable, percentile: f64) -> Result<String, String> {
    let table = DapeTable::from_probabilities(probs);
    let sel = ok(select_bottom(&table, percentile, SelectionScope::PerModule))?;
    let assignment = ok(assign_domains(&sel, probs, 0.2))?;
    let names: Vec<String> = (0..probs.shape().domains).map(|d| format!("d{d}")).collect();
    ok(ok(SelectionFile::new(&sel, &assignment, probs.shape(), &names))?.save())
}

fn criterion_2() -> Outcome {
    let modules = vec![
        ModuleSpec { name: "a".into(), layer_count: 1, neurons_per_layer: 100 },
        ModuleSpec { name: "b".into(), layer_count: 4, neurons_per_layer: 250 },
        ModuleSpec { name: "c".into(), layer_count: 4, neurons_per_layer: 1024 },
    ];
    let populations = [100usize, 1000, 4096];
    let probs = tied_table(2, modules.clone(), 5);
    let table = DapeTable::from_probabilities(&probs);
    let distinct: BTreeSet<u64> = table.entries().iter().map(|e| e.score.to_bits()).collect();
    ensure!(distinct.len() < 200, "table has {} distinct scores, expected heavy ties", distinct.len());

    for p in [1u32, 5] {
        let sel = ok(select_bottom(&table, f64::from(p), SelectionScope::PerModule))?;
        for (m, &n) in populations.iter().enumerate() {
            let want = (p as usize * n) / 100;
            let got = sel.selected.iter().filter(|s| usize::from(s.neuron.module) == m).count();
            ensure!(got == want, "module {m} (n = {n}) at p = {p}: selected {got}, expected {want}");

            let mut ranked: Vec<(f64, NeuronId)> = table
                .entries()
                .iter()
                .filter(|e| usize::from(e.neuron.module) == m)
                .map(|e| (e.score, e.neuron))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected: BTreeSet<NeuronId> = ranked[..want].iter().map(|r| r.1).collect();
            let got: BTreeSet<NeuronId> =
                sel.neurons().filter(|id| usize::from(id.module) == m).collect();
            ensure!(got == expected, "module {m} at p = {p}: tie-break differs from (dape, id) order");
        }
        let first = selection_text(&tied_table(2, modules.clone(), 5), f64::from(p))?;
        let second = selection_text(&tied_table(2, modules.clone(), 5), f64::from(p))?;
        ensure!(first == second, "selection files differ between runs at p = {p}");
    }
    Ok("counts exact for n in {100, 1000, 4096} at p in {1, 5}; repeat runs byte-identical".into())
}

// ---------------------------------------------------------------------------

struct Planted {
    config: ModelConfig,
    corpus: SynthCorpus,
    spec: PlantSpec,
    model: ModelParams,
    report: domain_neurons::synth::PlantReport,
}

fn planted(w2_scale: Option<f32>) -> Result<Planted, String> {
    let config = ModelConfig::small(64, 32, 4, 256, 0);
    let base = ok(build_model(&config))?;
    let corpus = ok(generate_corpus(&SynthCorpusSpec::for_model(&config, 5, 40, 16, 100)))?;
    let mut spec = ok(PlantSpec::spread(&config, 5, 0.02, 200))?;
    if let Some(s) = w2_scale {
        spec = spec.loud(s);
    }
    let (model, report) = ok(plant_neurons(&base, &spec, &corpus))?;
    Ok(Planted { config, corpus, spec, model, report })
}

/// Forward every sample, round-trip the trace through its binary encoding and
/// accumulate counters.
fn counters_via_trace(p: &Planted) -> Result<ActivationCounters, String> {
    let manifest = p.corpus.manifest(&p.config, "acceptance");
    let mut records = Vec::new();
    for s in &p.corpus.samples {
        let t = ok(s.input.run(&p.model, None))?;
        records.extend(ok(emit_trace(&t, s.domain))?);
    }
    let mut bytes = Vec::new();
    ok(write_trace(&records, &manifest, &mut bytes))?;
    let mut counters = ActivationCounters::new(&manifest);
    for r in ok(read_trace(bytes.as_slice()))? {
        ok(counters.accumulate(&r))?;
    }
    Ok(counters)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let p = planted(None)?;
    ensure!(p.report.rivals.is_empty(), "unplanted single-domain detectors present: {:?}", p.report.rivals);
    let probs = counters_via_trace(&p)?.activation_probabilities();
    let table = DapeTable::from_probabilities(&probs);
    let sel = ok(select_bottom(&table, 2.0, SelectionScope::PerModule))?;
    let got: BTreeSet<NeuronId> = sel.neurons().collect();
    let want: BTreeSet<NeuronId> = p.spec.neurons().into_iter().collect();
    let hits = got.intersection(&want).count();
    let precision = hits as f64 / got.len().max(1) as f64;
    let recall = hits as f64 / want.len() as f64;
    ensure!(precision == 1.0 && recall == 1.0, "precision {precision}, recall {recall}");
    let assignment = ok(assign_domains(&sel, &probs, 0.2))?;
    for t in &p.spec.targets {
        let domains = assignment.assignments.get(&t.neuron);
        ensure!(domains == Some(&vec![t.domain]), "{} assigned {domains:?}, planted in {}", t.neuron, t.domain);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{hits}/{} planted neurons recovered, precision 1, recall 1, {elapsed:.2?}", want.len()))
}

// ---------------------------------------------------------------------------

fn split_raw(record: &TraceRecord, cuts: &[usize]) -> Vec<TraceRecord> {
    let TracePayload::Raw(raw) = &record.payload else { panic!("raw record expected") };
    let mut pieces = Vec::new();
    for w in cuts.windows(2) {
        let bytes: Vec<u8> = (w[0]..w[1]).flat_map(|t| raw.token(t).to_vec()).collect();
        let part = RawBitmaps::from_bytes(raw.neurons(), bytes).expect("token slices are valid");
        pieces.push(TraceRecord { payload: TracePayload::Raw(part), ..record.clone() });
    }
    pieces
}

fn counters_from_bytes(manifest: &CorpusManifest, records: &[TraceRecord]) -> Result<ActivationCounters, String> {
    let mut bytes = Vec::new();
    ok(write_trace(records, manifest, &mut bytes))?;
    let mut c = ActivationCounters::new(manifest);
    for r in ok(read_trace(bytes.as_slice()))? {
        ok(c.accumulate(&r))?;
    }
    Ok(c)
}

fn criterion_4() -> Outcome {
    let mut checked = 0;
    for seed in 0..3u64 {
        let config = ModelConfig::small(48, 16, 3, 96, seed);
        let model = ok(build_model(&config))?;
        let corpus = ok(generate_corpus(&SynthCorpusSpec::for_model(&config, 4, 6, 12, seed + 10)))?;
        let manifest = corpus.manifest(&config, "shards");
        let mut records = Vec::new();
        for s in &corpus.samples {
            records.extend(ok(emit_trace(&ok(s.input.run(&model, None))?, s.domain))?);
        }
        let single = counters_from_bytes(&manifest, &records)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shards: Vec<Vec<TraceRecord>> = vec![Vec::new(); 4];
        for r in &records {
            let (tokens, _) = r.payload.totals();
            let mut cuts: Vec<usize> = (0..3).map(|_| rng.random_range(0..=tokens as usize)).collect();
            cuts.extend([0, tokens as usize]);
            cuts.sort_unstable();
            let offset = rng.random_range(0..4);
            for (i, piece) in split_raw(r, &cuts).into_iter().enumerate() {
                shards[(i + offset) % 4].push(piece);
            }
        }
        let mut merged = ActivationCounters::new(&manifest);
        for shard in &shards {
            ok(merged.merge_from(&counters_from_bytes(&manifest, shard)?))?;
        }
        ensure!(merged == single, "seed {seed}: merged shards differ from the single pass");

        let agg: Vec<TraceRecord> = records.iter().map(TraceRecord::to_aggregate).collect();
        ensure!(agg.iter().all(|r| matches!(r.payload, TracePayload::Agg(_))), "aggregation kept raw payloads");
        let from_agg = counters_from_bytes(&manifest, &agg)?.activation_probabilities();
        ensure!(
            from_agg == single.activation_probabilities(),
            "seed {seed}: raw and aggregate encodings give different probabilities"
        );
        checked += records.len();
    }
    Ok(format!("{checked} records over 3 traces; 4-way shard merge and both encodings agree exactly"))
}

// ---------------------------------------------------------------------------

fn random_input(rng: &mut ChaCha8Rng, config: &ModelConfig, image: bool, max_tokens: usize) -> ModelInput {
    let patches = image.then(|| {
        let data = (0..config.n_patches * config.patch_dim).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        Matrix::from_vec(config.n_patches, config.patch_dim, data).expect("shape")
    });
    let n = rng.random_range(1..=max_tokens);
    let tokens = (0..n).map(|_| rng.random_range(0..config.vocab_size)).collect();
    ModelInput { patches, tokens }
}

fn criterion_5() -> Outcome {
    let config = ModelConfig::small(64, 32, 4, 256, 5);
    let model = ok(build_model(&config))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let max_entropy = f64::from(config.vocab_size).ln();
    let (mut worst, mut positions) = (0.0f64, 0);
    for i in 0..20 {
        let input = random_input(&mut rng, &config, i % 2 == 0, 24);
        let trace = ok(input.run(&model, None))?;
        let last = trace.hidden.last().expect("final state");
        for pos in 0..trace.len() {
            let lens = ok(logit_lens(last.row(pos), &model.final_norm, &model.unembedding))?;
            let out = output_distribution(&trace, pos);
            for (a, b) in lens.probabilities.iter().zip(&out) {
                worst = worst.max((a - b).abs());
            }
            for layer in ok(heatmap(&model, &trace, pos, 1))? {
                ensure!(
                    (0.0..=max_entropy).contains(&layer.entropy),
                    "entropy {} at layer {} outside [0, ln V]",
                    layer.entropy,
                    layer.layer
                );
            }
            positions += 1;
        }
    }
    ensure!(worst <= 1e-6, "max |lens - output| = {worst:e}");
    Ok(format!("{positions} positions, max abs difference {worst:.1e}"))
}

// ---------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let config = ModelConfig::small(64, 32, 4, 256, 6);
    let model = ok(build_model(&config))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs: Vec<ModelInput> = (0..6).map(|i| random_input(&mut rng, &config, i % 2 == 0, 16)).collect();
    let empty = DeactivationMask::empty(&config);
    for input in &inputs {
        let plain = ok(forward_unmasked(&model, input.patches.as_ref(), &input.tokens))?;
        let masked = ok(forward(&model, input.patches.as_ref(), &input.tokens, &empty))?;
        let same = plain.logits.as_slice().iter().zip(masked.logits.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "empty mask changed logits");
    }
    let intact = ok(final_states(&model, &inputs, None))?;
    let d = ok(deviation(&intact, &ok(final_states(&model, &inputs, Some(&empty)))?))?;
    ensure!(d == 0.0, "empty-mask deviation {d}");

    for layer in 0..config.n_layers {
        let mask = ok(DeactivationMask::full_layer(&config, layer))?;
        for input in &inputs {
            let t = ok(input.run(&model, Some(&mask)))?;
            ensure!(
                t.ffn_residual[layer].as_slice().iter().all(|&v| v == 0.0),
                "layer {layer} FFN residual not zero under a full-layer mask"
            );
        }
    }

    let a = ok(Matrix::from_rows(&[vec![3.0, 4.0]]))?;
    let b = ok(Matrix::from_rows(&[vec![3.0, 0.0]]))?;
    let hand = ok(deviation(&a, &b))?;
    ensure!((hand - 0.8).abs() <= 1e-12, "(3,4) vs (3,0) gives {hand}");
    let c = ok(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]))?;
    let e = ok(Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]))?;
    let hand2 = ok(deviation(&c, &e))?;
    ensure!((hand2 - 0.5f64.sqrt()).abs() <= 1e-12, "identity vs one zeroed row gives {hand2}");
    Ok("empty mask bit-identical, full-layer residuals zero, hand deviations exact".into())
}

// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let p = planted(Some(10.0))?;
    let mut wins = 0;
    let mut weakest = f64::INFINITY;
    for r in 0..20u64 {
        let domain = (r % 5) as u16;
        let mask = ok(DeactivationMask::from_neurons(&p.config, p.report.neurons_of(domain)))?;
        ensure!(!mask.is_empty(), "no planted neurons for domain {domain}");
        let outcome = ok(deviation_experiment(&p.model, &p.corpus.domain_inputs(domain), &mask, 5, r))?;
        ensure!(outcome.baseline.trials == 5, "baseline ran {} trials", outcome.baseline.trials);
        if outcome.target > outcome.baseline.mean {
            wins += 1;
        }
        weakest = weakest.min(outcome.target / outcome.baseline.mean);
    }
    ensure!(wins >= 19, "planted mask beat the random mean in {wins}/20 repetitions");
    Ok(format!("planted mask beat the random mean in {wins}/20 repetitions (smallest ratio {weakest:.2})"))
}

// ---------------------------------------------------------------------------

/// Independent per-position lens entropy.
fn brute_entropy(model: &ModelParams, h: &[f32]) -> f64 {
    let d = h.len();
    let x: Vec<f64> = h.iter().map(|&v| f64::from(v)).collect();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let norm = &model.final_norm;
    let y: Vec<f64> = (0..d)
        .map(|i| (x[i] - mean) / (var + f64::from(norm.eps)).sqrt() * f64::from(norm.gain[i]) + f64::from(norm.bias[i]))
        .collect();
    let v = model.unembedding.cols();
    let logits: Vec<f64> = (0..v)
        .map(|j| (0..d).map(|i| y[i] * f64::from(model.unembedding.get(i, j))).sum())
        .collect();
    let top = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    logits
        .iter()
        .map(|l| (l - top).exp() / z)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn criterion_8() -> Outcome {
    let config = ModelConfig::small(64, 32, 4, 256, 8);
    let model = ok(build_model(&config))?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs: Vec<ModelInput> = (0..6).map(|_| random_input(&mut rng, &config, true, 20)).collect();
    let layers = config.n_layers + 1;
    let mut acc = EntropyAccumulator::new(config.n_layers);
    let mut sums = vec![[0.0f64; 2]; layers];
    let mut counts = vec![[0u64; 2]; layers];
    let mut worst = 0.0f64;
    for input in &inputs {
        let trace = ok(input.run(&model, None))?;
        let single = ok(entropy_curves(&model, &trace))?;
        ok(acc.add(&model, &trace))?;
        let mut local = vec![[0.0f64; 2]; layers];
        for (l, h) in trace.hidden.iter().enumerate() {
            for (pos, ty) in trace.token_types.iter().enumerate() {
                let e = brute_entropy(&model, h.row(pos));
                local[l][*ty as usize] += e;
                sums[l][*ty as usize] += e;
                counts[l][*ty as usize] += 1;
            }
        }
        let n_img = trace.positions_of(TokenType::Image).len() as f64;
        let n_txt = trace.positions_of(TokenType::Text).len() as f64;
        for (l, point) in single.layers.iter().enumerate() {
            let (Some(img), Some(txt)) = (point.image, point.text) else {
                return Err(format!("layer {l} is missing a token group"));
            };
            worst = worst.max((img - local[l][0] / n_img).abs()).max((txt - local[l][1] / n_txt).abs());
        }
    }
    let curve = acc.finish();
    ensure!(curve.layers.len() == layers, "{} layers in curve, expected {layers}", curve.layers.len());
    ensure!(counts.iter().all(|c| *c == counts[0]), "group counts vary across layers");
    ensure!(
        curve.image_positions == counts[0][0] && curve.text_positions == counts[0][1],
        "curve counts {}/{} vs brute force {:?}",
        curve.image_positions,
        curve.text_positions,
        counts[0]
    );
    for (l, point) in curve.layers.iter().enumerate() {
        let img = point.image.ok_or("image group missing")?;
        let txt = point.text.ok_or("text group missing")?;
        worst = worst
            .max((img - sums[l][0] / counts[l][0] as f64).abs())
            .max((txt - sums[l][1] / counts[l][1] as f64).abs());
    }
    ensure!(worst <= 1e-9, "max |curve - brute force| = {worst:e}");
    Ok(format!(
        "{} image and {} text positions per layer, max error {worst:.1e}",
        curve.image_positions, curve.text_positions
    ))
}

// ---------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let near = ok(anls(&["abc"], &[vec!["abd"]]))?.value;
    ensure!((near - 2.0 / 3.0).abs() <= 1e-9, "(abc, abd) gives {near}");
    let far = ok(anls(&["abcde"], &[vec!["abxyz"]]))?.value;
    ensure!(far == 0.0, "similarity 0.4 gives {far}, expected the floor");
    ensure!(similarity("abcde", "abxyz") > 0.0, "raw similarity should stay unfloored");
    let edge = ok(anls(&["abcd"], &[vec!["abxy"]]))?.value;
    ensure!(edge == 0.5, "similarity exactly 0.5 gives {edge}");
    let same = ok(anls(&["Invoice 42"], &[vec!["invoice 42 "]]))?.value;
    ensure!(same == 1.0, "identical answers give {same}");
    let best = ok(anls(&["abc", "zzz"], &[vec!["xyz", "abc"], vec!["abc"]]))?.value;
    ensure!(best == 0.5, "max over golds then mean gives {best}");
    Ok("2/3, floor, 0.5 edge, identity and max-over-golds all exact".into())
}

// ---------------------------------------------------------------------------

fn random_name(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 8] = ["med", "doc", "\"quoted\"", "naïve", "a b", "x\\y", "#", "路"];
    (0..rng.random_range(1..4)).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect()
}

fn random_manifest(rng: &mut ChaCha8Rng) -> CorpusManifest {
    let modules = (0..rng.random_range(1..4))
        .map(|m| ModuleSpec {
            name: format!("{}{m}", random_name(rng)),
            layer_count: rng.random_range(1..5),
            neurons_per_layer: rng.random_range(1..70),
        })
        .collect();
    let domains = (0..rng.random_range(2..6u16))
        .map(|id| DomainSpec { id, name: format!("{}{id}", random_name(rng)) })
        .collect();
    CorpusManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        model_id: random_name(rng),
        modules,
        domains,
        token_types: vec![
            TokenTypeSpec { id: 0, name: "image".into() },
            TokenTypeSpec { id: 1, name: "text".into() },
        ],
    }
}

fn random_record(rng: &mut ChaCha8Rng, manifest: &CorpusManifest) -> TraceRecord {
    let module_id = rng.random_range(0..manifest.modules.len()) as u16;
    let spec = &manifest.modules[usize::from(module_id)];
    let n = spec.neurons_per_layer;
    let payload = if rng.random_bool(0.5) {
        let mut raw = RawBitmaps::empty(n);
        for _ in 0..rng.random_range(0..6) {
            let bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            raw.push_token(&bits).expect("width matches");
        }
        TracePayload::Raw(raw)
    } else {
        let total = rng.random_range(0..1u64 << 40);
        let counts = (0..n).map(|_| rng.random_range(0..=total)).collect();
        TracePayload::Agg(AggCounts::new(total, counts).expect("counts within total"))
    };
    TraceRecord {
        domain_id: rng.random_range(0..manifest.domains.len()) as u16,
        module_id,
        layer: rng.random_range(0..spec.layer_count),
        token_type: rng.random_range(0..2),
        payload,
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        vocab_size: rng.random_range(4..40),
        d_model: rng.random_range(1..10),
        n_layers: rng.random_range(1..4),
        ffn_size: rng.random_range(1..20),
        activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Gelu },
        n_heads: 1,
        n_patches: rng.random_range(0..5),
        patch_dim: rng.random_range(1..6),
        max_seq: rng.random_range(1..30),
        seed: rng.random(),
    }
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let instances = 50;
    for i in 0..instances {
        let manifest = random_manifest(&mut rng);
        let text = ok(manifest.save())?;
        ensure!(ok(CorpusManifest::load(&text))? == manifest, "manifest {i} changed on round trip");

        let records: Vec<TraceRecord> = (0..rng.random_range(0..12)).map(|_| random_record(&mut rng, &manifest)).collect();
        let mut bytes = Vec::new();
        ok(write_trace(&records, &manifest, &mut bytes))?;
        ensure!(ok(read_trace(bytes.as_slice()))? == records, "trace {i} changed on round trip");

        let config = random_config(&mut rng);
        let mut model = ok(build_model(&config))?;
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                if rng.random_bool(0.05) {
                    *v = f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff);
                }
            }
        }
        let mut buf = Vec::new();
        ok(model.save(&mut buf))?;
        let loaded = ok(ModelParams::load(&mut buf.as_slice()))?;
        let same_bits = loaded.config == model.config
            && loaded.tensors().iter().zip(model.tensors()).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        ensure!(same_bits, "model {i} changed on round trip");

        let width = rng.random_range(1..9u64);
        let values: Vec<f32> = (0..width * rng.random_range(0..7)).map(|_| rng.random()).collect();
        let dump = ok(HiddenStateDump::new(rng.random_range(0..9), rng.random(), width, values))?;
        let mut buf = Vec::new();
        ok(dump.write(&mut buf))?;
        ensure!(ok(HiddenStateDump::read(&mut buf.as_slice()))? == dump, "dump {i} changed on round trip");

        let k = manifest.domains.len();
        let shape = PopulationShape::new(k, manifest.modules.clone());
        let cells = (0..shape.population() * k)
            .map(|_| (!rng.random_bool(0.05)).then(|| rng.random::<f64>()))
            .collect();
        let probs = ok(ProbabilityTable::from_cells(shape.clone(), cells))?;
        let table = DapeTable::from_probabilities(&probs);
        let percentile = rng.random_range(1.0..100.0);
        let scope = if rng.random_bool(0.5) { SelectionScope::PerModule } else { SelectionScope::Global };
        let sel = ok(select_bottom(&table, percentile, scope))?;
        let assignment = ok(assign_domains(&sel, &probs, rng.random_range(0.01..0.99)))?;
        let names: Vec<String> = manifest.domains.iter().map(|d| d.name.clone()).collect();
        let file = ok(SelectionFile::new(&sel, &assignment, &shape, &names))?;
        ensure!(ok(SelectionFile::load(&ok(file.save())?))? == file, "selection {i} changed on round trip");
    }
    Ok(format!("{instances} randomized manifests, traces, models, dumps and selection files"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("DAPE oracle equivalence", criterion_1),
        ("selection count law", criterion_2),
        ("planted recovery", criterion_3),
        ("aggregation correctness", criterion_4),
        ("logit-lens consistency", criterion_5),
        ("deactivation semantics", criterion_6),
        ("deviation against random masks", criterion_7),
        ("entropy curves", criterion_8),
        ("ANLS", criterion_9),
        ("format round-trips", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
