// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use domain_neurons::dape::{assign_domains, select_bottom, DapeTable, ProbabilityTable, SelectionFile, SelectionScope};
use domain_neurons::lens::{heatmap, heatmap_rows, write_heatmap_csv, EntropyAccumulator, EntropyCurve};
use domain_neurons::perturb::{
    agreement_metrics, deviation_experiment, run_all, DeviationReport, DomainDeviation, ModuleNeuronCount,
};
use domain_neurons::refmodel::{build_model, emit_trace, Activation, DeactivationMask, ModelConfig, ModelParams, LLM_MODULE};
use domain_neurons::stats::{write_probabilities_csv, ActivationCounters, SilentReport};
use domain_neurons::synth::{generate_corpus, plant_neurons, PlantSpec, SynthCorpus, SynthCorpusSpec};
use domain_neurons::trace_store::{write_trace, AggCounts, CorpusManifest, TracePayload, TraceReader, TraceRecord};

use crate::error::{CliError, CliResult};
use crate::files::{self, load_corpus, load_model, read_text, require_dir, write_atomic};
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Encoding {
    /// One bitmap per token.
    Raw,
    /// Counts summed per domain, layer and token type.
    Agg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    PerModule,
    Global,
}

impl From<Scope> for SelectionScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::PerModule => SelectionScope::PerModule,
            Scope::Global => SelectionScope::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Gelu,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for model.bin, plant.toml and corpus/.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub vocab: u32,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 256)]
    pub ffn: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 5)]
    pub domains: u16,
    /// Samples per domain.
    #[arg(long, default_value_t = 40)]
    pub samples: usize,
    /// Text tokens per sample.
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    /// Fraction of FFN neurons to plant as domain detectors; 0 plants none.
    #[arg(long, default_value_t = 0.02)]
    pub plant: f64,
    /// Multiply the planted neurons' output weights by this factor.
    #[arg(long)]
    pub w2_scale: Option<f32>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory receiving manifest.toml and one trace file per domain.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Encoding::Raw)]
    pub encoding: Encoding,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    /// Directory written by `trace`.
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub percentile: f64,
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = Scope::PerModule)]
    pub scope: Scope,
    /// Selection file; the silent-neuron report is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the activation-probability table as CSV.
    #[arg(long)]
    pub probabilities: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LensArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Index of the input sample within the corpus.
    #[arg(long)]
    pub sample: usize,
    /// Sequence position to decode (image positions come first).
    #[arg(long)]
    pub position: usize,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Heatmap CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-layer entropy curves over the whole corpus.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeviateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub selection: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Random equal-cardinality masks per domain.
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    /// Greedy continuation length for the ANLS agreement metric; 0 skips metrics.
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding selection, deviation and entropy artifacts.
    #[arg(long)]
    pub dir: PathBuf,
    /// Defaults to the artifacts directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub percentile: f64,
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = Scope::PerModule)]
    pub scope: Scope,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = Encoding::Raw)]
    pub encoding: Encoding,
}

fn check_selection_args(percentile: f64, tau: f64) -> CliResult<()> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(CliError::usage(format!("--percentile {percentile} outside (0, 100]")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CliError::usage(format!("--tau {tau} outside (0, 1)")));
    }
    Ok(())
}

fn check_compatible(config: &ModelConfig, corpus: &SynthCorpus) -> CliResult<()> {
    let s = &corpus.spec;
    if s.vocab_size > config.vocab_size || s.n_patches != config.n_patches || s.patch_dim != config.patch_dim {
        return Err(CliError::usage(format!(
            "corpus (vocab {}, {} x {} patches) does not fit the model (vocab {}, {} x {} patches)",
            s.vocab_size, s.n_patches, s.patch_dim, config.vocab_size, config.n_patches, config.patch_dim
        )));
    }
    if s.n_patches + s.tokens_per_sample > config.max_seq {
        return Err(CliError::usage(format!(
            "corpus sequences of {} positions exceed the model's max_seq {}",
            s.n_patches + s.tokens_per_sample,
            config.max_seq
        )));
    }
    Ok(())
}

fn model_id(path: &Path) -> String {
    path.file_name().map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned())
}

// ---------------------------------------------------------------------------

pub fn synth(args: &SynthArgs, seed: u64) -> CliResult<()> {
    let mut config = ModelConfig::small(args.vocab, args.d_model, args.layers, args.ffn, seed);
    config.activation = match args.activation {
        ActivationArg::Relu => Activation::Relu,
        ActivationArg::Gelu => Activation::Gelu,
    };
    config.validate()?;
    if !(0.0..1.0).contains(&args.plant) {
        return Err(CliError::usage(format!("--plant {} outside [0, 1)", args.plant)));
    }
    let corpus_spec = SynthCorpusSpec::for_model(&config, args.domains, args.samples, args.tokens, seed.wrapping_add(100));
    corpus_spec.validate()?;
    check_compatible(&config, &SynthCorpus { spec: corpus_spec.clone(), samples: Vec::new() })?;

    let base = build_model(&config)?;
    let corpus = generate_corpus(&corpus_spec)?;
    let mut plant = PlantSpec::spread(&config, args.domains, args.plant, seed.wrapping_add(200))?;
    if let Some(scale) = args.w2_scale {
        plant = plant.loud(scale);
    }
    let (model, report) = plant_neurons(&base, &plant, &corpus)?;
    log::info!("planted {} neurons, {} rival detectors", report.neurons.len(), report.rivals.len());
    if !report.rivals.is_empty() {
        log::warn!(
            "{} unplanted neurons also fire on a single domain; recovery may not be exact",
            report.rivals.len()
        );
    }

    let mut model_bytes = Vec::new();
    model.save(&mut model_bytes)?;
    write_atomic(&args.out.join(files::MODEL_FILE), &model_bytes)?;
    write_atomic(&args.out.join(files::PLANT_FILE), report.save()?.as_bytes())?;

    let staging = tempfile::Builder::new().prefix(".corpus").tempdir_in(&args.out)?;
    corpus.save(staging.path())?;
    let target = args.out.join(files::CORPUS_DIR);
    if target.exists() {
        fs::remove_dir_all(&target)?;
    }
    fs::rename(staging.keep(), &target)?;
    log::info!("wrote {}", target.display());
    Ok(())
}

// ---------------------------------------------------------------------------

/// (domain, module, layer, token type)
type GroupKey = (u16, u16, u16, u8);

/// Sum records per group key.
fn aggregate(records: &[TraceRecord]) -> Vec<TraceRecord> {
    let mut groups: BTreeMap<GroupKey, (u64, Vec<u64>)> = BTreeMap::new();
    for r in records {
        let (tokens, counts) = r.payload.totals();
        let entry = groups
            .entry((r.domain_id, r.module_id, r.layer, r.token_type))
            .or_insert_with(|| (0, vec![0; counts.len()]));
        entry.0 += tokens;
        for (a, c) in entry.1.iter_mut().zip(counts) {
            *a += c;
        }
    }
    groups
        .into_iter()
        .map(|((domain_id, module_id, layer, token_type), (total, counts))| TraceRecord {
            domain_id,
            module_id,
            layer,
            token_type,
            payload: TracePayload::Agg(AggCounts::new(total, counts).expect("summed counts stay within totals")),
        })
        .collect()
}

/// Encoded trace file for every domain, in domain order.
fn trace_corpus(
    model: &ModelParams,
    corpus: &SynthCorpus,
    manifest: &CorpusManifest,
    encoding: Encoding,
) -> CliResult<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for d in 0..corpus.spec.domains {
        let inputs = corpus.domain_inputs(d);
        let mut records = Vec::new();
        for t in run_all(model, &inputs, None)? {
            records.extend(emit_trace(&t, d)?);
        }
        if encoding == Encoding::Agg {
            records = aggregate(&records);
        }
        let mut buf = Vec::new();
        write_trace(&records, manifest, &mut buf)?;
        log::info!("domain {d}: {} samples, {} records, {} bytes", inputs.len(), records.len(), buf.len());
        out.push((files::trace_file_name(d), buf));
    }
    Ok(out)
}

fn write_traces(model_path: &Path, model: &ModelParams, corpus: &SynthCorpus, out: &Path, encoding: Encoding) -> CliResult<()> {
    check_compatible(&model.config, corpus)?;
    let manifest = corpus.manifest(&model.config, &model_id(model_path));
    let traces = trace_corpus(model, corpus, &manifest, encoding)?;
    write_atomic(&out.join(files::MANIFEST_FILE), manifest.save()?.as_bytes())?;
    for (name, bytes) in traces {
        write_atomic(&out.join(name), &bytes)?;
    }
    Ok(())
}

pub fn trace(args: &TraceArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.corpus)?;
    write_traces(&args.model, &model, &corpus, &args.out, args.encoding)
}

// ---------------------------------------------------------------------------

pub struct Identified {
    pub selection: SelectionFile,
    pub silent: SilentReport,
    pub probabilities: ProbabilityTable,
}

fn trace_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    found.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == files::TRACE_EXTENSION));
    found.sort();
    if found.is_empty() {
        return Err(CliError::usage(format!("{}: no .{} trace files", dir.display(), files::TRACE_EXTENSION)));
    }
    Ok(found)
}

pub fn identify_dir(dir: &Path, percentile: f64, tau: f64, scope: Scope) -> CliResult<Identified> {
    check_selection_args(percentile, tau)?;
    require_dir(dir)?;
    let manifest_path = dir.join(files::MANIFEST_FILE);
    let manifest = CorpusManifest::load(&read_text(&manifest_path)?)
        .map_err(|e| CliError::from(e).context(manifest_path.display()))?;
    let mut counters = ActivationCounters::new(&manifest);
    let mut seen = BTreeSet::new();
    for path in trace_files(dir)? {
        let reader = TraceReader::new(BufReader::new(fs::File::open(&path)?))
            .map_err(|e| CliError::from(e).context(path.display()))?;
        for record in reader {
            let record = record.map_err(|e| CliError::from(e).context(path.display()))?;
            record.check(&manifest).map_err(|e| CliError::from(e).context(path.display()))?;
            counters.accumulate(&record).map_err(|e| CliError::from(e).context(path.display()))?;
            if record.payload.totals().0 > 0 {
                seen.insert(record.domain_id);
            }
        }
    }
    let missing: Vec<&str> = manifest
        .domains
        .iter()
        .filter(|d| !seen.contains(&d.id))
        .map(|d| d.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::usage(format!("traces do not cover domains: {}", missing.join(", "))));
    }

    let probabilities = counters.activation_probabilities();
    let table = DapeTable::from_probabilities(&probabilities);
    log::info!("{} neurons scored, {} excluded", table.entries().len(), table.excluded().len());
    let selection = select_bottom(&table, percentile, scope.into())?;
    let assignment = assign_domains(&selection, &probabilities, tau)?;
    let names: Vec<String> = manifest.domains.iter().map(|d| d.name.clone()).collect();
    Ok(Identified {
        selection: SelectionFile::new(&selection, &assignment, table.shape(), &names)?,
        silent: counters.detect_silent(),
        probabilities,
    })
}

fn write_identified(found: &Identified, out: &Path, probabilities: Option<&Path>) -> CliResult<()> {
    write_atomic(out, found.selection.save()?.as_bytes())?;
    write_atomic(&files::silent_report_path(out), found.silent.save()?.as_bytes())?;
    if let Some(path) = probabilities {
        let mut buf = Vec::new();
        write_probabilities_csv(&found.probabilities, &mut buf)?;
        write_atomic(path, &buf)?;
    }
    Ok(())
}

pub fn identify(args: &IdentifyArgs) -> CliResult<()> {
    let found = identify_dir(&args.traces, args.percentile, args.tau, args.scope)?;
    write_identified(&found, &args.out, args.probabilities.as_deref())
}

// ---------------------------------------------------------------------------

pub fn entropy_over(model: &ModelParams, corpus: &SynthCorpus) -> CliResult<EntropyCurve> {
    let mut acc = EntropyAccumulator::new(model.config.n_layers);
    for t in run_all(model, &corpus.inputs(), None)? {
        acc.add(model, &t)?;
    }
    Ok(acc.finish())
}

pub fn lens(args: &LensArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.corpus)?;
    check_compatible(&model.config, &corpus)?;
    let sample = corpus.samples.get(args.sample).ok_or_else(|| {
        CliError::usage(format!("--sample {} out of range ({} samples)", args.sample, corpus.samples.len()))
    })?;
    let trace = sample.input.run(&model, None)?;
    let dists = heatmap(&model, &trace, args.position, args.top_k)?;
    let mut buf = Vec::new();
    write_heatmap_csv(&heatmap_rows(&dists, &corpus.spec.vocab()), &mut buf)?;
    let curves = args.curves.as_ref().map(|_| entropy_over(&model, &corpus)).transpose()?;

    write_atomic(&args.out, &buf)?;
    if let (Some(path), Some(curve)) = (&args.curves, curves) {
        write_atomic(path, curve.save()?.as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn deviation_report(
    model: &ModelParams,
    selection: &SelectionFile,
    corpus: &SynthCorpus,
    trials: usize,
    steps: usize,
    seed: u64,
) -> CliResult<DeviationReport> {
    let config = &model.config;
    check_compatible(config, corpus)?;
    let shape_matches = selection.modules.len() == 1
        && selection.modules.iter().zip(config.modules()).all(|(a, b)| {
            a.name == b.name && a.layer_count == b.layer_count && a.neurons_per_layer == b.neurons_per_layer
        });
    if !shape_matches {
        let got: Vec<String> = selection
            .modules
            .iter()
            .map(|m| format!("{} {}x{}", m.name, m.layer_count, m.neurons_per_layer))
            .collect();
        return Err(CliError::usage(format!(
            "selection covers [{}] but the model has {LLM_MODULE} {}x{}",
            got.join(", "),
            config.n_layers,
            config.ffn_size
        )));
    }
    if selection.domain_counts.len() != usize::from(corpus.spec.domains) {
        return Err(CliError::usage(format!(
            "selection has {} domains, corpus {}",
            selection.domain_counts.len(),
            corpus.spec.domains
        )));
    }
    if trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }

    let vocab = corpus.spec.vocab();
    let mut domains = Vec::new();
    for dc in &selection.domain_counts {
        let inputs = corpus.domain_inputs(dc.domain);
        let mask = DeactivationMask::from_neurons(config, selection.neurons_for(Some(dc.domain)))?;
        let outcome = deviation_experiment(model, &inputs, &mask, trials, seed)?;
        let metrics = if steps > 0 {
            let (top1, anls) = agreement_metrics(model, &inputs, &mask, &vocab, steps)?;
            vec![top1, anls]
        } else {
            Vec::new()
        };
        log::info!(
            "{}: {} neurons, deviation {:.6} vs random {:.6}",
            dc.name,
            mask.count(),
            outcome.target,
            outcome.baseline.mean
        );
        domains.push(DomainDeviation {
            domain: dc.domain,
            name: dc.name.clone(),
            samples: inputs.len(),
            positions: outcome.positions,
            mask_neurons: vec![ModuleNeuronCount { module: LLM_MODULE.into(), neurons: mask.count() }],
            target: outcome.target,
            random: outcome.baseline,
            metrics,
        });
    }
    Ok(DeviationReport::new(seed, trials, domains))
}

pub fn deviate(args: &DeviateArgs, seed: u64) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let selection = SelectionFile::load(&read_text(&args.selection)?)
        .map_err(|e| CliError::from(e).context(args.selection.display()))?;
    let corpus = load_corpus(&args.corpus)?;
    let report = deviation_report(&model, &selection, &corpus, args.trials, args.steps, seed)?;
    write_atomic(&args.out, report.save()?.as_bytes())
}

// ---------------------------------------------------------------------------

pub fn report(args: &ReportArgs) -> CliResult<()> {
    let out = args.out.clone().unwrap_or_else(|| args.dir.clone());
    report::write(&args.dir, &out)
}

pub fn pipeline(args: &PipelineArgs, seed: u64) -> CliResult<()> {
    check_selection_args(args.percentile, args.tau)?;
    if args.trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.corpus)?;
    check_compatible(&model.config, &corpus)?;

    let traces = args.out.join(files::TRACES_DIR);
    write_traces(&args.model, &model, &corpus, &traces, args.encoding)?;
    let found = identify_dir(&traces, args.percentile, args.tau, args.scope)?;
    let selection_path = args.out.join(files::SELECTION_FILE);
    write_identified(&found, &selection_path, None)?;
    let deviations = deviation_report(&model, &found.selection, &corpus, args.trials, args.steps, seed)?;
    write_atomic(&args.out.join(files::DEVIATION_FILE), deviations.save()?.as_bytes())?;
    let curve = entropy_over(&model, &corpus)?;
    write_atomic(&args.out.join(files::ENTROPY_FILE), curve.save()?.as_bytes())?;
    report::write(&args.out, &args.out)
}
