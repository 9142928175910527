// SPDX-License-Identifier: MIT OR Apache-2.0

//! Streaming per-neuron, per-domain activation counters.
//!
//! For every neuron `u` and domain `i` the counters hold `M[u,i]`, the number
//! of tokens on which `u` fired, and `N[u,i]`, the number of tokens it was
//! observed on. Counters are dense arrays sized from the manifest and merge by
//! component-wise addition, so shards can be aggregated independently.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dape::ProbabilityTable;
use crate::error::{Error, Result};
use crate::trace_store::{CorpusManifest, ModuleSpec, TraceRecord};

/// Address of one FFN activation unit. Ordered lexicographically by
/// `(module, layer, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub module: u16,
    pub layer: u16,
    pub index: u32,
}

impl NeuronId {
    pub fn new(module: u16, layer: u16, index: u32) -> Self {
        Self {
            module,
            layer,
            index,
        }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.module, self.layer, self.index)
    }
}

/// Module populations and domain count shared by counters and the tables
/// derived from them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopulationShape {
    pub domains: usize,
    pub modules: Vec<ModuleSpec>,
    offsets: Vec<usize>,
}

impl PopulationShape {
    pub fn new(domains: usize, modules: Vec<ModuleSpec>) -> Self {
        let mut offsets = Vec::with_capacity(modules.len());
        let mut acc = 0;
        for m in &modules {
            offsets.push(acc);
            acc += m.population();
        }
        Self {
            domains,
            modules,
            offsets,
        }
    }

    pub fn from_manifest(manifest: &CorpusManifest) -> Self {
        Self::new(manifest.domain_count(), manifest.modules.clone())
    }

    /// Total neurons across all modules.
    pub fn population(&self) -> usize {
        self.modules.iter().map(ModuleSpec::population).sum()
    }

    pub fn flat_index(&self, id: NeuronId) -> Option<usize> {
        let m = self.modules.get(usize::from(id.module))?;
        if id.layer >= m.layer_count || id.index >= m.neurons_per_layer {
            return None;
        }
        Some(
            self.offsets[usize::from(id.module)]
                + usize::from(id.layer) * m.neurons_per_layer as usize
                + id.index as usize,
        )
    }

    pub fn neuron_at(&self, flat: usize) -> NeuronId {
        let module = self.offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - self.offsets[module];
        let s = self.modules[module].neurons_per_layer as usize;
        NeuronId::new(module as u16, (local / s) as u16, (local % s) as u32)
    }

    /// Flat index range covered by one module.
    pub fn module_range(&self, module: u16) -> std::ops::Range<usize> {
        let m = usize::from(module);
        self.offsets[m]..self.offsets[m] + self.modules[m].population()
    }

    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (0..self.population()).map(|i| self.neuron_at(i))
    }
}

/// Dense `(M, N)` counters for every neuron and domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationCounters {
    shape: PopulationShape,
    active: Vec<u64>,
    total: Vec<u64>,
}

impl ActivationCounters {
    pub fn new(manifest: &CorpusManifest) -> Self {
        Self::with_shape(PopulationShape::from_manifest(manifest))
    }

    pub fn with_shape(shape: PopulationShape) -> Self {
        let cells = shape.population() * shape.domains;
        Self {
            shape,
            active: vec![0; cells],
            total: vec![0; cells],
        }
    }

    pub fn shape(&self) -> &PopulationShape {
        &self.shape
    }

    fn cell(&self, flat: usize, domain: usize) -> usize {
        flat * self.shape.domains + domain
    }

    /// `M[u, domain]`.
    pub fn activations(&self, id: NeuronId, domain: u16) -> Option<u64> {
        let flat = self.shape.flat_index(id)?;
        (usize::from(domain) < self.shape.domains).then(|| self.active[self.cell(flat, domain.into())])
    }

    /// `N[u, domain]`.
    pub fn tokens(&self, id: NeuronId, domain: u16) -> Option<u64> {
        let flat = self.shape.flat_index(id)?;
        (usize::from(domain) < self.shape.domains).then(|| self.total[self.cell(flat, domain.into())])
    }

    /// Fold one record into the counters. On error nothing is modified.
    pub fn accumulate(&mut self, record: &TraceRecord) -> Result<()> {
        let domain = usize::from(record.domain_id);
        if domain >= self.shape.domains {
            return Err(Error::shape(format!(
                "record domain {} outside {} domains",
                record.domain_id, self.shape.domains
            )));
        }
        let module = self.shape.modules.get(usize::from(record.module_id)).ok_or_else(|| {
            Error::shape(format!("record module {} not in manifest", record.module_id))
        })?;
        if record.layer >= module.layer_count || record.neurons() != module.neurons_per_layer {
            return Err(Error::shape(format!(
                "record layer {} with {} neurons does not fit module {:?}",
                record.layer,
                record.neurons(),
                module.name
            )));
        }
        let base = self
            .shape
            .flat_index(NeuronId::new(record.module_id, record.layer, 0))
            .expect("checked above");
        let (tokens, counts) = record.payload.totals();

        let cells: Vec<usize> = (0..counts.len()).map(|j| self.cell(base + j, domain)).collect();
        for (j, &c) in cells.iter().enumerate() {
            if self.active[c].checked_add(counts[j]).is_none()
                || self.total[c].checked_add(tokens).is_none()
            {
                return Err(Error::Overflow(format!(
                    "neuron {} domain {domain}",
                    NeuronId::new(record.module_id, record.layer, j as u32)
                )));
            }
        }
        for (j, &c) in cells.iter().enumerate() {
            self.active[c] += counts[j];
            self.total[c] += tokens;
        }
        Ok(())
    }

    /// Component-wise sum of two counter sets over the same shape.
    pub fn merge(&self, other: &ActivationCounters) -> Result<ActivationCounters> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    pub fn merge_from(&mut self, other: &ActivationCounters) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("cannot merge counters bound to different manifests"));
        }
        let overflow = |a: &[u64], b: &[u64]| a.iter().zip(b).position(|(x, y)| x.checked_add(*y).is_none());
        if let Some(c) = overflow(&self.active, &other.active).or_else(|| overflow(&self.total, &other.total)) {
            return Err(Error::Overflow(format!(
                "merging neuron {}",
                self.shape.neuron_at(c / self.shape.domains)
            )));
        }
        for (a, b) in self.active.iter_mut().zip(&other.active) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
        Ok(())
    }

    /// `p[u,i] = M[u,i] / N[u,i]`, absent where `N[u,i] = 0`.
    pub fn activation_probabilities(&self) -> ProbabilityTable {
        let cells = self
            .active
            .iter()
            .zip(&self.total)
            .map(|(&m, &n)| (n > 0).then(|| m as f64 / n as f64))
            .collect();
        ProbabilityTable::from_cells(self.shape.clone(), cells).expect("cell count matches shape")
    }

    /// Neurons observed at least once that never fired in any domain.
    pub fn detect_silent(&self) -> SilentReport {
        let k = self.shape.domains;
        let mut neurons = Vec::new();
        let mut per_module = vec![0usize; self.shape.modules.len()];
        for flat in 0..self.shape.population() {
            let cells = flat * k..(flat + 1) * k;
            let seen: u64 = self.total[cells.clone()].iter().sum();
            let fired: u64 = self.active[cells].iter().sum();
            if seen > 0 && fired == 0 {
                let id = self.shape.neuron_at(flat);
                per_module[usize::from(id.module)] += 1;
                neurons.push(id);
            }
        }
        let modules = self
            .shape
            .modules
            .iter()
            .zip(per_module)
            .map(|(m, silent)| ModuleSilence {
                name: m.name.clone(),
                population: m.population(),
                silent,
                ratio: silent as f64 / m.population() as f64,
            })
            .collect();
        SilentReport { neurons, modules }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSilence {
    pub name: String,
    pub population: usize,
    pub silent: usize,
    pub ratio: f64,
}

/// Neurons that never fire on any input, with per-module ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SilentReport {
    pub neurons: Vec<NeuronId>,
    pub modules: Vec<ModuleSilence>,
}

impl SilentReport {
    pub fn save(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Format a probability with 10 significant digits.
pub fn sig10(v: f64) -> String {
    format!("{v:.9e}")
}

/// CSV export: `module,layer,index,p_domain0,...`, absent cells written as `NA`.
pub fn write_probabilities_csv<W: Write>(table: &ProbabilityTable, sink: W) -> Result<()> {
    let shape = table.shape();
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["module".to_string(), "layer".into(), "index".into()];
    header.extend((0..shape.domains).map(|i| format!("p_domain{i}")));
    w.write_record(&header)?;
    for (flat, id) in shape.neurons().enumerate() {
        let mut row = vec![
            shape.modules[usize::from(id.module)].name.clone(),
            id.layer.to_string(),
            id.index.to_string(),
        ];
        row.extend(
            table
                .row_flat(flat)
                .iter()
                .map(|c| c.map_or_else(|| "NA".to_string(), sig10)),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
