// SPDX-License-Identifier: MIT OR Apache-2.0

//! Domain activation probability entropy (DAPE).
//!
//! Each neuron's per-domain activation probabilities `(p_1, ..., p_k)` are
//! L1-normalised into a distribution and scored by its Shannon entropy in
//! nats. Neurons with the lowest entropy fire preferentially for one or two
//! domains; the bottom percentile within each module is selected as
//! domain-specific, and each selected neuron is assigned every domain whose
//! raw probability exceeds a threshold `tau`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{NeuronId, PopulationShape};

/// Per-neuron raw activation probabilities, `None` where a domain was never observed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    shape: PopulationShape,
    cells: Vec<Option<f64>>,
}

impl ProbabilityTable {
    pub fn from_cells(shape: PopulationShape, cells: Vec<Option<f64>>) -> Result<Self> {
        if cells.len() != shape.population() * shape.domains {
            return Err(Error::shape(format!(
                "{} cells for {} neurons x {} domains",
                cells.len(),
                shape.population(),
                shape.domains
            )));
        }
        if let Some(bad) = cells.iter().flatten().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self { shape, cells })
    }

    pub fn shape(&self) -> &PopulationShape {
        &self.shape
    }

    pub fn row_flat(&self, flat: usize) -> &[Option<f64>] {
        let k = self.shape.domains;
        &self.cells[flat * k..(flat + 1) * k]
    }

    pub fn row(&self, id: NeuronId) -> Option<&[Option<f64>]> {
        self.shape.flat_index(id).map(|f| self.row_flat(f))
    }

    pub fn get(&self, id: NeuronId, domain: u16) -> Option<Option<f64>> {
        self.row(id).and_then(|r| r.get(usize::from(domain)).copied())
    }
}

/// Why a neuron cannot be scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unscorable {
    /// All probabilities are zero.
    #[error("neuron never fires (silent)")]
    Silent,
    /// At least one domain has no observations.
    #[error("neuron has an unobserved domain")]
    Incomplete,
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
///
/// Shared by DAPE scoring and logit-lens entropies.
pub fn entropy_nats(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h + 0.0
}

/// L1-normalise a raw probability vector.
pub fn normalize(raw: &[Option<f64>]) -> std::result::Result<Vec<f64>, Unscorable> {
    let defined: Vec<f64> = raw
        .iter()
        .map(|c| c.ok_or(Unscorable::Incomplete))
        .collect::<std::result::Result<_, _>>()?;
    let sum: f64 = defined.iter().sum();
    if sum <= 0.0 {
        return Err(Unscorable::Silent);
    }
    Ok(defined.iter().map(|p| p / sum).collect())
}

/// Entropy of a normalised distribution, clamped to `[0, ln k]`.
pub fn dape_score(normalized: &[f64]) -> Result<f64> {
    if normalized.is_empty() {
        return Err(Error::Domain("empty distribution".into()));
    }
    if let Some(bad) = normalized.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::Domain(format!("invalid probability {bad}")));
    }
    let sum: f64 = normalized.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("distribution sums to {sum}, not 1")));
    }
    let max = (normalized.len() as f64).ln();
    Ok(entropy_nats(normalized).clamp(0.0, max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DapeEntry {
    pub neuron: NeuronId,
    pub normalized: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Excluded {
    pub neuron: NeuronId,
    pub reason: Unscorable,
}

/// DAPE scores for every scorable neuron, plus the neurons left out.
#[derive(Debug, Clone, PartialEq)]
pub struct DapeTable {
    shape: PopulationShape,
    entries: Vec<DapeEntry>,
    excluded: Vec<Excluded>,
}

impl DapeTable {
    pub fn from_probabilities(probs: &ProbabilityTable) -> Self {
        let shape = probs.shape().clone();
        let mut entries = Vec::new();
        let mut excluded = Vec::new();
        for (flat, neuron) in shape.neurons().enumerate() {
            match normalize(probs.row_flat(flat)) {
                Ok(normalized) => {
                    let score = dape_score(&normalized).expect("normalised row is a distribution");
                    entries.push(DapeEntry {
                        neuron,
                        normalized,
                        score,
                    });
                }
                Err(reason) => excluded.push(Excluded { neuron, reason }),
            }
        }
        Self {
            shape,
            entries,
            excluded,
        }
    }

    /// Build a table from precomputed scores (entries need not be sorted).
    pub fn from_entries(shape: PopulationShape, mut entries: Vec<DapeEntry>) -> Result<Self> {
        for e in &entries {
            if shape.flat_index(e.neuron).is_none() {
                return Err(Error::shape(format!("neuron {} outside population", e.neuron)));
            }
        }
        entries.sort_by_key(|e| e.neuron);
        if entries.windows(2).any(|w| w[0].neuron == w[1].neuron) {
            return Err(Error::arg("duplicate neuron in DAPE entries"));
        }
        Ok(Self {
            shape,
            entries,
            excluded: Vec::new(),
        })
    }

    pub fn shape(&self) -> &PopulationShape {
        &self.shape
    }

    pub fn entries(&self) -> &[DapeEntry] {
        &self.entries
    }

    pub fn excluded(&self) -> &[Excluded] {
        &self.excluded
    }

    pub fn score(&self, id: NeuronId) -> Option<f64> {
        self.entries
            .binary_search_by_key(&id, |e| e.neuron)
            .ok()
            .map(|i| self.entries[i].score)
    }

    pub fn scored_in_module(&self, module: u16) -> usize {
        self.entries.iter().filter(|e| e.neuron.module == module).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionScope {
    PerModule,
    Global,
}

/// Identifier of the deterministic ordering used by [`select_bottom`].
pub const TIE_BREAK_RULE: &str = "dape-asc-then-neuron-id-asc";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedNeuron {
    pub neuron: NeuronId,
    pub dape: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleSelectionCount {
    pub module: u16,
    pub scored: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronSelection {
    pub percentile: f64,
    pub scope: SelectionScope,
    pub tie_break: &'static str,
    /// Sorted by neuron id.
    pub selected: Vec<SelectedNeuron>,
    pub module_counts: Vec<ModuleSelectionCount>,
}

impl NeuronSelection {
    pub fn contains(&self, id: NeuronId) -> bool {
        self.selected.binary_search_by_key(&id, |s| s.neuron).is_ok()
    }

    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        self.selected.iter().map(|s| s.neuron)
    }
}

/// `floor(percentile / 100 * n)`.
pub fn selection_count(percentile: f64, n: usize) -> usize {
    (percentile * n as f64 / 100.0).floor() as usize
}

fn rank(a: &DapeEntry, b: &DapeEntry) -> Ordering {
    a.score.total_cmp(&b.score).then(a.neuron.cmp(&b.neuron))
}

/// Select the lowest-DAPE neurons, per module or over the whole population.
pub fn select_bottom(
    table: &DapeTable,
    percentile: f64,
    scope: SelectionScope,
) -> Result<NeuronSelection> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::arg(format!("percentile {percentile} outside (0, 100]")));
    }
    let modules = table.shape.modules.len() as u16;
    let mut selected: Vec<SelectedNeuron> = Vec::new();
    let pick = |pool: &mut Vec<&DapeEntry>, out: &mut Vec<SelectedNeuron>| {
        let n = selection_count(percentile, pool.len());
        pool.sort_by(|a, b| rank(a, b));
        out.extend(pool[..n].iter().map(|e| SelectedNeuron {
            neuron: e.neuron,
            dape: e.score,
        }));
    };
    match scope {
        SelectionScope::PerModule => {
            for m in 0..modules {
                let mut pool: Vec<&DapeEntry> =
                    table.entries.iter().filter(|e| e.neuron.module == m).collect();
                pick(&mut pool, &mut selected);
            }
        }
        SelectionScope::Global => {
            let mut pool: Vec<&DapeEntry> = table.entries.iter().collect();
            pick(&mut pool, &mut selected);
        }
    }
    selected.sort_by_key(|s| s.neuron);
    let module_counts = (0..modules)
        .map(|m| ModuleSelectionCount {
            module: m,
            scored: table.scored_in_module(m),
            selected: selected.iter().filter(|s| s.neuron.module == m).count(),
        })
        .collect();
    Ok(NeuronSelection {
        percentile,
        scope,
        tie_break: TIE_BREAK_RULE,
        selected,
        module_counts,
    })
}

/// Map of selected neuron to the domains it is specific to.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainAssignment {
    pub tau: f64,
    pub assignments: BTreeMap<NeuronId, Vec<u16>>,
    /// Neurons assigned to each domain (a neuron may count for several).
    pub per_domain: Vec<usize>,
    pub unassigned: usize,
    pub multi_assigned: usize,
}

/// Assign each selected neuron every domain `j` with raw `p[u,j] > tau`.
pub fn assign_domains(
    selection: &NeuronSelection,
    probs: &ProbabilityTable,
    tau: f64,
) -> Result<DomainAssignment> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::arg(format!("tau {tau} outside (0, 1)")));
    }
    let k = probs.shape().domains;
    let mut assignments = BTreeMap::new();
    let mut per_domain = vec![0; k];
    let (mut unassigned, mut multi) = (0, 0);
    for id in selection.neurons() {
        let row = probs
            .row(id)
            .ok_or_else(|| Error::arg(format!("selected neuron {id} missing from probabilities")))?;
        let domains: Vec<u16> = row
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_some_and(|p| p > tau))
            .map(|(j, _)| j as u16)
            .collect();
        for &d in &domains {
            per_domain[usize::from(d)] += 1;
        }
        match domains.len() {
            0 => unassigned += 1,
            1 => {}
            _ => multi += 1,
        }
        assignments.insert(id, domains);
    }
    Ok(DomainAssignment {
        tau,
        assignments,
        per_domain,
        unassigned,
        multi_assigned: multi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionModule {
    pub name: String,
    pub layer_count: u16,
    pub neurons_per_layer: u32,
    pub scored: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainCount {
    pub domain: u16,
    pub name: String,
    pub neurons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRecord {
    pub module: u16,
    pub layer: u16,
    pub index: u32,
    pub dape: f64,
    pub domains: Vec<u16>,
}

impl SelectionRecord {
    pub fn neuron(&self) -> NeuronId {
        NeuronId::new(self.module, self.layer, self.index)
    }
}

/// On-disk selection result: settings, per-module and per-domain counts, and
/// one record per selected neuron in neuron-id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionFile {
    pub percentile: f64,
    pub tau: f64,
    pub scope: SelectionScope,
    pub tie_break: String,
    pub modules: Vec<SelectionModule>,
    pub domain_counts: Vec<DomainCount>,
    pub unassigned: usize,
    pub multi_assigned: usize,
    pub neurons: Vec<SelectionRecord>,
}

impl SelectionFile {
    pub fn new(
        selection: &NeuronSelection,
        assignment: &DomainAssignment,
        shape: &PopulationShape,
        domain_names: &[String],
    ) -> Result<Self> {
        if domain_names.len() != shape.domains {
            return Err(Error::shape(format!(
                "{} domain names for {} domains",
                domain_names.len(),
                shape.domains
            )));
        }
        let modules = shape
            .modules
            .iter()
            .zip(&selection.module_counts)
            .map(|(m, c)| SelectionModule {
                name: m.name.clone(),
                layer_count: m.layer_count,
                neurons_per_layer: m.neurons_per_layer,
                scored: c.scored,
                selected: c.selected,
            })
            .collect();
        let domain_counts = domain_names
            .iter()
            .enumerate()
            .map(|(d, name)| DomainCount {
                domain: d as u16,
                name: name.clone(),
                neurons: assignment.per_domain[d],
            })
            .collect();
        let neurons = selection
            .selected
            .iter()
            .map(|s| SelectionRecord {
                module: s.neuron.module,
                layer: s.neuron.layer,
                index: s.neuron.index,
                dape: s.dape,
                domains: assignment.assignments.get(&s.neuron).cloned().unwrap_or_default(),
            })
            .collect();
        Ok(Self {
            percentile: selection.percentile,
            tau: assignment.tau,
            scope: selection.scope,
            tie_break: selection.tie_break.to_string(),
            modules,
            domain_counts,
            unassigned: assignment.unassigned,
            multi_assigned: assignment.multi_assigned,
            neurons,
        })
    }

    pub fn save(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(text: &str) -> Result<Self> {
        let file: SelectionFile = toml::from_str(text)?;
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<()> {
        if self.neurons.windows(2).any(|w| w[0].neuron() >= w[1].neuron()) {
            return Err(Error::doc("selection records must be strictly ordered by neuron id"));
        }
        for (m, spec) in self.modules.iter().enumerate() {
            let listed = self.neurons.iter().filter(|r| usize::from(r.module) == m).count();
            if listed != spec.selected {
                return Err(Error::doc(format!(
                    "module {:?} declares {} selected neurons but lists {listed}",
                    spec.name, spec.selected
                )));
            }
        }
        let k = self.domain_counts.len() as u16;
        for r in &self.neurons {
            let m = self.modules.get(usize::from(r.module)).ok_or_else(|| {
                Error::doc(format!("record module {} not declared", r.module))
            })?;
            if r.layer >= m.layer_count || r.index >= m.neurons_per_layer {
                return Err(Error::doc(format!("record {} outside module {:?}", r.neuron(), m.name)));
            }
            if let Some(d) = r.domains.iter().find(|&&d| d >= k) {
                return Err(Error::doc(format!("record {} names unknown domain {d}", r.neuron())));
            }
        }
        Ok(())
    }

    /// Selected neurons assigned to `domain`, or all selected neurons for `None`.
    pub fn neurons_for(&self, domain: Option<u16>) -> Vec<NeuronId> {
        self.neurons
            .iter()
            .filter(|r| domain.is_none_or(|d| r.domains.contains(&d)))
            .map(SelectionRecord::neuron)
            .collect()
    }
}
