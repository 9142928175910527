// SPDX-License-Identifier: MIT OR Apache-2.0

//! Consolidated report over the artifacts of one run: selection counts per
//! domain, deviations against random masks and lens entropy curves. Written as
//! TOML plus a Markdown rendering of the same content.

use std::fmt::Write as _;
use std::path::Path;

use domain_neurons::dape::{DomainCount, SelectionFile, SelectionScope};
use domain_neurons::lens::EntropyCurve;
use domain_neurons::perturb::{DeviationReport, Metric};
use domain_neurons::stats::SilentReport;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::{self, read_text, require_dir, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleRow {
    pub name: String,
    pub population: usize,
    pub scored: usize,
    pub selected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    pub percentile: f64,
    pub tau: f64,
    pub scope: String,
    pub unassigned: usize,
    pub multi_assigned: usize,
    pub modules: Vec<ModuleRow>,
    pub domains: Vec<DomainCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationRow {
    pub name: String,
    pub neurons: usize,
    pub target: f64,
    pub random_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anls: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationSection {
    pub seed: u64,
    pub trials: usize,
    pub domains: Vec<DeviationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    /// Artifacts that were looked for and not found.
    pub missing: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<DeviationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyCurve>,
}

fn load_optional<T>(dir: &Path, name: &str, parse: impl Fn(&str) -> domain_neurons::Result<T>) -> CliResult<Option<T>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Ok(None);
    }
    parse(&read_text(&path)?).map(Some).map_err(|e| CliError::from(e).context(path.display()))
}

fn selection_section(sel: SelectionFile, silent: Option<SilentReport>) -> SelectionSection {
    let modules = sel
        .modules
        .iter()
        .map(|m| ModuleRow {
            name: m.name.clone(),
            population: usize::from(m.layer_count) * m.neurons_per_layer as usize,
            scored: m.scored,
            selected: m.selected,
            silent: silent
                .as_ref()
                .and_then(|s| s.modules.iter().find(|x| x.name == m.name))
                .map(|x| x.silent),
        })
        .collect();
    SelectionSection {
        percentile: sel.percentile,
        tau: sel.tau,
        scope: match sel.scope {
            SelectionScope::PerModule => "per-module".into(),
            SelectionScope::Global => "global".into(),
        },
        unassigned: sel.unassigned,
        multi_assigned: sel.multi_assigned,
        modules,
        domains: sel.domain_counts,
    }
}

fn deviation_section(dev: DeviationReport) -> DeviationSection {
    let metric = |m: &[domain_neurons::perturb::EvalResult], which: Metric| {
        m.iter().find(|r| r.metric == which).map(|r| r.value)
    };
    DeviationSection {
        seed: dev.seed,
        trials: dev.trials,
        domains: dev
            .domains
            .into_iter()
            .map(|d| DeviationRow {
                neurons: d.mask_neurons.iter().map(|m| m.neurons).sum(),
                target: d.target,
                random_mean: d.random.mean,
                random_std: d.random.std,
                top1_accuracy: metric(&d.metrics, Metric::Top1Accuracy),
                anls: metric(&d.metrics, Metric::Anls),
                name: d.name,
            })
            .collect(),
    }
}

/// Collect whatever artifacts `dir` holds. Fails only if there are none.
pub fn build(dir: &Path) -> CliResult<Report> {
    require_dir(dir)?;
    let selection = load_optional(dir, files::SELECTION_FILE, SelectionFile::load)?;
    let silent_name = files::silent_report_path(Path::new(files::SELECTION_FILE));
    let silent = load_optional(dir, &silent_name.to_string_lossy(), SilentReport::load)?;
    let deviation = load_optional(dir, files::DEVIATION_FILE, DeviationReport::load)?;
    let entropy = load_optional(dir, files::ENTROPY_FILE, EntropyCurve::load)?;
    if selection.is_none() && deviation.is_none() && entropy.is_none() {
        return Err(CliError::usage(format!(
            "{}: none of {}, {}, {} found",
            dir.display(),
            files::SELECTION_FILE,
            files::DEVIATION_FILE,
            files::ENTROPY_FILE
        )));
    }
    let mut missing = Vec::new();
    for (present, name) in [
        (selection.is_some(), files::SELECTION_FILE),
        (deviation.is_some(), files::DEVIATION_FILE),
        (entropy.is_some(), files::ENTROPY_FILE),
    ] {
        if !present {
            log::warn!("{name} not found in {}", dir.display());
            missing.push(name.to_string());
        }
    }
    Ok(Report {
        missing,
        selection: selection.map(|s| selection_section(s, silent)),
        deviation: deviation.map(deviation_section),
        entropy,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn render_markdown(r: &Report) -> String {
    let mut s = String::from("# Domain neuron report\n");
    if let Some(sel) = &r.selection {
        let _ = writeln!(s, "\n## Domain-specific neurons\n");
        let _ = writeln!(
            s,
            "Bottom {}% by DAPE ({} scope), assigned where p > {}.\n",
            sel.percentile, sel.scope, sel.tau
        );
        s.push_str("| module | population | scored | selected | silent |\n|---|---:|---:|---:|---:|\n");
        for m in &sel.modules {
            let silent = m.silent.map_or_else(|| "n/a".into(), |v| v.to_string());
            let _ = writeln!(s, "| {} | {} | {} | {} | {} |", m.name, m.population, m.scored, m.selected, silent);
        }
        s.push_str("\n| domain | neurons |\n|---|---:|\n");
        for d in &sel.domains {
            let _ = writeln!(s, "| {} | {} |", d.name, d.neurons);
        }
        let _ = writeln!(s, "| (unassigned) | {} |", sel.unassigned);
        let _ = writeln!(s, "| (several domains) | {} |", sel.multi_assigned);
    }
    if let Some(dev) = &r.deviation {
        let _ = writeln!(s, "\n## Deviation after deactivation\n");
        let _ = writeln!(s, "Seed {}, {} random masks per domain.\n", dev.seed, dev.trials);
        s.push_str("| domain | neurons | target | random mean | random std | top-1 | ANLS |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
        for d in &dev.domains {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {} | {} | {} |",
                d.name,
                d.neurons,
                d.target,
                d.random_mean,
                opt(d.random_std),
                opt(d.top1_accuracy),
                opt(d.anls)
            );
        }
    }
    if let Some(e) = &r.entropy {
        let _ = writeln!(s, "\n## Logit-lens entropy ({})\n", e.unit);
        let _ = writeln!(s, "{} image and {} text positions.\n", e.image_positions, e.text_positions);
        s.push_str("| layer | image | text |\n|---:|---:|---:|\n");
        for p in &e.layers {
            let _ = writeln!(s, "| {} | {} | {} |", p.layer, opt(p.image), opt(p.text));
        }
    }
    if !r.missing.is_empty() {
        let _ = writeln!(s, "\nMissing artifacts: {}.", r.missing.join(", "));
    }
    s
}

/// Build the report from `dir` and write both renderings into `out`.
pub fn write(dir: &Path, out: &Path) -> CliResult<()> {
    let report = build(dir)?;
    let text = toml::to_string(&report).map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&out.join(files::REPORT_FILE), text.as_bytes())?;
    write_atomic(&out.join(files::REPORT_TEXT_FILE), render_markdown(&report).as_bytes())
}
