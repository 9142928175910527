// SPDX-License-Identifier: MIT OR Apache-2.0

//! Input loading and atomic output writes.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use domain_neurons::refmodel::ModelParams;
use domain_neurons::synth::SynthCorpus;
use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TRACE_EXTENSION: &str = "mmnt";
pub const SELECTION_FILE: &str = "selection.toml";
pub const DEVIATION_FILE: &str = "deviation.toml";
pub const ENTROPY_FILE: &str = "entropy.toml";
pub const REPORT_FILE: &str = "report.toml";
pub const REPORT_TEXT_FILE: &str = "report.md";
pub const MODEL_FILE: &str = "model.bin";
pub const PLANT_FILE: &str = "plant.toml";
pub const CORPUS_DIR: &str = "corpus";
pub const TRACES_DIR: &str = "traces";

pub fn trace_file_name(domain: u16) -> String {
    format!("domain-{domain}.{TRACE_EXTENSION}")
}

/// `selection.toml` -> `selection.silent.toml`.
pub fn silent_report_path(selection: &Path) -> PathBuf {
    let stem = selection.file_stem().map_or_else(|| "selection".into(), |s| s.to_string_lossy().into_owned());
    selection.with_file_name(format!("{stem}.silent.toml"))
}

fn parent_of(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = parent_of(path);
    fs::create_dir_all(dir).map_err(|e| CliError::from(e).context(dir.display()))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| CliError::from(e).context(dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::from(e.error).context(path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{}: no such file", path.display())))
    }
}

pub fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{}: no such directory", path.display())))
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    require_file(path)?;
    fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn load_model(path: &Path) -> CliResult<ModelParams> {
    require_file(path)?;
    let mut src = BufReader::new(fs::File::open(path)?);
    ModelParams::load(&mut src).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn load_corpus(dir: &Path) -> CliResult<SynthCorpus> {
    require_dir(dir)?;
    SynthCorpus::load(dir).map_err(|e| CliError::from(e).context(dir.display()))
}
