// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats that decouple data collection from analysis.
//!
//! Three artifacts live here:
//!
//! - [`CorpusManifest`]: a TOML document naming the model, its neuron
//!   modules, the domains and the token types.
//! - Activation traces: a binary stream (`MMNT` magic, version `0x01`) of
//!   self-delimiting [`TraceRecord`]s, either raw per-token bitmaps or
//!   pre-aggregated counts.
//! - [`HiddenStateDump`]: one layer's hidden states for a token span, a
//!   length-prefixed TOML header followed by little-endian `f32` values.
//!
//! All integers are little-endian and fixed width.

mod dump;
mod manifest;
mod trace;

pub use dump::HiddenStateDump;
pub use manifest::{CorpusManifest, DomainSpec, ModuleSpec, TokenTypeSpec, MANIFEST_FORMAT_VERSION};
pub use trace::{
    bitmap_len, read_trace, write_trace, write_trace_body, write_trace_header, AggCounts,
    RawBitmaps, RecordKind, TracePayload, TraceReader, TraceRecord, TRACE_MAGIC, TRACE_VERSION,
};

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Write `header` as a `u32` length prefix plus UTF-8 text.
pub(crate) fn write_prefixed_header<W: Write>(sink: &mut W, header: &str) -> Result<u64> {
    let len = u32::try_from(header.len())
        .map_err(|_| Error::arg("header longer than 4 GiB"))?;
    sink.write_all(&len.to_le_bytes())?;
    sink.write_all(header.as_bytes())?;
    Ok(4 + u64::from(len))
}

/// Inverse of [`write_prefixed_header`]. Returns the header text and bytes consumed.
pub(crate) fn read_prefixed_header<R: Read>(source: &mut R) -> Result<(String, u64)> {
    let mut len = [0u8; 4];
    source
        .read_exact(&mut len)
        .map_err(|_| Error::format(0, "missing header length prefix"))?;
    let len = u32::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; len];
    source
        .read_exact(&mut buf)
        .map_err(|_| Error::format(4, format!("header truncated, expected {len} bytes")))?;
    let text = String::from_utf8(buf).map_err(|_| Error::format(4, "header is not UTF-8"))?;
    Ok((text, 4 + len as u64))
}

pub(crate) fn write_f32s<W: Write>(sink: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(source: &mut R, count: usize, offset: u64) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; count * 4];
    source
        .read_exact(&mut buf)
        .map_err(|_| Error::format(offset, format!("payload truncated, expected {count} f32 values")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
