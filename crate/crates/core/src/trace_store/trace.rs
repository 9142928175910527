// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary activation trace stream.
//!
//! ```text
//! stream  := "MMNT" 0x01 record*
//! record  := kind:u8 domain:u16 module:u16 layer:u16 token_type:u8
//!            neurons:u32 payload_len:u64 payload
//! payload := RAW_BITMAP: token_count:u64 (token_count * ceil(neurons/8)) bytes
//!          | AGG_COUNTS: token_total:u64 (neurons * u64) counts
//! ```
//!
//! Bitmaps are LSB-first: neuron `j` is bit `j % 8` of byte `j / 8`. Padding
//! bits past `neurons` must be zero.

use std::io::{self, Read, Write};

use super::CorpusManifest;
use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"MMNT";
pub const TRACE_VERSION: u8 = 0x01;

const RECORD_HEADER_LEN: u64 = 20;

/// Bytes needed for one token's bitmap over `neurons` neurons.
pub fn bitmap_len(neurons: u32) -> usize {
    (neurons as usize).div_ceil(8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    RawBitmap = 0,
    AggCounts = 1,
}

impl RecordKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::RawBitmap),
            1 => Some(Self::AggCounts),
            _ => None,
        }
    }
}

/// Per-token activation bitmaps for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawBitmaps {
    neurons: u32,
    token_count: u64,
    bytes: Vec<u8>,
}

impl RawBitmaps {
    pub fn empty(neurons: u32) -> Self {
        Self {
            neurons,
            token_count: 0,
            bytes: Vec::new(),
        }
    }

    /// Wrap pre-packed bitmaps, checking length and zero padding.
    pub fn from_bytes(neurons: u32, bytes: Vec<u8>) -> Result<Self> {
        let per = bitmap_len(neurons);
        if per == 0 {
            return Err(Error::arg("bitmap record needs at least one neuron"));
        }
        if !bytes.len().is_multiple_of(per) {
            return Err(Error::arg(format!(
                "bitmap bytes {} not a multiple of {per}",
                bytes.len()
            )));
        }
        let raw = Self {
            neurons,
            token_count: (bytes.len() / per) as u64,
            bytes,
        };
        if let Some(token) = raw.first_dirty_padding() {
            return Err(Error::arg(format!("token {token} has non-zero padding bits")));
        }
        Ok(raw)
    }

    /// Append one token whose neuron `j` is active iff `active[j]`.
    pub fn push_token(&mut self, active: &[bool]) -> Result<()> {
        if active.len() != self.neurons as usize {
            return Err(Error::shape(format!(
                "token bitmap has {} neurons, record has {}",
                active.len(),
                self.neurons
            )));
        }
        let start = self.bytes.len();
        self.bytes.resize(start + bitmap_len(self.neurons), 0);
        for (j, _) in active.iter().enumerate().filter(|(_, a)| **a) {
            self.bytes[start + j / 8] |= 1 << (j % 8);
        }
        self.token_count += 1;
        Ok(())
    }

    /// Append one token, marking neurons whose activation value is strictly positive.
    pub fn push_activations(&mut self, values: &[f32]) -> Result<()> {
        let active: Vec<bool> = values.iter().map(|&v| v > 0.0).collect();
        self.push_token(&active)
    }

    pub fn neurons(&self) -> u32 {
        self.neurons
    }

    pub fn token_count(&self) -> u64 {
        self.token_count
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn token(&self, t: usize) -> &[u8] {
        let per = bitmap_len(self.neurons);
        &self.bytes[t * per..(t + 1) * per]
    }

    pub fn is_active(&self, token: usize, neuron: usize) -> bool {
        self.token(token)[neuron / 8] & (1 << (neuron % 8)) != 0
    }

    /// Number of tokens on which each neuron fired.
    pub fn counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.neurons as usize];
        let per = bitmap_len(self.neurons);
        for token in self.bytes.chunks_exact(per) {
            for (byte_idx, &byte) in token.iter().enumerate() {
                let mut bits = byte;
                while bits != 0 {
                    let b = bits.trailing_zeros() as usize;
                    counts[byte_idx * 8 + b] += 1;
                    bits &= bits - 1;
                }
            }
        }
        counts
    }

    fn first_dirty_padding(&self) -> Option<usize> {
        let tail_bits = self.neurons % 8;
        if tail_bits == 0 {
            return None;
        }
        let per = bitmap_len(self.neurons);
        let pad_mask = !((1u8 << tail_bits) - 1);
        self.bytes
            .chunks_exact(per)
            .position(|tok| tok[per - 1] & pad_mask != 0)
    }
}

/// Pre-aggregated activation counts for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggCounts {
    token_total: u64,
    counts: Vec<u64>,
}

impl AggCounts {
    pub fn new(token_total: u64, counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::arg("aggregate record needs at least one neuron"));
        }
        if let Some((j, c)) = counts.iter().enumerate().find(|(_, &c)| c > token_total) {
            return Err(Error::arg(format!(
                "neuron {j}: count {c} exceeds token_total {token_total}"
            )));
        }
        Ok(Self {
            token_total,
            counts,
        })
    }

    pub fn token_total(&self) -> u64 {
        self.token_total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TracePayload {
    Raw(RawBitmaps),
    Agg(AggCounts),
}

impl TracePayload {
    pub fn kind(&self) -> RecordKind {
        match self {
            Self::Raw(_) => RecordKind::RawBitmap,
            Self::Agg(_) => RecordKind::AggCounts,
        }
    }

    pub fn neurons(&self) -> u32 {
        match self {
            Self::Raw(r) => r.neurons,
            Self::Agg(a) => a.counts.len() as u32,
        }
    }

    /// `(token_total, per-neuron activation counts)`.
    pub fn totals(&self) -> (u64, Vec<u64>) {
        match self {
            Self::Raw(r) => (r.token_count, r.counts()),
            Self::Agg(a) => (a.token_total, a.counts.clone()),
        }
    }

    fn encoded_len(&self) -> u64 {
        8 + match self {
            Self::Raw(r) => r.bytes.len() as u64,
            Self::Agg(a) => 8 * a.counts.len() as u64,
        }
    }
}

/// One layer's worth of activation data for one (domain, module, token type).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub domain_id: u16,
    pub module_id: u16,
    pub layer: u16,
    pub token_type: u8,
    pub payload: TracePayload,
}

impl TraceRecord {
    pub fn neurons(&self) -> u32 {
        self.payload.neurons()
    }

    /// Collapse raw bitmaps into counts; aggregate records are returned unchanged.
    pub fn to_aggregate(&self) -> TraceRecord {
        let (total, counts) = self.payload.totals();
        TraceRecord {
            payload: TracePayload::Agg(AggCounts {
                token_total: total,
                counts,
            }),
            ..self.clone()
        }
    }

    /// Check ids and neuron count against a manifest.
    pub fn check(&self, manifest: &CorpusManifest) -> Result<()> {
        if usize::from(self.domain_id) >= manifest.domain_count() {
            return Err(Error::format(
                0,
                format!("domain id {} out of range (k = {})", self.domain_id, manifest.domain_count()),
            ));
        }
        let module = manifest.module(self.module_id).ok_or_else(|| {
            Error::format(0, format!("module id {} out of range", self.module_id))
        })?;
        if self.layer >= module.layer_count {
            return Err(Error::format(
                0,
                format!(
                    "layer {} out of range for module {:?} ({} layers)",
                    self.layer, module.name, module.layer_count
                ),
            ));
        }
        if self.neurons() != module.neurons_per_layer {
            return Err(Error::format(
                0,
                format!(
                    "record has {} neurons, module {:?} has {}",
                    self.neurons(),
                    module.name,
                    module.neurons_per_layer
                ),
            ));
        }
        if !manifest.token_types.is_empty()
            && !manifest.token_types.iter().any(|t| t.id == self.token_type)
        {
            return Err(Error::format(
                0,
                format!("token type {} not declared in manifest", self.token_type),
            ));
        }
        Ok(())
    }
}

pub fn write_trace_header<W: Write>(sink: &mut W) -> Result<u64> {
    sink.write_all(TRACE_MAGIC)?;
    sink.write_all(&[TRACE_VERSION])?;
    Ok(5)
}

/// Encode one record (no stream header). Returns bytes written.
pub fn write_trace_body<W: Write>(record: &TraceRecord, sink: &mut W) -> Result<u64> {
    let payload_len = record.payload.encoded_len();
    let mut buf = Vec::with_capacity((RECORD_HEADER_LEN + payload_len) as usize);
    buf.push(record.payload.kind() as u8);
    buf.extend_from_slice(&record.domain_id.to_le_bytes());
    buf.extend_from_slice(&record.module_id.to_le_bytes());
    buf.extend_from_slice(&record.layer.to_le_bytes());
    buf.push(record.token_type);
    buf.extend_from_slice(&record.neurons().to_le_bytes());
    buf.extend_from_slice(&payload_len.to_le_bytes());
    match &record.payload {
        TracePayload::Raw(r) => {
            buf.extend_from_slice(&r.token_count.to_le_bytes());
            buf.extend_from_slice(&r.bytes);
        }
        TracePayload::Agg(a) => {
            buf.extend_from_slice(&a.token_total.to_le_bytes());
            for c in &a.counts {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len() as u64)
}

/// Write a complete trace stream. Every record is checked against `manifest`
/// before anything is written.
pub fn write_trace<W: Write>(
    records: &[TraceRecord],
    manifest: &CorpusManifest,
    sink: &mut W,
) -> Result<u64> {
    for (i, r) in records.iter().enumerate() {
        r.check(manifest).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(0, format!("record {i}: {message}")),
            other => other,
        })?;
    }
    let mut written = write_trace_header(sink)?;
    for r in records {
        written += write_trace_body(r, sink)?;
    }
    Ok(written)
}

/// Read a complete trace stream into memory.
pub fn read_trace<R: Read>(source: R) -> Result<Vec<TraceRecord>> {
    TraceReader::new(source)?.collect()
}

/// Streaming decoder over a trace stream.
pub struct TraceReader<R> {
    inner: R,
    offset: u64,
    done: bool,
}

impl<R: Read> TraceReader<R> {
    /// Consume and check the stream header.
    pub fn new(mut inner: R) -> Result<Self> {
        let mut head = [0u8; 5];
        let got = read_fully(&mut inner, &mut head)?;
        if got < 4 || &head[..4] != TRACE_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"MMNT\""));
        }
        if got < 5 {
            return Err(Error::format(4, "missing version byte"));
        }
        if head[4] != TRACE_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version 0x{:02x}", head[4]),
            ));
        }
        Ok(Self {
            inner,
            offset: 5,
            done: false,
        })
    }

    /// Byte offset of the next unread record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn next_record(&mut self) -> Result<Option<TraceRecord>> {
        let start = self.offset;
        let mut head = [0u8; RECORD_HEADER_LEN as usize];
        let got = read_fully(&mut self.inner, &mut head)?;
        if got == 0 {
            return Ok(None);
        }
        if got < head.len() {
            return Err(Error::format(start, "truncated record header"));
        }
        let kind = RecordKind::from_byte(head[0])
            .ok_or_else(|| Error::format(start, format!("unknown record kind {}", head[0])))?;
        let domain_id = u16::from_le_bytes([head[1], head[2]]);
        let module_id = u16::from_le_bytes([head[3], head[4]]);
        let layer = u16::from_le_bytes([head[5], head[6]]);
        let token_type = head[7];
        let neurons = u32::from_le_bytes([head[8], head[9], head[10], head[11]]);
        let payload_len = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
        if neurons == 0 {
            return Err(Error::format(start + 8, "record declares zero neurons"));
        }
        let payload_start = start + RECORD_HEADER_LEN;
        let mut payload = Vec::new();
        (&mut self.inner)
            .take(payload_len)
            .read_to_end(&mut payload)?;
        if (payload.len() as u64) < payload_len {
            return Err(Error::format(
                payload_start,
                format!(
                    "truncated payload: declared {payload_len} bytes, found {}",
                    payload.len()
                ),
            ));
        }
        if payload_len < 8 {
            return Err(Error::format(payload_start, "payload shorter than its count field"));
        }
        let lead = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes"));
        let body = &payload[8..];
        let payload = match kind {
            RecordKind::RawBitmap => {
                let per = bitmap_len(neurons) as u64;
                let expected = lead.checked_mul(per);
                if expected != Some(body.len() as u64) {
                    return Err(Error::format(
                        payload_start,
                        format!(
                            "bitmap payload of {} bytes does not match {lead} tokens x {per} bytes",
                            body.len()
                        ),
                    ));
                }
                let raw = RawBitmaps {
                    neurons,
                    token_count: lead,
                    bytes: body.to_vec(),
                };
                if let Some(t) = raw.first_dirty_padding() {
                    return Err(Error::format(
                        payload_start + 8 + (t as u64 + 1) * per - 1,
                        format!("token {t} has non-zero bitmap padding bits"),
                    ));
                }
                TracePayload::Raw(raw)
            }
            RecordKind::AggCounts => {
                if body.len() as u64 != 8 * u64::from(neurons) {
                    return Err(Error::format(
                        payload_start,
                        format!(
                            "aggregate payload of {} bytes does not match {neurons} counts",
                            body.len()
                        ),
                    ));
                }
                let counts: Vec<u64> = body
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                if let Some((j, c)) = counts.iter().enumerate().find(|(_, &c)| c > lead) {
                    return Err(Error::format(
                        payload_start + 8 + 8 * j as u64,
                        format!("neuron {j}: count {c} exceeds token_total {lead}"),
                    ));
                }
                TracePayload::Agg(AggCounts {
                    token_total: lead,
                    counts,
                })
            }
        };
        self.offset = payload_start + payload_len;
        Ok(Some(TraceRecord {
            domain_id,
            module_id,
            layer,
            token_type,
            payload,
        }))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Like `read_exact`, but reports how many bytes were available at EOF.
fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}
