// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{read_f32s, read_prefixed_header, write_f32s, write_prefixed_header};
use crate::error::{Error, Result};

const DTYPE_F32_LE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpHeader {
    layer: u32,
    token_start: u64,
    token_len: u64,
    dim: u64,
    dtype: String,
}

/// Hidden states of one layer for a contiguous token span, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateDump {
    pub layer: u32,
    pub token_start: u64,
    pub token_len: u64,
    pub dim: u64,
    pub values: Vec<f32>,
}

impl HiddenStateDump {
    pub fn new(layer: u32, token_start: u64, dim: u64, values: Vec<f32>) -> Result<Self> {
        if dim == 0 || !(values.len() as u64).is_multiple_of(dim) {
            return Err(Error::shape(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        Ok(Self {
            layer,
            token_start,
            token_len: values.len() as u64 / dim,
            dim,
            values,
        })
    }

    pub fn row(&self, token: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.values[token * d..(token + 1) * d]
    }

    pub fn write<W: Write>(&self, sink: &mut W) -> Result<u64> {
        if self.values.len() as u64 != self.token_len * self.dim {
            return Err(Error::shape("dump payload does not match token_len x dim"));
        }
        let header = toml::to_string(&DumpHeader {
            layer: self.layer,
            token_start: self.token_start,
            token_len: self.token_len,
            dim: self.dim,
            dtype: DTYPE_F32_LE.into(),
        })?;
        let n = write_prefixed_header(sink, &header)?;
        write_f32s(sink, &self.values)?;
        Ok(n + 4 * self.values.len() as u64)
    }

    pub fn read<R: Read>(source: &mut R) -> Result<Self> {
        let (text, consumed) = read_prefixed_header(source)?;
        let header: DumpHeader = toml::from_str(&text)?;
        if header.dtype != DTYPE_F32_LE {
            return Err(Error::doc(format!("unsupported dtype {:?}", header.dtype)));
        }
        let count = header
            .token_len
            .checked_mul(header.dim)
            .ok_or_else(|| Error::doc("token_len x dim overflows"))?;
        let values = read_f32s(source, count as usize, consumed)?;
        let mut trailing = [0u8; 1];
        if source.read(&mut trailing)? != 0 {
            return Err(Error::format(
                consumed + 4 * count,
                "trailing bytes after dump payload",
            ));
        }
        Ok(Self {
            layer: header.layer,
            token_start: header.token_start,
            token_len: header.token_len,
            dim: header.dim,
            values,
        })
    }
}
