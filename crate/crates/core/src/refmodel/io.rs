// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::trace_store::{read_f32s, read_prefixed_header, write_f32s, write_prefixed_header};

const MODEL_FORMAT: &str = "dneuron-model";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format: String,
    version: u32,
    dtype: String,
    ln_eps: f32,
    parameter_count: u64,
    config: ModelConfig,
}

impl ModelParams {
    /// Write the config header followed by every tensor in serialisation order.
    pub fn save<W: Write>(&self, sink: &mut W) -> Result<()> {
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dtype: "f32le".into(),
            ln_eps: self.final_norm.eps,
            parameter_count: self.parameter_count() as u64,
            config: self.config.clone(),
        };
        write_prefixed_header(sink, &toml::to_string(&header)?)?;
        for t in self.tensors() {
            write_f32s(sink, t)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(source: &mut R) -> Result<Self> {
        let (text, consumed) = read_prefixed_header(source)?;
        let header: ModelHeader = toml::from_str(&text)?;
        if header.format != MODEL_FORMAT || header.version != MODEL_VERSION || header.dtype != "f32le" {
            return Err(Error::doc(format!(
                "unsupported model file {} v{} ({})",
                header.format, header.version, header.dtype
            )));
        }
        header.config.validate().map_err(|e| Error::doc(e.to_string()))?;
        if header.parameter_count != header.config.parameter_count() as u64 {
            return Err(Error::doc(format!(
                "header declares {} parameters, config implies {}",
                header.parameter_count,
                header.config.parameter_count()
            )));
        }
        let mut params = ModelParams::zeros(&header.config)?;
        let mut offset = consumed;
        for t in params.tensors_mut() {
            let values = read_f32s(source, t.len(), offset)?;
            t.copy_from_slice(&values);
            offset += 4 * t.len() as u64;
        }
        let mut extra = [0u8; 1];
        if source.read(&mut extra)? != 0 {
            return Err(Error::format(offset, "trailing bytes after model payload"));
        }
        for l in &mut params.layers {
            l.attn_norm.eps = header.ln_eps;
            l.ffn_norm.eps = header.ln_eps;
        }
        params.final_norm.eps = header.ln_eps;
        Ok(params)
    }
}
