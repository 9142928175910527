// SPDX-License-Identifier: MIT OR Apache-2.0

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::stats::NeuronId;

/// Neurons forced inactive during a forward, one bitset per (module, layer).
///
/// The reference model has a single FFN module, so module ids other than 0
/// are rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeactivationMask {
    layers: usize,
    size: usize,
    /// `layers` bitsets of `size` bits, 64 bits per word.
    words: Vec<Vec<u64>>,
}

impl DeactivationMask {
    pub fn empty(config: &ModelConfig) -> Self {
        Self::with_dims(config.n_layers, config.ffn_size)
    }

    fn with_dims(layers: usize, size: usize) -> Self {
        Self {
            layers,
            size,
            words: vec![vec![0; size.div_ceil(64)]; layers],
        }
    }

    pub fn from_neurons(config: &ModelConfig, neurons: impl IntoIterator<Item = NeuronId>) -> Result<Self> {
        let mut mask = Self::empty(config);
        for id in neurons {
            mask.set(id)?;
        }
        Ok(mask)
    }

    /// Every neuron of one layer.
    pub fn full_layer(config: &ModelConfig, layer: usize) -> Result<Self> {
        Self::from_neurons(
            config,
            (0..config.ffn_size as u32).map(|j| NeuronId::new(0, layer as u16, j)),
        )
    }

    pub fn set(&mut self, id: NeuronId) -> Result<()> {
        let (l, j) = self.locate(id)?;
        self.words[l][j / 64] |= 1 << (j % 64);
        Ok(())
    }

    pub fn is_masked(&self, id: NeuronId) -> bool {
        self.locate(id)
            .map(|(l, j)| self.words[l][j / 64] >> (j % 64) & 1 == 1)
            .unwrap_or(false)
    }

    fn locate(&self, id: NeuronId) -> Result<(usize, usize)> {
        if id.module != 0 || usize::from(id.layer) >= self.layers || id.index as usize >= self.size {
            return Err(Error::arg(format!(
                "neuron {id} outside the model ({} layers x {} neurons, module 0)",
                self.layers, self.size
            )));
        }
        Ok((usize::from(id.layer), id.index as usize))
    }

    /// Masked neuron indices of `layer` in ascending order.
    pub fn masked_in_layer(&self, module: u16, layer: usize) -> impl Iterator<Item = usize> + '_ {
        let words: &[u64] = if module == 0 && layer < self.layers { &self.words[layer] } else { &[] };
        words.iter().enumerate().flat_map(|(w, &bits)| {
            (0..64).filter(move |b| bits >> b & 1 == 1).map(move |b| w * 64 + b)
        })
    }

    pub fn count(&self) -> usize {
        self.words.iter().flatten().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Masked neurons in id order.
    pub fn neurons(&self) -> Vec<NeuronId> {
        (0..self.layers)
            .flat_map(|l| self.masked_in_layer(0, l).map(move |j| NeuronId::new(0, l as u16, j as u32)))
            .collect()
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layers != config.n_layers || self.size != config.ffn_size {
            return Err(Error::shape(format!(
                "mask is {} x {}, model is {} x {}",
                self.layers, self.size, config.n_layers, config.ffn_size
            )));
        }
        Ok(())
    }
}
