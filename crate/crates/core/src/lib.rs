// SPDX-License-Identifier: MIT OR Apache-2.0

//! Domain-specific neuron analysis for transformer models.
//!
//! The crate covers the full path from a forward pass to a ranked list of
//! domain-specific FFN neurons and their causal footprint:
//!
//! - [`trace_store`]: bit-exact on-disk formats (corpus manifests, activation
//!   traces, hidden-state dumps).
//! - [`stats`]: streaming per-neuron, per-domain activation counters and
//!   silent-neuron detection.
//! - [`dape`]: domain activation probability entropy, bottom-percentile
//!   selection and threshold-based domain assignment.
//! - [`refmodel`]: a small deterministic decoder-only transformer with a
//!   pseudo vision front end, deactivation masks and full tracing.
//! - [`lens`]: logit-lens decoding of intermediate hidden states, top-k
//!   heatmaps and per-layer entropy curves by token type.
//! - [`perturb`]: hidden-state deviation under deactivation with
//!   equal-cardinality random baselines, top-1 accuracy and ANLS.
//! - [`synth`]: seeded multi-domain corpora and models with planted
//!   domain-exclusive neurons as ground truth.

// Negated range checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dape;
pub mod error;
pub mod lens;
pub mod perturb;
pub mod refmodel;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trace_store;

pub use error::{Error, Result};
pub use stats::NeuronId;
