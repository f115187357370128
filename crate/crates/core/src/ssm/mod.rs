//! Selective state-space sequence model: the fused scan, uni- and
//! bidirectional Mamba blocks and the time/frequency TF-Mamba block.

mod mamba;
mod scan;

pub use mamba::{bidirectional, BiMamba, Mamba, MambaDims, TfMamba};
pub use scan::{causal_depthwise_conv, selective_scan};
