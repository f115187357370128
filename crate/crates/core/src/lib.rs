//! Two-stage EMG-assisted speech enhancement.
//!
//! Stage 1 turns 8-channel, 1 kHz surface EMG into speech through predicted
//! soft speech units ([`emg`]). Stage 2 enhances noisy speech jointly with
//! that prediction using a dual-input TF-Mamba network ([`se`]). Everything
//! runs on the small reverse-mode engine in [`tensor`].

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod emg;
pub mod kv;
pub mod metrics;
pub mod nn;
pub mod se;
pub mod selfcheck;
pub mod ssm;
pub mod tensor;
