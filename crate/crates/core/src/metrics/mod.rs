//! Objective evaluation: STOI, SI-SDR and Table-style aggregation.

mod report;
mod sisdr;
mod stoi;

pub use report::{
    aggregate_report, ItemResult, Metric, MetricReport, ReportRow, SnrCell, ALL_KINDS, CSV_HEADER,
};
pub use sisdr::{measured_snr_db, si_sdr, SI_SDR_CAP_DB};
pub use stoi::{stoi, StoiConstants, STOI};

use crate::dsp::DspError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("no speech frames left after silence removal")]
    NoSpeech,
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;
