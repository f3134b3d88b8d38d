//! Experiment driver behind the `warpalign` binary: training loops for the
//! planar-alignment and digit-classification experiments, checkpoint
//! evaluation, metrics reports, and figure export.

pub mod config;
pub mod eval;
pub mod figures;
pub mod glyphs;
pub mod report;
pub mod train;

/// Directory holding the IDX dataset files for the digit experiment.
pub const DATA_DIR_ENV: &str = "WARPALIGN_DATA_DIR";
