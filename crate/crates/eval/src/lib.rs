//! Image-quality evaluation: PSNR, SSIM and their luminance-channel
//! variants, dataset-level reports with pluggable extra metrics, and
//! comparison tables.

pub mod error;
pub mod metrics;
pub mod report;
pub mod table;

pub use crate::error::{EvalError, Result};
pub use crate::metrics::{psnr, rgb_to_y, ssim, y_psnr, y_ssim};
pub use crate::report::{
    evaluate_dataset, evaluate_pairs, ImagePair, MetricPlugin, MetricReport, PluginOutput, Polarity, ReportMetadata,
    Score,
};
pub use crate::table::{emit_table, TableFormat};
