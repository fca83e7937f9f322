//! Calibration and segmentation metrics, and the regions they are measured on.

pub mod calibration;
pub mod regions;
pub mod report;
pub mod segmentation;

pub use calibration::{ace, bin_predictions, ece, mce, sce, Bin, BinScheme, ReliabilityBins};
pub use regions::{
    all_region, boundary_region, local_patches, MaskPolicy, RegionKind, RegionMask, BOUNDARY_RADIUS,
};
pub use report::{
    evaluate, pool_bins, summarize, write_diagram_csv, CalibrationReport, LocalSummary, MetricSet, RegionsConfig,
    ReportSummary,
};
pub use segmentation::{seg_metrics, SegMetrics};
