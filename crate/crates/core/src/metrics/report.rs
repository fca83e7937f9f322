//! Per-sample calibration report over the All, Boundary and Local regions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::calibration::{ace, bin_predictions, ece, mce, sce, Bin, BinScheme};
use super::regions::{all_region, boundary_region, local_patches, BOUNDARY_RADIUS};
use crate::error::{Error, Result};
use crate::scaling::CalibratedOutput;
use crate::tensor::{Grid, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionsConfig {
    pub all: bool,
    pub boundary: bool,
    pub local: bool,
    pub radius: usize,
    pub bins: usize,
    pub patch_count: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub background: u32,
}

impl Default for RegionsConfig {
    fn default() -> Self {
        Self {
            all: true,
            boundary: true,
            local: true,
            radius: BOUNDARY_RADIUS,
            bins: 10,
            patch_count: 10,
            patch_size: 72,
            seed: 0,
            background: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ece: f64,
    pub mce: f64,
    pub sce: f64,
    pub ace: f64,
}

impl MetricSet {
    fn values(&self) -> [f64; 4] {
        [self.ece, self.mce, self.sce, self.ace]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self {
            ece: v[0],
            mce: v[1],
            sce: v[2],
            ace: v[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSummary {
    pub avg: Option<MetricSet>,
    pub max: Option<MetricSet>,
    pub per_patch: Vec<Option<MetricSet>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReports {
    pub all: Option<MetricSet>,
    pub boundary: Option<MetricSet>,
    pub local: Option<LocalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReports {
    pub all: Option<Vec<Bin>>,
    pub boundary: Option<Vec<Bin>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub regions: RegionReports,
    pub bins: BinReports,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// All four metrics on one region, plus its equal-width bins.
pub fn region_metrics(
    output: &CalibratedOutput,
    labels: &LabelMap,
    mask: Option<&Grid<bool>>,
    bins: usize,
) -> Result<(MetricSet, Vec<Bin>)> {
    let rb = bin_predictions(output, labels, mask, BinScheme::EqualWidth(bins))?;
    let set = MetricSet {
        ece: ece(&rb)?,
        mce: mce(&rb)?,
        sce: sce(output, labels, mask, bins)?,
        ace: ace(output, labels, mask, bins)?,
    };
    Ok((set, rb.bins))
}

fn soft<T>(name: &str, r: Result<T>, warnings: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyRegion(msg)) => {
            warnings.push(format!("{name}: {msg}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn mean_and_max(sets: &[MetricSet]) -> Option<(MetricSet, MetricSet)> {
    if sets.is_empty() {
        return None;
    }
    let mut sum = [0.0; 4];
    let mut max = [f64::NEG_INFINITY; 4];
    for s in sets {
        for (k, v) in s.values().into_iter().enumerate() {
            sum[k] += v;
            max[k] = max[k].max(v);
        }
    }
    let n = sets.len() as f64;
    Some((
        MetricSet::from_values(sum.map(|v| v / n)),
        MetricSet::from_values(max),
    ))
}

/// Evaluates one sample. Regions without supervised pixels come back as
/// `None` with a warning instead of failing the whole report.
pub fn evaluate(
    output: &CalibratedOutput,
    labels: &LabelMap,
    config: &RegionsConfig,
) -> Result<CalibrationReport> {
    let mut warnings = Vec::new();
    let (mut all, mut all_bins, mut boundary, mut boundary_bins) = (None, None, None, None);
    if config.all {
        let m = all_region(labels, config.radius, config.background);
        if let Some((s, b)) = soft(
            "all",
            region_metrics(output, labels, Some(&m.mask), config.bins),
            &mut warnings,
        )? {
            all = Some(s);
            all_bins = Some(b);
        }
    }
    if config.boundary {
        let m = boundary_region(labels, config.radius);
        if let Some((s, b)) = soft(
            "boundary",
            region_metrics(output, labels, Some(&m.mask), config.bins),
            &mut warnings,
        )? {
            boundary = Some(s);
            boundary_bins = Some(b);
        }
    }
    let local = if config.local {
        let patches = local_patches(labels.dims(), config.patch_count, config.patch_size, config.seed);
        let mut per_patch = Vec::with_capacity(patches.len());
        for (i, p) in patches.iter().enumerate() {
            let r = region_metrics(output, labels, Some(&p.mask), config.bins).map(|(s, _)| s);
            per_patch.push(soft(&format!("local[{i}]"), r, &mut warnings)?);
        }
        let present: Vec<MetricSet> = per_patch.iter().flatten().copied().collect();
        let (avg, max) = match mean_and_max(&present) {
            Some((a, m)) => (Some(a), Some(m)),
            None => (None, None),
        };
        Some(LocalSummary { avg, max, per_patch })
    } else {
        None
    };
    Ok(CalibrationReport {
        regions: RegionReports {
            all,
            boundary,
            local,
        },
        bins: BinReports {
            all: all_bins,
            boundary: boundary_bins,
        },
        warnings,
    })
}

/// Mean of each metric over the reports where a region was defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub samples: usize,
    pub all: Option<MetricSet>,
    pub boundary: Option<MetricSet>,
    pub local_avg: Option<MetricSet>,
    pub local_max: Option<MetricSet>,
}

pub fn summarize(reports: &[CalibrationReport]) -> ReportSummary {
    let mean = |pick: &dyn Fn(&CalibrationReport) -> Option<MetricSet>| {
        let sets: Vec<MetricSet> = reports.iter().filter_map(pick).collect();
        mean_and_max(&sets).map(|(m, _)| m)
    };
    ReportSummary {
        samples: reports.len(),
        all: mean(&|r| r.regions.all),
        boundary: mean(&|r| r.regions.boundary),
        local_avg: mean(&|r| r.regions.local.as_ref().and_then(|l| l.avg)),
        local_max: mean(&|r| r.regions.local.as_ref().and_then(|l| l.max)),
    }
}

/// Reliability-diagram rows as CSV: `bin_lo,bin_hi,count,acc,conf`.
pub fn write_diagram_csv<W: Write>(bins: &[Bin], mut out: W) -> std::io::Result<()> {
    writeln!(out, "bin_lo,bin_hi,count,acc,conf")?;
    for b in bins {
        writeln!(out, "{},{},{},{},{}", b.lo, b.hi, b.count, b.acc, b.conf)?;
    }
    Ok(())
}

/// Pools bins with identical edges (e.g. over samples), count-weighting
/// accuracy and confidence.
pub fn pool_bins<'a>(sets: impl IntoIterator<Item = &'a [Bin]>) -> Vec<Bin> {
    let mut pooled: Vec<Bin> = Vec::new();
    for bins in sets {
        if pooled.is_empty() {
            pooled = bins
                .iter()
                .map(|b| Bin {
                    count: 0,
                    acc: 0.0,
                    conf: 0.0,
                    ..b.clone()
                })
                .collect();
        }
        for (p, b) in pooled.iter_mut().zip(bins) {
            p.acc += b.acc * b.count as f64;
            p.conf += b.conf * b.count as f64;
            p.count += b.count;
        }
    }
    for p in &mut pooled {
        if p.count > 0 {
            p.acc /= p.count as f64;
            p.conf /= p.count as f64;
        }
    }
    pooled
}
