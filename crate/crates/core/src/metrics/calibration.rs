//! Binned calibration estimators: reliability bins, ECE, MCE, SCE and ACE.
//!
//! Equal-width bin `j` (1-based) covers `((j-1)/N, j/N]`; a confidence of
//! exactly 0 goes to the first bin. Equal-frequency bins split the
//! confidence-sorted pixels into `R` runs whose sizes differ by at most one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::CalibratedOutput;
use crate::tensor::{Grid, LabelMap, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", content = "bins", rename_all = "snake_case")]
pub enum BinScheme {
    EqualWidth(usize),
    EqualFrequency(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    /// Interval bounds for equal-width bins; observed confidence range for
    /// equal-frequency bins.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub acc: f64,
    pub conf: f64,
}

impl Bin {
    pub fn gap(&self) -> f64 {
        (self.acc - self.conf).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub scheme: BinScheme,
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// `(confidence, correct)` pairs of the supervised pixels inside `mask`.
fn top_label_samples(
    output: &CalibratedOutput,
    labels: &LabelMap,
    mask: Option<&Grid<bool>>,
) -> Result<Vec<(f64, bool)>> {
    if output.pred_labels.dims() != labels.dims() {
        return Err(Error::Validation("prediction and labels differ in shape".into()));
    }
    let out: Vec<(f64, bool)> = (0..labels.pixels())
        .filter(|&p| labels.at(p) != IGNORE && mask.map_or(true, |m| m.as_slice()[p]))
        .map(|p| {
            (
                output.confidence.as_slice()[p] as f64,
                output.pred_labels.at(p) == labels.at(p),
            )
        })
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyRegion("no supervised pixels in region".into()));
    }
    Ok(out)
}

/// 0-based equal-width bin index of a confidence in `[0, 1]`.
#[inline]
pub(crate) fn width_bin(conf: f64, n: usize) -> usize {
    // conf is an f32 widened to f64, so conf * n is exact for any sane n
    let j = (conf * n as f64).ceil() as usize;
    j.clamp(1, n) - 1
}

fn equal_width(samples: &[(f64, bool)], n: usize) -> Vec<Bin> {
    let mut count = vec![0usize; n];
    let mut hits = vec![0usize; n];
    let mut conf = vec![0f64; n];
    for &(c, ok) in samples {
        let j = width_bin(c, n);
        count[j] += 1;
        hits[j] += ok as usize;
        conf[j] += c;
    }
    (0..n)
        .map(|j| {
            let k = count[j];
            Bin {
                lo: j as f64 / n as f64,
                hi: (j + 1) as f64 / n as f64,
                count: k,
                acc: if k > 0 { hits[j] as f64 / k as f64 } else { 0.0 },
                conf: if k > 0 { conf[j] / k as f64 } else { 0.0 },
            }
        })
        .collect()
}

fn equal_frequency(samples: &[(f64, bool)], r: usize) -> Vec<Bin> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].0.total_cmp(&samples[b].0).then(a.cmp(&b)));
    let n = samples.len();
    (0..r)
        .map(|k| {
            let run = &order[k * n / r..(k + 1) * n / r];
            let count = run.len();
            if count == 0 {
                return Bin {
                    lo: 0.0,
                    hi: 0.0,
                    count: 0,
                    acc: 0.0,
                    conf: 0.0,
                };
            }
            let hits = run.iter().filter(|&&i| samples[i].1).count();
            let conf: f64 = run.iter().map(|&i| samples[i].0).sum();
            Bin {
                lo: samples[run[0]].0,
                hi: samples[run[count - 1]].0,
                count,
                acc: hits as f64 / count as f64,
                conf: conf / count as f64,
            }
        })
        .collect()
}

fn check_bins(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("bin count must be positive".into()));
    }
    Ok(())
}

/// Groups supervised pixels by top-label confidence.
pub fn bin_predictions(
    output: &CalibratedOutput,
    labels: &LabelMap,
    mask: Option<&Grid<bool>>,
    scheme: BinScheme,
) -> Result<ReliabilityBins> {
    let samples = top_label_samples(output, labels, mask)?;
    let bins = match scheme {
        BinScheme::EqualWidth(n) => {
            check_bins(n)?;
            equal_width(&samples, n)
        }
        BinScheme::EqualFrequency(r) => {
            check_bins(r)?;
            equal_frequency(&samples, r)
        }
    };
    Ok(ReliabilityBins { scheme, bins })
}

/// Count-weighted mean calibration gap.
pub fn ece(bins: &ReliabilityBins) -> Result<f64> {
    let total = bins.total();
    if total == 0 {
        return Err(Error::EmptyRegion("all bins are empty".into()));
    }
    Ok(bins
        .bins
        .iter()
        .map(|b| b.count as f64 / total as f64 * b.gap())
        .sum())
}

/// Largest calibration gap over occupied bins.
pub fn mce(bins: &ReliabilityBins) -> Result<f64> {
    bins.bins
        .iter()
        .filter(|b| b.count > 0)
        .map(Bin::gap)
        .reduce(f64::max)
        .ok_or_else(|| Error::EmptyRegion("all bins are empty".into()))
}

/// Per-class `(probability, is-that-class)` pairs over the supervised pixels.
fn per_class_samples(
    output: &CalibratedOutput,
    labels: &LabelMap,
    mask: Option<&Grid<bool>>,
) -> Result<Vec<Vec<(f64, bool)>>> {
    if output.probs.dims() != labels.dims() {
        return Err(Error::Validation("probabilities and labels differ in shape".into()));
    }
    let pixels: Vec<usize> = (0..labels.pixels())
        .filter(|&p| labels.at(p) != IGNORE && mask.map_or(true, |m| m.as_slice()[p]))
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyRegion("no supervised pixels in region".into()));
    }
    Ok((0..output.probs.classes())
        .map(|l| {
            let plane = output.probs.plane(l);
            pixels
                .iter()
                .map(|&p| (plane[p] as f64, labels.at(p) as usize == l))
                .collect()
        })
        .collect())
}

/// Static calibration error: equal-width bins per class, weighted by bin
/// size over `classes * pixels`.
pub fn sce(
    output: &CalibratedOutput,
    labels: &LabelMap,
    mask: Option<&Grid<bool>>,
    n: usize,
) -> Result<f64> {
    check_bins(n)?;
    let per_class = per_class_samples(output, labels, mask)?;
    let classes = per_class.len() as f64;
    let mut total = 0.0;
    for samples in &per_class {
        let pixels = samples.len() as f64;
        for b in equal_width(samples, n) {
            total += b.count as f64 / (classes * pixels) * b.gap();
        }
    }
    Ok(total)
}

/// Adaptive calibration error: equal-frequency bins per class, each occupied
/// bin weighted equally.
pub fn ace(
    output: &CalibratedOutput,
    labels: &LabelMap,
    mask: Option<&Grid<bool>>,
    r: usize,
) -> Result<f64> {
    check_bins(r)?;
    let per_class = per_class_samples(output, labels, mask)?;
    let classes = per_class.len() as f64;
    let mut total = 0.0;
    for samples in &per_class {
        let bins = equal_frequency(samples, r);
        let occupied = bins.iter().filter(|b| b.count > 0).count() as f64;
        total += bins.iter().map(Bin::gap).sum::<f64>() / (classes * occupied);
    }
    Ok(total)
}
