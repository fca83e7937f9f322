//! Softmax with temperature and the per-pixel quantities built from it.
//!
//! Every kernel here works on one sample and widens to `f64` internally.
//! Pixels whose label is [`IGNORE`] or that fall outside an optional region
//! mask are excluded from all label-dependent sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Grid, LabelMap, LogitMap, ProbMap, Sample, SampleTemperature, IGNORE};

/// Floor applied to probabilities before taking logs in the NLL.
pub const LOG_FLOOR: f64 = 1e-12;

/// Calibrated probabilities together with the confidence and label maps
/// derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedOutput {
    pub probs: ProbMap,
    /// Channel maximum of `probs` at every pixel.
    pub confidence: Grid<f32>,
    /// Channel argmax of `probs`; ties go to the lowest class index.
    pub pred_labels: LabelMap,
}

/// Index of the largest entry, lowest index on ties.
#[inline]
pub fn argmax<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v: Option<T> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best_v {
            Some(b) if !(v > b) => {}
            _ => {
                best = i;
                best_v = Some(v);
            }
        }
    }
    best
}

/// Log-sum-exp of `alpha * z` and the softmax-weighted mean of `z`.
#[inline]
pub(crate) fn scaled_stats(z: &[f64], alpha: f64) -> (f64, f64) {
    let m = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(alpha * v));
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for &v in z {
        let e = (alpha * v - m).exp();
        sum += e;
        weighted += e * v;
    }
    (m + sum.ln(), weighted / sum)
}

fn check_temperature(t: SampleTemperature<'_>, dims: (usize, usize)) -> Result<()> {
    match t {
        SampleTemperature::Uniform(v) => {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("temperature must be positive, got {v}")));
            }
        }
        SampleTemperature::Local(g) => {
            if g.dims() != dims {
                return Err(Error::Validation(format!(
                    "temperature map {:?} does not match logits {:?}",
                    g.dims(),
                    dims
                )));
            }
            if let Some(v) = g.as_slice().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::Domain(format!("temperature must be positive, got {v}")));
            }
        }
    }
    Ok(())
}

fn check_mask(mask: Option<&Grid<bool>>, dims: (usize, usize)) -> Result<()> {
    match mask {
        Some(m) if m.dims() != dims => Err(Error::Validation(format!(
            "mask {:?} does not match map {:?}",
            m.dims(),
            dims
        ))),
        _ => Ok(()),
    }
}

#[inline]
fn in_mask(mask: Option<&Grid<bool>>, pixel: usize) -> bool {
    mask.map_or(true, |m| m.as_slice()[pixel])
}

/// Applies `softmax(z / T)` at every pixel with max-subtraction.
pub fn softmax_temp<'a>(
    logits: &LogitMap,
    temps: impl Into<SampleTemperature<'a>>,
) -> Result<CalibratedOutput> {
    let temps = temps.into();
    check_temperature(temps, logits.dims())?;
    let (h, w) = logits.dims();
    let classes = logits.classes();
    let n = logits.pixels();

    let mut probs = vec![0f32; classes * n];
    let mut confidence = vec![0f32; n];
    let mut pred = vec![0u32; n];
    let mut z = Vec::with_capacity(classes);
    let mut e = vec![0f64; classes];
    for p in 0..n {
        logits.pixel_into(p, &mut z);
        let alpha = 1.0 / temps.at(p);
        let m = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(alpha * v));
        let mut sum = 0.0;
        for (ei, &zi) in e.iter_mut().zip(&z) {
            *ei = (alpha * zi - m).exp();
            sum += *ei;
        }
        // Division by a positive T preserves the ordering of the f32 logits
        // exactly, so the label can be read off the raw logits.
        let best = argmax(z.iter().copied());
        for l in 0..classes {
            probs[l * n + p] = (e[l] / sum) as f32;
        }
        pred[p] = best as u32;
        confidence[p] = probs[best * n + p];
    }
    Ok(CalibratedOutput {
        probs: ProbMap::from_raw(classes, h, w, probs),
        confidence: Grid::new(h, w, confidence)?,
        pred_labels: LabelMap::new(h, w, pred)?,
    })
}

/// Negative log-likelihood of the true labels, summed over supervised pixels.
pub fn nll(probs: &ProbMap, labels: &LabelMap, mask: Option<&Grid<bool>>) -> Result<f64> {
    if probs.dims() != labels.dims() {
        return Err(Error::Validation("probabilities and labels differ in shape".into()));
    }
    check_mask(mask, probs.dims())?;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..probs.pixels() {
        let s = labels.at(p);
        if s == IGNORE || !in_mask(mask, p) {
            continue;
        }
        let q = probs.at(s as usize, p) as f64;
        total -= q.max(LOG_FLOOR).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain("no supervised pixels".into()));
    }
    Ok(total)
}

/// Shannon entropy of the per-pixel distributions, summed over the mask.
pub fn entropy(probs: &ProbMap, mask: Option<&Grid<bool>>) -> Result<f64> {
    check_mask(mask, probs.dims())?;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..probs.pixels() {
        if !in_mask(mask, p) {
            continue;
        }
        for l in 0..probs.classes() {
            let q = probs.at(l, p) as f64;
            if q > 0.0 {
                total -= q * q.ln();
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain("no pixels in mask".into()));
    }
    Ok(total)
}

/// `sum_x sum_l z_l(x) softmax(z(x)/T(x))_l` over the mask.
pub fn weighted_avg_logit<'a>(
    logits: &LogitMap,
    temps: impl Into<SampleTemperature<'a>>,
    mask: Option<&Grid<bool>>,
) -> Result<f64> {
    let temps = temps.into();
    check_temperature(temps, logits.dims())?;
    check_mask(mask, logits.dims())?;
    let mut z = Vec::with_capacity(logits.classes());
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..logits.pixels() {
        if !in_mask(mask, p) {
            continue;
        }
        logits.pixel_into(p, &mut z);
        total += scaled_stats(&z, 1.0 / temps.at(p)).1;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain("no pixels in mask".into()));
    }
    Ok(total)
}

/// `sum_x z_{S(x)}(x)` over supervised pixels.
pub fn true_class_logit_sum(
    logits: &LogitMap,
    labels: &LabelMap,
    mask: Option<&Grid<bool>>,
) -> Result<f64> {
    if logits.dims() != labels.dims() {
        return Err(Error::Validation("logits and labels differ in shape".into()));
    }
    check_mask(mask, logits.dims())?;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..logits.pixels() {
        let s = labels.at(p);
        if s == IGNORE || !in_mask(mask, p) {
            continue;
        }
        total += logits.at(s as usize, p) as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain("no supervised pixels".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Global,
    PerImage,
    PerPixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagnosis {
    Overconfident,
    Underconfident,
    Balanced,
}

/// Relative tolerance for calling the two logit sums equal.
pub const BALANCE_TOL: f64 = 1e-9;

fn diagnose(true_sum: f64, weighted_sum: f64) -> Diagnosis {
    let diff = weighted_sum - true_sum;
    if diff.abs() <= BALANCE_TOL * true_sum.abs().max(1.0) {
        Diagnosis::Balanced
    } else if diff > 0.0 {
        Diagnosis::Overconfident
    } else {
        Diagnosis::Underconfident
    }
}

/// Compares the true-class logit sum with the softmax-weighted logit sum at
/// `T = 1`. A weighted sum above the true-class sum is overconfidence.
///
/// Returns one entry for `Global`, one per sample for `PerImage`, and one per
/// pixel (samples concatenated) for `PerPixel`; units with no supervised
/// pixel are `None`.
pub fn confidence_diagnosis(
    samples: &[Sample],
    granularity: Granularity,
) -> Result<Vec<Option<Diagnosis>>> {
    // per-pixel (true, weighted) pairs, None where ignored
    let per_sample: Vec<Vec<Option<(f64, f64)>>> = samples
        .iter()
        .map(|s| {
            let mut z = Vec::with_capacity(s.logits.classes());
            (0..s.logits.pixels())
                .map(|p| {
                    let label = s.labels.at(p);
                    if label == IGNORE {
                        return None;
                    }
                    s.logits.pixel_into(p, &mut z);
                    Some((z[label as usize], scaled_stats(&z, 1.0).1))
                })
                .collect()
        })
        .collect();

    let fold = |pixels: &mut dyn Iterator<Item = &Option<(f64, f64)>>| {
        let mut any = false;
        let (mut t, mut w) = (0.0, 0.0);
        for (a, b) in pixels.flatten() {
            t += a;
            w += b;
            any = true;
        }
        any.then(|| diagnose(t, w))
    };

    let out = match granularity {
        Granularity::Global => {
            let d = fold(&mut per_sample.iter().flatten());
            if d.is_none() {
                return Err(Error::Domain("no supervised pixels".into()));
            }
            vec![d]
        }
        Granularity::PerImage => per_sample.iter().map(|s| fold(&mut s.iter())).collect(),
        Granularity::PerPixel => per_sample
            .iter()
            .flatten()
            .map(|v| v.map(|(t, w)| diagnose(t, w)))
            .collect(),
    };
    Ok(out)
}
