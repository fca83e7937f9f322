//! Fitting a single temperature (globally or per image) by minimising NLL.
//!
//! Two independent routes are provided. [`fit_ts_gradient`] descends the NLL
//! in `log(1/T)`. [`fit_ts_bisection`] instead solves the first-order
//! condition directly: at the optimum the softmax-weighted logit sum equals
//! the true-class logit sum, and the weighted sum is monotone in `1/T`, so the
//! root can be bracketed and bisected.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MaskPolicy;
use crate::par;
use crate::scaling::{scaled_stats, Granularity};
use crate::tensor::{Dataset, Sample, TemperatureField, IGNORE, T_MAX};

/// Lower end of the inverse-temperature bracket; `T = 1/ALPHA_MIN = T_MAX`.
pub const ALPHA_MIN: f64 = 1.0 / T_MAX;
/// Upper end of the inverse-temperature bracket.
pub const ALPHA_MAX: f64 = 1e6;
/// Bisection stops once `|g| < BISECTION_RTOL * |true-class logit sum|`.
pub const BISECTION_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Gradient,
    Bisection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarFitResult {
    pub temperature: f64,
    /// Summed NLL over the fitted pixels at `temperature`.
    pub final_nll: f64,
    pub iterations: usize,
    /// False when the answer sits on a clamp (`T_MAX` or `1/ALPHA_MAX`) or
    /// the iteration budget ran out.
    pub converged: bool,
    pub method: FitMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientConfig {
    pub lr: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            max_iters: 500,
            tol: 1e-7,
        }
    }
}

/// Supervised pixels of one image, logits interleaved per pixel in `f64`.
#[derive(Debug, Clone)]
pub(crate) struct PixelSet {
    classes: usize,
    logits: Vec<f64>,
    labels: Vec<u32>,
}

impl PixelSet {
    pub(crate) fn from_sample(sample: &Sample, policy: MaskPolicy, background: u32) -> Self {
        let mask = policy.mask(&sample.labels, background);
        let classes = sample.logits.classes();
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        let mut z = Vec::with_capacity(classes);
        for p in 0..sample.logits.pixels() {
            let s = sample.labels.at(p);
            if s == IGNORE || !mask.as_ref().map_or(true, |m| m.as_slice()[p]) {
                continue;
            }
            sample.logits.pixel_into(p, &mut z);
            logits.extend_from_slice(&z);
            labels.push(s);
        }
        Self {
            classes,
            logits,
            labels,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.labels.len()
    }

    fn pixels(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.logits
            .chunks_exact(self.classes)
            .zip(self.labels.iter().map(|&s| s as usize))
    }

    /// `(sum of true-class logits, sum of per-pixel mean logits)`.
    fn constants(&self) -> (f64, f64) {
        let mut truth = 0.0;
        let mut mean = 0.0;
        for (z, s) in self.pixels() {
            truth += z[s];
            mean += z.iter().sum::<f64>() / self.classes as f64;
        }
        (truth, mean)
    }

    /// `(NLL, weighted logit sum, entropy)` at inverse temperature `alpha`.
    fn evaluate(&self, alpha: f64) -> Sums {
        let mut out = Sums::default();
        for (z, s) in self.pixels() {
            let (lse, w) = scaled_stats(z, alpha);
            out.nll += lse - alpha * z[s];
            out.weighted += w;
            out.entropy += lse - alpha * w;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    nll: f64,
    weighted: f64,
    entropy: f64,
}

impl std::ops::Add for Sums {
    type Output = Sums;
    fn add(self, o: Sums) -> Sums {
        Sums {
            nll: self.nll + o.nll,
            weighted: self.weighted + o.weighted,
            entropy: self.entropy + o.entropy,
        }
    }
}

struct Problem {
    images: Vec<PixelSet>,
    truth: f64,
    mean: f64,
    pixels: usize,
}

impl Problem {
    fn new(images: Vec<PixelSet>) -> Result<Self> {
        let pixels: usize = images.iter().map(PixelSet::len).sum();
        if pixels == 0 {
            return Err(Error::Domain("no supervised pixels".into()));
        }
        let (mut truth, mut mean) = (0.0, 0.0);
        for (t, m) in images.iter().map(PixelSet::constants) {
            truth += t;
            mean += m;
        }
        Ok(Self {
            images,
            truth,
            mean,
            pixels,
        })
    }

    fn from_dataset(data: &Dataset, policy: MaskPolicy) -> Result<Self> {
        let bg = data.background();
        Self::new(par::map(data.samples(), |s| {
            PixelSet::from_sample(s, policy, bg)
        }))
    }

    /// Per-image partial sums reduced in index order.
    fn evaluate(&self, alpha: f64) -> Result<Sums> {
        let parts = par::map(&self.images, |img| img.evaluate(alpha));
        let total = parts.into_iter().fold(Sums::default(), |a, b| a + b);
        if !(total.nll.is_finite() && total.weighted.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite objective at 1/T = {alpha}"
            )));
        }
        Ok(total)
    }

    fn g(&self, alpha: f64) -> Result<f64> {
        Ok(self.evaluate(alpha)?.weighted - self.truth)
    }
}

/// Gradient descent on the mean NLL in `u = log(1/T)`, starting from `T = 1`.
///
/// A step that increases the loss is halved until it does not, so `lr` acts
/// as the initial step size. Converged once `|delta u| < tol`.
pub fn fit_ts_gradient(
    data: &Dataset,
    policy: MaskPolicy,
    config: GradientConfig,
) -> Result<ScalarFitResult> {
    gradient_on(&Problem::from_dataset(data, policy)?, config)
}

fn gradient_on(problem: &Problem, config: GradientConfig) -> Result<ScalarFitResult> {
    let n = problem.pixels as f64;
    let (u_min, u_max) = (ALPHA_MIN.ln(), ALPHA_MAX.ln());
    let mut u = 0.0f64;
    let mut sums = problem.evaluate(1.0)?;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        let alpha = u.exp();
        let grad = alpha * (sums.weighted - problem.truth) / n;
        let loss = sums.nll / n;

        let mut step = config.lr;
        let (next_u, next_sums) = loop {
            let cand = (u - step * grad).clamp(u_min, u_max);
            let cand_sums = problem.evaluate(cand.exp())?;
            if cand_sums.nll / n <= loss || step < 1e-12 {
                break (cand, cand_sums);
            }
            step *= 0.5;
        };
        let delta = (next_u - u).abs();
        u = next_u;
        sums = next_sums;
        if delta < config.tol {
            converged = true;
            break;
        }
    }

    let clamped = u <= u_min || u >= u_max;
    Ok(ScalarFitResult {
        temperature: (-u).exp().clamp(1.0 / ALPHA_MAX, T_MAX),
        final_nll: sums.nll,
        iterations,
        converged: converged && !clamped,
        method: FitMethod::Gradient,
    })
}

/// Solves `weighted_logit_sum(1/T) = true_class_logit_sum` by bisection.
///
/// When the true-class sum does not exceed the mean-logit sum the NLL is
/// minimised at `1/T = 0`, and `T_MAX` is returned. When the weighted sum
/// never reaches the true-class sum inside the bracket the answer saturates
/// at `T = 1/ALPHA_MAX`.
pub fn fit_ts_bisection(data: &Dataset, policy: MaskPolicy) -> Result<ScalarFitResult> {
    bisection_on(&Problem::from_dataset(data, policy)?)
}

fn bisection_on(problem: &Problem) -> Result<ScalarFitResult> {
    let finish = |alpha: f64, iterations: usize, converged: bool| -> Result<ScalarFitResult> {
        Ok(ScalarFitResult {
            temperature: (1.0 / alpha).clamp(1.0 / ALPHA_MAX, T_MAX),
            final_nll: problem.evaluate(alpha)?.nll,
            iterations,
            converged,
            method: FitMethod::Bisection,
        })
    };

    let slack = 1e-12 * problem.mean.abs().max(1.0);
    if problem.truth <= problem.mean + slack {
        return finish(ALPHA_MIN, 0, false);
    }
    let g_hi = problem.g(ALPHA_MAX)?;
    if g_hi <= 0.0 {
        return finish(ALPHA_MAX, 0, false);
    }
    let g_lo = problem.g(ALPHA_MIN)?;
    if g_lo >= 0.0 {
        return Err(Error::Numerical(format!(
            "no sign change on the bracket (g(lo) = {g_lo}, g(hi) = {g_hi})"
        )));
    }

    let tol = BISECTION_RTOL * problem.truth.abs();
    let (mut lo, mut hi) = (ALPHA_MIN.ln(), ALPHA_MAX.ln());
    let mut best = (f64::INFINITY, 0.0);
    for it in 1..=400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return finish(best.1, it, best.0 < tol);
        }
        let g = problem.g(mid.exp())?;
        if g.is_nan() {
            return Err(Error::Numerical(format!("g is NaN at 1/T = {}", mid.exp())));
        }
        if g.abs() < best.0 {
            best = (g.abs(), mid.exp());
        }
        if g.abs() < tol {
            return finish(mid.exp(), it, true);
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    finish(best.1, 400, best.0 < tol)
}

/// Residual `g(1/T) = weighted logit sum - true-class logit sum` at `T`.
pub fn bisection_residual(data: &Dataset, policy: MaskPolicy, temperature: f64) -> Result<(f64, f64)> {
    let problem = Problem::from_dataset(data, policy)?;
    Ok((problem.g(1.0 / temperature)?, problem.truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerImageFit {
    pub field: TemperatureField,
    pub fits: Vec<ScalarFitResult>,
}

/// One temperature per image, each solved independently by bisection.
pub fn fit_ibts_per_image(data: &Dataset, policy: MaskPolicy) -> Result<PerImageFit> {
    let bg = data.background();
    let fits = par::map(data.samples(), |s| {
        Problem::new(vec![PixelSet::from_sample(s, policy, bg)])
            .and_then(|p| bisection_on(&p))
            .map_err(|e| e.context(&s.id))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let field = TemperatureField::per_image(fits.iter().map(|f| f.temperature).collect())?;
    Ok(PerImageFit { field, fits })
}

/// `NLL - entropy` of the calibrated probabilities at the requested
/// granularity: one value for `Global`, one per sample for `PerImage`, one
/// per supervised pixel (samples concatenated) for `PerPixel`.
pub fn equilibrium_residual(
    data: &Dataset,
    temps: &TemperatureField,
    granularity: Granularity,
    policy: MaskPolicy,
) -> Result<Vec<f64>> {
    if let Some(n) = temps.len() {
        if n != data.len() {
            return Err(Error::Validation(format!(
                "{n} temperatures for {} samples",
                data.len()
            )));
        }
    }
    let bg = data.background();
    let per_sample = par::map_range(data.len(), |i| -> Result<Vec<(f64, f64)>> {
        let s = &data.samples()[i];
        let t = temps.for_sample(i)?;
        if let crate::tensor::SampleTemperature::Local(g) = t {
            if g.dims() != s.logits.dims() {
                return Err(Error::Validation(format!("{}: temperature map shape", s.id)));
            }
        }
        let mask = policy.mask(&s.labels, bg);
        let mut z = Vec::with_capacity(s.logits.classes());
        let mut out = Vec::new();
        for p in 0..s.logits.pixels() {
            let label = s.labels.at(p);
            if label == IGNORE || !mask.as_ref().map_or(true, |m| m.as_slice()[p]) {
                continue;
            }
            s.logits.pixel_into(p, &mut z);
            let alpha = 1.0 / t.at(p);
            let (lse, w) = scaled_stats(&z, alpha);
            out.push((lse - alpha * z[label as usize], lse - alpha * w));
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let diff = |v: &[(f64, f64)]| {
        let (nll, ent) = v
            .iter()
            .fold((0.0, 0.0), |(a, b), (n, e)| (a + n, b + e));
        nll - ent
    };
    Ok(match granularity {
        Granularity::Global => {
            let (nll, ent) = per_sample
                .iter()
                .flatten()
                .fold((0.0, 0.0), |(a, b), (n, e)| (a + n, b + e));
            vec![nll - ent]
        }
        Granularity::PerImage => per_sample.iter().map(|v| diff(v)).collect(),
        Granularity::PerPixel => per_sample.iter().flatten().map(|(n, e)| n - e).collect(),
    })
}

/// Number of pixels a fit under `policy` would use.
pub fn supervised_pixels(data: &Dataset, policy: MaskPolicy) -> usize {
    let bg = data.background();
    data.samples()
        .iter()
        .map(|s| PixelSet::from_sample(s, policy, bg).len())
        .sum()
}

/// Serialized form of fitted scalar temperatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTemperatures {
    pub method: FitMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_global: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image: Option<BTreeMap<String, f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{LabelMap, LogitMap, Split};

    fn dataset(samples: Vec<(Vec<f32>, Vec<u32>, usize)>) -> Dataset {
        let samples = samples
            .into_iter()
            .enumerate()
            .map(|(i, (z, s, l))| {
                let n = s.len();
                Sample::new(
                    format!("s{i}"),
                    LogitMap::new(l, 1, n, z).unwrap(),
                    LabelMap::new(1, n, s).unwrap(),
                    None,
                )
                .unwrap()
            })
            .collect();
        Dataset::new(Split::Val, samples).unwrap()
    }

    #[test]
    fn flat_objective_keeps_identity() {
        let d = dataset(vec![(vec![0.7; 8], vec![0, 1, 0, 1], 2)]);
        let r = fit_ts_gradient(&d, MaskPolicy::Full, GradientConfig::default()).unwrap();
        assert_eq!(r.temperature, 1.0);
        assert!(r.converged);
    }

    #[test]
    fn true_logit_at_mean_takes_zero_alpha_branch() {
        // each pixel's true-class logit equals its mean logit
        let d = dataset(vec![(vec![1.0, 3.0, 2.0, 2.0, 3.0, 1.0], vec![1, 1], 3)]);
        let r = fit_ts_bisection(&d, MaskPolicy::Full).unwrap();
        assert_eq!(r.temperature, T_MAX);
        assert!(!r.converged);
    }

    #[test]
    fn underconfident_single_pixel_saturates() {
        let d = dataset(vec![(vec![2.0, 0.0], vec![0], 2)]);
        let r = fit_ts_bisection(&d, MaskPolicy::Full).unwrap();
        assert_eq!(r.temperature, 1.0 / ALPHA_MAX);
        assert!(!r.converged);
    }

    #[test]
    fn per_image_branches_are_independent() {
        let d = dataset(vec![
            (vec![1.0, 3.0, 2.0, 2.0, 3.0, 1.0], vec![1, 1], 3),
            (vec![2.0, 0.0, 1.0, 0.5, 0.0, 2.0], vec![0, 0], 3),
        ]);
        let fit = fit_ibts_per_image(&d, MaskPolicy::Full).unwrap();
        assert_eq!(fit.fits[0].temperature, T_MAX);
        assert!(fit.fits[1].temperature < T_MAX);
    }

    #[test]
    fn empty_supervision_is_domain_error() {
        let d = dataset(vec![(vec![1.0, 0.0], vec![IGNORE], 2)]);
        assert!(matches!(
            fit_ts_bisection(&d, MaskPolicy::Full),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn uniform_wrong_labels_have_zero_residual() {
        let d = dataset(vec![(vec![0.0; 8], vec![1, 0, 1, 0], 2)]);
        let t = TemperatureField::global(1.0).unwrap();
        let r = equilibrium_residual(&d, &t, Granularity::Global, MaskPolicy::Full).unwrap();
        assert!(r[0].abs() < 1e-12);
    }
}
