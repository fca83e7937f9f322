//! Self-checks of the temperature-scaling theory on generated data.
//!
//! Each suite returns a list of named checks with the observed value and the
//! limit it was held to. `corrupt` flips one sign inside every suite so the
//! checks can be seen to fail.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MaskPolicy;
use crate::par;
use crate::scaling::{scaled_stats, Granularity};
use crate::synthgen::{generate, Miscalibration, SynthSpec};
use crate::tensor::{Grid, ImageTensor, LabelMap, LogitMap, TemperatureField, IGNORE};
use crate::tree_net::{backward, forward, loss, Filter, Mode, TreeNetParams, DEFAULT_EPSILON};
use crate::ts_opt::{
    bisection_residual, equilibrium_residual, fit_ts_bisection, fit_ts_gradient, supervised_pixels,
    GradientConfig,
};

pub const LEMMA1_VECTORS: usize = 1000;
pub const LEMMA1_GRID: usize = 50;
pub const LEMMA1_TOL: f64 = 1e-9;
pub const THM1_PRESETS: [f64; 4] = [0.5, 2.0, 3.0, 5.0];
pub const THM1_IMAGES: usize = 20;
pub const RESIDUAL_RTOL: f64 = 1e-8;
pub const AGREEMENT_RTOL: f64 = 1e-3;
pub const RECOVERY_RTOL: f64 = 1e-2;
pub const EQUILIBRIUM_TOL: f64 = 1e-4;
pub const GRADCHECK_SEEDS: u64 = 20;
pub const GRADCHECK_RTOL: f64 = 1e-4;
pub const GRADCHECK_PASS_FRACTION: f64 = 0.99;
const FD_STEP: f64 = 1e-5;
/// Gradients this small on both sides count as agreeing.
const FD_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Lemma1,
    Thm1,
    Thm3,
    Gradcheck,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Lemma1, Suite::Thm1, Suite::Thm3, Suite::Gradcheck];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Lemma1 => "lemma1",
            Suite::Thm1 => "thm1",
            Suite::Thm3 => "thm3",
            Suite::Gradcheck => "gradcheck",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| {
                Error::Validation(format!("unknown suite {s:?} (lemma1, thm1, thm3, gradcheck)"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
}

impl Check {
    /// Passes when `value <= limit`.
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= limit,
            value,
            limit,
        }
    }

    /// Passes when `value >= limit`.
    fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= limit,
            value,
            limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub corrupt: bool,
}

pub fn run_suite(suite: Suite, config: &VerifyConfig) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Lemma1 => lemma1(config),
        Suite::Thm1 => thm1(config)?,
        Suite::Thm3 => thm3(config)?,
        Suite::Gradcheck => gradcheck(config)?,
    };
    Ok(SuiteReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn alpha_grid() -> Vec<f64> {
    // log-spaced over [1e-3, 1e3]
    (0..LEMMA1_GRID)
        .map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / (LEMMA1_GRID - 1) as f64))
        .collect()
}

fn lemma1(config: &VerifyConfig) -> Vec<Check> {
    let alphas = alpha_grid();
    let sign = if config.corrupt { -1.0 } else { 1.0 };
    let per_vector = par::map_range(LEMMA1_VECTORS, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let classes = rng.gen_range(2..=10);
        let scale = 10f64.powf(rng.gen_range(-1.0..1.5));
        let z: Vec<f64> = (0..classes).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let mean = z.iter().sum::<f64>() / classes as f64;
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let values: Vec<f64> = alphas.iter().map(|&a| scaled_stats(&z, sign * a).1).collect();
        let drop = values
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0f64, f64::max);
        let outside = values
            .iter()
            .map(|&v| (mean - v).max(v - max).max(0.0))
            .fold(0.0f64, f64::max);
        (drop, outside)
    });
    let drop = per_vector.iter().map(|p| p.0).fold(0.0, f64::max);
    let outside = per_vector.iter().map(|p| p.1).fold(0.0, f64::max);
    vec![
        Check::at_most("max decrease along alpha", drop, LEMMA1_TOL),
        Check::at_most("max excursion outside [mean, max]", outside, LEMMA1_TOL),
    ]
}

fn preset(k: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        miscalibration: Miscalibration::Global { k },
        train: 0,
        val: THM1_IMAGES,
        test: 0,
        seed,
        ..Default::default()
    }
}

fn preset_data(k: f64, seed: u64) -> Result<crate::tensor::Dataset> {
    Ok(generate(&preset(k, seed))?
        .val
        .expect("val split requested")
        .dataset)
}

fn thm1(config: &VerifyConfig) -> Result<Vec<Check>> {
    let policy = MaskPolicy::Full;
    let mut checks = Vec::new();
    for k in THM1_PRESETS {
        let data = preset_data(k, config.seed)?;
        let bis = fit_ts_bisection(&data, policy)?;
        let grad = fit_ts_gradient(&data, policy, GradientConfig::default())?;
        let (g, truth) = bisection_residual(&data, policy, bis.temperature)?;
        let recovered = if config.corrupt {
            1.0 / bis.temperature
        } else {
            bis.temperature
        };
        checks.push(Check::at_least(
            format!("k={k}: bisection on an interior root"),
            bis.converged as u8 as f64,
            1.0,
        ));
        checks.push(Check::at_most(
            format!("k={k}: |g(alpha*)| / |true-class sum|"),
            g.abs() / truth.abs(),
            RESIDUAL_RTOL,
        ));
        checks.push(Check::at_most(
            format!("k={k}: gradient vs bisection, relative"),
            (grad.temperature - bis.temperature).abs() / bis.temperature,
            AGREEMENT_RTOL,
        ));
        checks.push(Check::at_most(
            format!("k={k}: fitted T vs injected k, relative"),
            (recovered - k).abs() / k,
            RECOVERY_RTOL,
        ));
    }
    Ok(checks)
}

fn thm3(config: &VerifyConfig) -> Result<Vec<Check>> {
    let policy = MaskPolicy::Full;
    let mut checks = Vec::new();
    for k in THM1_PRESETS {
        let data = preset_data(k, config.seed)?;
        let bis = fit_ts_bisection(&data, policy)?;
        let temps = TemperatureField::global(bis.temperature)?;
        let residual = equilibrium_residual(&data, &temps, Granularity::Global, policy)?[0];
        // NLL + entropy = 2 NLL - (NLL - entropy)
        let gap = if config.corrupt {
            2.0 * bis.final_nll - residual
        } else {
            residual
        };
        let pixels = supervised_pixels(&data, policy) as f64;
        checks.push(Check::at_most(
            format!("k={k}: |NLL - entropy| per pixel"),
            gap.abs() / pixels,
            EQUILIBRIUM_TOL,
        ));
    }
    Ok(checks)
}

/// Parameters small enough that the root stays mostly positive.
fn random_params(rng: &mut ChaCha8Rng, classes: usize, channels: usize) -> Result<TreeNetParams> {
    let mut p = TreeNetParams::zeros(classes, channels, DEFAULT_EPSILON)?;
    let fill = |f: &mut Filter, rng: &mut ChaCha8Rng| {
        f.weights.iter_mut().for_each(|w| *w = rng.gen_range(-0.03..0.03));
        f.bias = rng.gen_range(-0.3..0.3);
    };
    for f in p.filters_mut() {
        fill(f, rng);
    }
    Ok(p)
}

/// One gradient-check case: analytic vs central differences for every
/// parameter. Returns `(agreeing, compared, excluded)`.
fn gradcheck_case(seed: u64, mode: Mode, corrupt: bool) -> Result<(usize, usize, usize)> {
    let (classes, h, w) = (3, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = LogitMap::new(
        classes,
        h,
        w,
        (0..classes * h * w).map(|_| rng.gen_range(-3.0f32..3.0)).collect(),
    )?;
    let image = ImageTensor::new(1, h, w, (0..h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect())?;
    let labels = LabelMap::new(
        h,
        w,
        (0..h * w)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    IGNORE
                } else {
                    rng.gen_range(0..classes as u32)
                }
            })
            .collect(),
    )?;
    let mask = Grid::from_fn(h, w, |y, x| !(y == 0 && x < 3));
    let params = random_params(&mut rng, classes, 1)?;

    let cache = forward(&params, &logits, Some(&image))?;
    let (_, grad) = backward(&params, &cache, &labels, Some(&mask), mode)?;
    let analytic = grad.to_vec();
    let base = params.to_vec();
    let active: Vec<bool> = cache.pre_activation().iter().map(|&v| v > 0.0).collect();

    let eval = |values: &[f64]| -> Result<(f64, Vec<bool>)> {
        let mut p = params.clone();
        p.set_from_slice(values)?;
        let c = forward(&p, &logits, Some(&image))?;
        let l = loss(&c, &labels, Some(&mask), mode)?;
        Ok((l.nll, c.pre_activation().iter().map(|&v| v > 0.0).collect()))
    };
    let outcomes = par::map_range(base.len(), |i| -> Result<Option<bool>> {
        let mut v = base.clone();
        v[i] = base[i] + FD_STEP;
        let (up, up_active) = eval(&v)?;
        v[i] = base[i] - FD_STEP;
        let (down, down_active) = eval(&v)?;
        if up_active != active || down_active != active {
            return Ok(None);
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = if corrupt { -analytic[i] } else { analytic[i] };
        let scale = a.abs().max(numeric.abs());
        Ok(Some(scale < FD_FLOOR || (a - numeric).abs() / scale < GRADCHECK_RTOL))
    });
    let mut counts = (0, 0, 0);
    for o in outcomes {
        match o? {
            Some(ok) => {
                counts.0 += ok as usize;
                counts.1 += 1;
            }
            None => counts.2 += 1,
        }
    }
    Ok(counts)
}

fn gradcheck(config: &VerifyConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (mode, name) in [(Mode::Lts, "lts"), (Mode::Ibts, "ibts")] {
        let (mut ok, mut compared, mut excluded) = (0, 0, 0);
        for s in 0..GRADCHECK_SEEDS {
            let (a, b, c) = gradcheck_case(config.seed.wrapping_add(s), mode, config.corrupt)?;
            ok += a;
            compared += b;
            excluded += c;
        }
        let fraction = if compared == 0 { 0.0 } else { ok as f64 / compared as f64 };
        checks.push(Check::at_least(
            format!("{name}: fraction within rtol ({compared} compared, {excluded} kink-adjacent)"),
            fraction,
            GRADCHECK_PASS_FRACTION,
        ));
    }
    Ok(checks)
}
