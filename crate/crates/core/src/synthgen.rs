//! Synthetic segmentation problems with known miscalibration.
//!
//! Each pixel gets a confidence strength `s > 0`. The predicted class equals
//! the scene label with probability `q = e^s / (e^s + L - 1)` and is otherwise
//! a uniformly drawn other class. Logits `z0 = s * onehot(pred)` then satisfy
//! `P(label = l | z0) = softmax(z0)_l`, i.e. `T = 1` is calibrated. The
//! observable logits are `k(x) * z0`, so the ideal temperature field is `k`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::save_dataset;
use crate::error::{Error, Result};
use crate::fusion::{distort, Atlas, AtlasStack};
use crate::metrics::boundary_region;
use crate::npy;
use crate::par;
use crate::tensor::{Dataset, Grid, ImageTensor, LabelMap, LogitMap, Sample, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scene {
    Stripes,
    NestedSquares,
    VoronoiBlobs,
}

impl FromStr for Scene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Scene::Stripes),
            "nested-squares" => Ok(Scene::NestedSquares),
            "voronoi-blobs" => Ok(Scene::VoronoiBlobs),
            other => Err(Error::Validation(format!(
                "unknown scene preset {other:?} (stripes, nested-squares, voronoi-blobs)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum SpatialPreset {
    /// `left` on columns `x < W/2`, `right` elsewhere.
    Halves { left: f64, right: f64 },
    /// Log-linear ramp from `left` at column 0 to `right` at the last column.
    Ramp { left: f64, right: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Miscalibration {
    None,
    Global { k: f64 },
    /// `k_i` log-uniform in `[lo, hi]` per image.
    PerImage { lo: f64, hi: f64 },
    Spatial(SpatialPreset),
}

impl Miscalibration {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        let valid = match *self {
            Miscalibration::None => true,
            Miscalibration::Global { k } => ok(k),
            Miscalibration::PerImage { lo, hi } => ok(lo) && ok(hi) && lo <= hi,
            Miscalibration::Spatial(SpatialPreset::Halves { left, right })
            | Miscalibration::Spatial(SpatialPreset::Ramp { left, right }) => ok(left) && ok(right),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::Domain(format!("miscalibration factors must be positive: {self:?}")))
        }
    }

    fn field(&self, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Grid<f32> {
        match *self {
            Miscalibration::None => Grid::filled(h, w, 1.0),
            Miscalibration::Global { k } => Grid::filled(h, w, k as f32),
            Miscalibration::PerImage { lo, hi } => {
                let k = (rng.gen_range(lo.ln()..=hi.ln())).exp();
                Grid::filled(h, w, k as f32)
            }
            Miscalibration::Spatial(SpatialPreset::Halves { left, right }) => {
                Grid::from_fn(h, w, |_, x| if x < w / 2 { left as f32 } else { right as f32 })
            }
            Miscalibration::Spatial(SpatialPreset::Ramp { left, right }) => Grid::from_fn(h, w, |_, x| {
                let t = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
                (left.ln() * (1.0 - t) + right.ln() * t).exp() as f32
            }),
        }
    }
}

impl FromStr for Miscalibration {
    type Err = Error;

    /// `none`, `global:K`, `per-image:LO:HI`, `spatial:halves:A:B`,
    /// `spatial:ramp:A:B`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Validation(format!("bad number {v:?} in miscalibration {s:?}")))
        };
        let m = match parts.as_slice() {
            ["none"] => Miscalibration::None,
            ["global", k] => Miscalibration::Global { k: num(k)? },
            ["per-image", lo, hi] => Miscalibration::PerImage {
                lo: num(lo)?,
                hi: num(hi)?,
            },
            ["spatial", "halves", a, b] => Miscalibration::Spatial(SpatialPreset::Halves {
                left: num(a)?,
                right: num(b)?,
            }),
            ["spatial", "ramp", a, b] => Miscalibration::Spatial(SpatialPreset::Ramp {
                left: num(a)?,
                right: num(b)?,
            }),
            _ => {
                return Err(Error::Validation(format!(
                    "unknown miscalibration {s:?} (none, global:K, per-image:LO:HI, spatial:halves:A:B, spatial:ramp:A:B)"
                )))
            }
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub scene: Scene,
    pub miscalibration: Miscalibration,
    /// Strength reduction within two pixels of scene boundaries.
    pub rho: f64,
    /// Range of the confidence strength `s`.
    pub strength: (f64, f64),
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            scene: Scene::Stripes,
            miscalibration: Miscalibration::None,
            rho: 0.5,
            strength: (0.1, 4.0),
            seed: 0,
            train: 30,
            val: 10,
            test: 10,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation("shape must be non-empty".into()));
        }
        if self.classes < 2 {
            return Err(Error::Validation("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Domain(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        let (lo, hi) = self.strength;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Domain(format!("strength range must be positive, got {lo}..{hi}")));
        }
        self.miscalibration.validate()
    }
}

/// Ground truth recorded alongside one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTruth {
    /// Logit scale; the ideal temperature field.
    pub k: Grid<f32>,
    /// Probability that the prediction (argmax) is correct.
    pub correct_prob: Grid<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSplit {
    pub dataset: Dataset,
    pub truth: Vec<SampleTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub spec: SynthSpec,
    pub train: Option<GeneratedSplit>,
    pub val: Option<GeneratedSplit>,
    pub test: Option<GeneratedSplit>,
}

impl Generated {
    pub fn split(&self, split: Split) -> Option<&GeneratedSplit> {
        match split {
            Split::Train => self.train.as_ref(),
            Split::Val => self.val.as_ref(),
            Split::Test => self.test.as_ref(),
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Scene label map for one sample.
pub fn scene(kind: Scene, h: usize, w: usize, classes: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let l = classes as u32;
    let grid = match kind {
        Scene::Stripes => {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let period = rng.gen_range(6.0..12.0);
            let phase = rng.gen_range(0.0..period * classes as f64);
            let (c, s) = (theta.cos(), theta.sin());
            Grid::from_fn(h, w, |y, x| {
                let t = (x as f64 * c + y as f64 * s + phase) / period;
                (t.floor().rem_euclid(classes as f64)) as u32
            })
        }
        Scene::NestedSquares => {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let ring = rng.gen_range(4.0..9.0);
            let offset = rng.gen_range(0..l);
            Grid::from_fn(h, w, |y, x| {
                let d = (y as f64 - cy).abs().max((x as f64 - cx).abs());
                ((d / ring).floor() as u32 + offset) % l
            })
        }
        Scene::VoronoiBlobs => {
            let n = ((h * w) as f64 / 150.0).ceil().max(classes as f64) as usize;
            let seeds: Vec<(f64, f64, u32)> = (0..n)
                .map(|i| {
                    let label = if i < classes { i as u32 } else { rng.gen_range(0..l) };
                    (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), label)
                })
                .collect();
            Grid::from_fn(h, w, |y, x| {
                let mut best = (f64::INFINITY, 0);
                for &(sy, sx, label) in &seeds {
                    let d = (sy - y as f64).powi(2) + (sx - x as f64).powi(2);
                    if d < best.0 {
                        best = (d, label);
                    }
                }
                best.1
            })
        }
    };
    LabelMap::from_grid(grid)
}

fn sample(spec: &SynthSpec, split: Split, index: usize, stream: u64) -> Result<(Sample, SampleTruth)> {
    let (h, w, classes) = (spec.height, spec.width, spec.classes);
    let mut rng = rng_for(spec.seed, stream);
    let labels = scene(spec.scene, h, w, classes, &mut rng);
    let near = boundary_region(&labels, 2).mask;
    let k = spec.miscalibration.field(h, w, &mut rng);
    let n = h * w;
    let (lo, hi) = spec.strength;
    let mut logits = vec![0f32; classes * n];
    let mut image = vec![0f32; n];
    let mut correct = vec![0f32; n];
    for p in 0..n {
        let mut s = rng.gen_range(lo..=hi);
        if near.as_slice()[p] {
            s *= 1.0 - spec.rho;
        }
        let q = s.exp() / (s.exp() + (classes - 1) as f64);
        let truth = labels.at(p);
        let pred = if rng.gen::<f64>() < q {
            truth
        } else {
            let other = rng.gen_range(0..classes as u32 - 1);
            if other >= truth {
                other + 1
            } else {
                other
            }
        };
        logits[pred as usize * n + p] = (k.as_slice()[p] as f64 * s) as f32;
        correct[p] = q as f32;
        let base = truth as f64 / (classes - 1) as f64;
        image[p] = (base + 0.15 * rng.gen_range(-1.0..1.0)) as f32;
    }
    let id = format!("{split}-{index:03}");
    let sample = Sample::new(
        id,
        LogitMap::new(classes, h, w, logits)?,
        labels,
        Some(ImageTensor::new(1, h, w, image)?),
    )?;
    Ok((
        sample,
        SampleTruth {
            k,
            correct_prob: Grid::new(h, w, correct)?,
        },
    ))
}

fn generate_split(spec: &SynthSpec, split: Split, count: usize, stream0: u64) -> Result<Option<GeneratedSplit>> {
    if count == 0 {
        return Ok(None);
    }
    let parts = par::map_range(count, |i| sample(spec, split, i, stream0 + i as u64));
    let mut samples = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    for p in parts {
        let (s, t) = p?;
        samples.push(s);
        truth.push(t);
    }
    Ok(Some(GeneratedSplit {
        dataset: Dataset::new(split, samples)?,
        truth,
    }))
}

/// Generates train/val/test splits. Each sample draws from its own stream
/// of the seeded generator, so results do not depend on thread count.
pub fn generate(spec: &SynthSpec) -> Result<Generated> {
    spec.validate()?;
    let val0 = spec.train as u64;
    let test0 = val0 + spec.val as u64;
    Ok(Generated {
        spec: spec.clone(),
        train: generate_split(spec, Split::Train, spec.train, 0)?,
        val: generate_split(spec, Split::Val, spec.val, val0)?,
        test: generate_split(spec, Split::Test, spec.test, test0)?,
    })
}

/// Writes `<dir>/<split>.json` manifests, tensors, and `truth/` with the
/// per-sample `k` fields and correctness probabilities.
pub fn write_generated(gen: &Generated, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut manifests = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let Some(part) = gen.split(split) else { continue };
        manifests.push(save_dataset(&part.dataset, dir)?);
        let tdir = dir.join("truth").join(split.to_string());
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        for (s, t) in part.dataset.samples().iter().zip(&part.truth) {
            npy::save_grid(&t.k, tdir.join(format!("{}_k.npy", s.id)))?;
            npy::save_grid(&t.correct_prob, tdir.join(format!("{}_correct_prob.npy", s.id)))?;
        }
    }
    let path = dir.join("truth").join("spec.json");
    fs::create_dir_all(dir.join("truth")).map_err(|e| Error::io(dir, e))?;
    fs::write(&path, serde_json::to_string_pretty(&gen.spec)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifests)
}

/// How atlas probabilities are distorted for the miscalibrated variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Distortion {
    /// One temperature for every atlas.
    Global { t: f64 },
    /// Per-atlas temperature, log-uniform in `[lo, hi]`.
    PerAtlas { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub scene: Scene,
    pub atlases: usize,
    /// How many of the atlases (counted from the first) share their errors.
    pub correlated: usize,
    /// Range of the per-atlas correctness probability field.
    pub correctness: (f64, f64),
    pub distortion: Distortion,
    pub seed: u64,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            scene: Scene::VoronoiBlobs,
            atlases: 5,
            correlated: 2,
            correctness: (0.3, 0.95),
            distortion: Distortion::PerAtlas { lo: 0.1, hi: 10.0 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionBench {
    pub truth: LabelMap,
    /// Atlases carrying their true correctness probabilities.
    pub stack: AtlasStack,
    /// Temperature-distorted probabilities, one map per atlas.
    pub distorted: Vec<Grid<f64>>,
    /// Distortion temperature applied to each atlas.
    pub distortion_t: Vec<f64>,
}

impl FusionBench {
    pub fn distorted_stack(&self) -> Result<AtlasStack> {
        self.stack.with_probs(self.distorted.clone())
    }

    /// Reference probabilities: 1 where the atlas is right, `1/L` elsewhere.
    pub fn oracle_probs(&self, classes: usize) -> Vec<Grid<f64>> {
        self.stack
            .atlases()
            .iter()
            .map(|a| {
                let (h, w) = self.truth.dims();
                Grid::from_fn(h, w, |y, x| {
                    if a.labels.get(y, x) == self.truth.get(y, x) {
                        1.0
                    } else {
                        1.0 / classes as f64
                    }
                })
            })
            .collect()
    }
}

/// Smooth field in `[lo, hi]` built from a random plane wave.
fn wave(h: usize, w: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Grid<f64> {
    let fy = rng.gen_range(-0.25..0.25);
    let fx = rng.gen_range(-0.25..0.25);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    Grid::from_fn(h, w, |y, x| {
        let v = 0.5 + 0.5 * (fy * y as f64 + fx * x as f64 + phase).sin();
        lo + (hi - lo) * v
    })
}

/// One fusion benchmark: a target label map and `n` atlases whose labels
/// are the target corrupted according to spatially varying correctness
/// probabilities. The first `correlated` atlases share their random draws
/// and wrong labels, so they tend to fail together.
pub fn generate_fusion_bench(spec: &FusionSpec) -> Result<FusionBench> {
    build_fusion_bench(spec, 0, None)
}

/// A second bench for fitting probability calibration: fresh truth and
/// atlases from another stream of the same seed, distorted with the
/// temperatures of `main` so each atlas keeps its miscalibration.
pub fn generate_calibration_bench(spec: &FusionSpec, main: &FusionBench) -> Result<FusionBench> {
    build_fusion_bench(spec, 1, Some(&main.distortion_t))
}

fn build_fusion_bench(spec: &FusionSpec, stream: u64, fixed_t: Option<&[f64]>) -> Result<FusionBench> {
    if spec.atlases < 2 {
        return Err(Error::Validation("a fusion bench needs at least 2 atlases".into()));
    }
    if spec.correlated > spec.atlases {
        return Err(Error::Validation("more correlated atlases than atlases".into()));
    }
    let (lo, hi) = spec.correctness;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Domain(format!("correctness range {lo}..{hi} outside [0, 1]")));
    }
    let (h, w, l) = (spec.height, spec.width, spec.classes);
    let mut rng = rng_for(spec.seed, stream);
    let truth = scene(spec.scene, h, w, l, &mut rng);
    let probs: Vec<Grid<f64>> = (0..spec.atlases).map(|_| wave(h, w, lo, hi, &mut rng)).collect();
    let distortion_t: Vec<f64> = match fixed_t {
        Some(t) if t.len() == spec.atlases => t.to_vec(),
        Some(_) => return Err(Error::Validation("one distortion temperature per atlas required".into())),
        None => (0..spec.atlases)
            .map(|_| match spec.distortion {
                Distortion::Global { t } => t,
                Distortion::PerAtlas { lo, hi } => rng.gen_range(lo.ln()..=hi.ln()).exp(),
            })
            .collect(),
    };

    let n = h * w;
    let mut labels = vec![vec![0u32; n]; spec.atlases];
    for p in 0..n {
        let t = truth.at(p);
        let wrong = |rng: &mut ChaCha8Rng| {
            let o = rng.gen_range(0..l as u32 - 1);
            if o >= t {
                o + 1
            } else {
                o
            }
        };
        let shared_u: f64 = rng.gen();
        let shared_wrong = wrong(&mut rng);
        for (i, lab) in labels.iter_mut().enumerate() {
            let (u, bad) = if i < spec.correlated {
                (shared_u, shared_wrong)
            } else {
                (rng.gen::<f64>(), wrong(&mut rng))
            };
            lab[p] = if u < probs[i].as_slice()[p] { t } else { bad };
        }
    }
    let atlases = labels
        .into_iter()
        .zip(&probs)
        .map(|(lab, p)| -> Result<Atlas> {
            Ok(Atlas {
                labels: LabelMap::new(h, w, lab)?,
                probs: p.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let distorted = probs
        .iter()
        .zip(&distortion_t)
        .map(|(p, &t)| p.map(|v| distort(v, t)))
        .collect();
    Ok(FusionBench {
        truth,
        stack: AtlasStack::new(atlases)?,
        distorted,
        distortion_t,
    })
}

/// Manifest of a fusion bench written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub spec: FusionSpec,
    pub truth: String,
    pub atlases: Vec<BenchAtlas>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchAtlas {
    pub labels: String,
    pub prob_true: String,
    pub prob_uncal: String,
    pub distortion_t: f64,
}

/// Writes `bench.json`, the truth map and per-atlas NPYs into `dir`.
pub fn write_fusion_bench(spec: &FusionSpec, bench: &FusionBench, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    npy::save_labels(&bench.truth, dir.join("truth.npy"))?;
    let mut atlases = Vec::new();
    for (i, (a, d)) in bench.stack.atlases().iter().zip(&bench.distorted).enumerate() {
        let entry = BenchAtlas {
            labels: format!("atlas_{i}_labels.npy"),
            prob_true: format!("atlas_{i}_prob_true.npy"),
            prob_uncal: format!("atlas_{i}_prob_uncal.npy"),
            distortion_t: bench.distortion_t[i],
        };
        npy::save_labels(&a.labels, dir.join(&entry.labels))?;
        npy::save_f64(&[a.probs.height(), a.probs.width()], a.probs.as_slice(), dir.join(&entry.prob_true))?;
        npy::save_f64(&[d.height(), d.width()], d.as_slice(), dir.join(&entry.prob_uncal))?;
        atlases.push(entry);
    }
    let manifest = BenchManifest {
        spec: spec.clone(),
        truth: "truth.npy".into(),
        atlases,
    };
    let path = dir.join("bench.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn load_prob_grid(path: &Path) -> Result<Grid<f64>> {
    let (shape, data) = npy::load_f64(path)?;
    match shape[..] {
        [h, w] => Grid::new(h, w, data),
        _ => Err(Error::Validation(format!("{}: expected a rank-2 array", path.display()))),
    }
}

/// Reads a bench written by [`write_fusion_bench`].
pub fn read_fusion_bench(dir: impl AsRef<Path>) -> Result<(BenchManifest, FusionBench)> {
    let dir = dir.as_ref();
    let path = dir.join("bench.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BenchManifest = serde_json::from_str(&text)?;
    let truth = npy::load_labels(dir.join(&manifest.truth))?;
    let mut atlases = Vec::new();
    let mut distorted = Vec::new();
    for a in &manifest.atlases {
        atlases.push(Atlas {
            labels: npy::load_labels(dir.join(&a.labels))?,
            probs: load_prob_grid(&dir.join(&a.prob_true))?,
        });
        distorted.push(load_prob_grid(&dir.join(&a.prob_uncal))?);
    }
    let bench = FusionBench {
        truth,
        stack: AtlasStack::new(atlases)?,
        distorted,
        distortion_t: manifest.atlases.iter().map(|a| a.distortion_t).collect(),
    };
    Ok((manifest, bench))
}
