use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use calibra_core::dataset::{load_dataset, Manifest};
use calibra_core::fusion::{
    distort, fit_atlas_temperatures, fuse_jlf, fuse_svwv, fuse_vote, vote_change_report, AtlasStack,
    Regularization, VoteMode,
};
use calibra_core::metrics::{
    evaluate, pool_bins, seg_metrics, summarize, write_diagram_csv, CalibrationReport, MaskPolicy,
    RegionsConfig,
};
use calibra_core::model::{calibrate, Method, Model, ModelFile};
use calibra_core::npy;
use calibra_core::par;
use calibra_core::scaling::{argmax, softmax_temp, CalibratedOutput};
use calibra_core::synthgen::{
    generate, generate_calibration_bench, generate_fusion_bench, read_fusion_bench, write_fusion_bench,
    write_generated, Distortion, FusionSpec, Miscalibration, Scene, SynthSpec,
};
use calibra_core::tree_net::{predict, train, Mode, TrainConfig};
use calibra_core::ts_opt::{fit_ts_bisection, fit_ts_gradient, GradientConfig};
use calibra_core::verify::{run_suite, Suite, VerifyConfig};
use calibra_core::{Dataset, Grid, LabelMap, ProbMap, SampleTemperature, Split, TemperatureKind};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{ApplyArgs, CliError, CliResult, EvalArgs, FitArgs, FuseArgs, GenArgs, VerifyArgs};

/// What a command prints and whether it counts as a success.
pub struct Outcome {
    pub json: Value,
    pub success: bool,
}

impl Outcome {
    fn ok(json: Value) -> Self {
        Self { json, success: true }
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

fn parse_shape(s: &str) -> CliResult<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| usage(format!("--shape {s:?}: expected HxW")))?;
    let dim = |v: &str| {
        v.parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| usage(format!("--shape {s:?}: dimensions must be positive integers")))
    };
    Ok((dim(h)?, dim(w)?))
}

fn parse_pair(flag: &str, s: &str) -> CliResult<(f64, f64)> {
    let bad = || usage(format!("--{flag} {s:?}: expected LO:HI"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

fn parse_distortion(s: &str) -> CliResult<Distortion> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |v: &str| -> CliResult<f64> {
        v.parse::<f64>()
            .ok()
            .filter(|t| *t > 0.0 && t.is_finite())
            .ok_or_else(|| usage(format!("--distortion {s:?}: temperatures must be positive")))
    };
    match parts.as_slice() {
        ["global", t] => Ok(Distortion::Global { t: num(t)? }),
        ["per-atlas", lo, hi] => Ok(Distortion::PerAtlas {
            lo: num(lo)?,
            hi: num(hi)?,
        }),
        _ => Err(usage(format!("--distortion {s:?}: expected global:T or per-atlas:LO:HI"))),
    }
}

fn parse_mask(s: &str, radius: usize) -> CliResult<MaskPolicy> {
    match s {
        "full" => Ok(MaskPolicy::Full),
        "all" => Ok(MaskPolicy::All { radius }),
        other => Err(usage(format!("--mask {other:?}: expected full or all"))),
    }
}

fn parse_schedule(s: &str) -> CliResult<Vec<(usize, f64)>> {
    s.split(',')
        .map(|step| {
            let bad = || usage(format!("--lr-schedule step {step:?}: expected EPOCH:LR"));
            let (e, lr) = step.trim().split_once(':').ok_or_else(bad)?;
            Ok((e.parse().map_err(|_| bad())?, lr.parse().map_err(|_| bad())?))
        })
        .collect()
}

/// `data` may be a dataset directory or a manifest path.
fn manifest_path(data: &Path, split: &str) -> CliResult<PathBuf> {
    let split: Split = split.parse().map_err(usage)?;
    Ok(if data.is_dir() {
        data.join(format!("{split}.json"))
    } else {
        data.to_path_buf()
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn gen(a: &GenArgs) -> CliResult<Outcome> {
    let (height, width) = parse_shape(&a.shape)?;
    let scene = a
        .preset
        .as_deref()
        .map(|p| p.parse::<Scene>().map_err(usage))
        .transpose()?;
    if a.fusion_bench {
        let spec = FusionSpec {
            height,
            width,
            classes: a.classes,
            scene: scene.unwrap_or(Scene::VoronoiBlobs),
            atlases: a.atlases,
            correlated: a.correlated,
            correctness: parse_pair("correctness", &a.correctness)?,
            distortion: parse_distortion(&a.distortion)?,
            seed: a.seed,
        };
        if a.classes < 2 || a.atlases < 2 || a.correlated > a.atlases {
            return Err(usage("need --classes >= 2, --atlases >= 2 and --correlated <= --atlases"));
        }
        let bench = generate_fusion_bench(&spec)?;
        let calib = generate_calibration_bench(&spec, &bench)?;
        let path = write_fusion_bench(&spec, &bench, &a.out)?;
        let calib_path = write_fusion_bench(&spec, &calib, a.out.join("calib"))?;
        info!("fusion bench written to {}", a.out.display());
        return Ok(Outcome::ok(json!({
            "bench": path,
            "calibration_bench": calib_path,
            "atlases": spec.atlases,
            "distortion_t": bench.distortion_t,
        })));
    }

    let miscalibration: Miscalibration = a.miscal.parse().map_err(usage)?;
    let mut spec = SynthSpec {
        height,
        width,
        classes: a.classes,
        scene: scene.unwrap_or(Scene::Stripes),
        miscalibration,
        rho: a.rho,
        seed: a.seed,
        train: a.train,
        val: a.val,
        test: a.test,
        ..Default::default()
    };
    if let Some(s) = &a.strength {
        spec.strength = parse_pair("strength", s)?;
    }
    spec.validate().map_err(usage)?;
    let generated = generate(&spec)?;
    let manifests = write_generated(&generated, &a.out)?;
    info!("dataset written to {}", a.out.display());
    Ok(Outcome::ok(json!({
        "out": a.out,
        "manifests": manifests,
        "truth": a.out.join("truth"),
        "samples": { "train": spec.train, "val": spec.val, "test": spec.test },
        "spec": spec,
    })))
}

fn load_validation(data: &Path) -> CliResult<Dataset> {
    let path = manifest_path(data, "val")?;
    let empty = match Manifest::read(&path) {
        Ok(m) => m.samples.is_empty(),
        Err(_) if !path.exists() => true,
        Err(e) => return Err(e.into()),
    };
    if empty {
        return Err(runtime(format!("no validation samples in {}", data.display())));
    }
    Ok(load_dataset(path)?)
}

pub fn fit(a: &FitArgs) -> CliResult<Outcome> {
    let method: Method = a.method.parse().map_err(usage)?;
    let policy = parse_mask(&a.mask, a.radius)?;
    let config = TrainConfig {
        epochs: a.epochs,
        lr_schedule: match a.lr {
            Some(lr) => vec![(0, lr)],
            None => parse_schedule(&a.lr_schedule)?,
        },
        batch: a.batch,
        seed: a.seed,
        mask: policy,
        epsilon: a.epsilon,
        ..Default::default()
    };
    config.validate().map_err(usage)?;
    if !(a.epsilon > 0.0 && a.epsilon.is_finite()) {
        return Err(usage("--epsilon must be positive"));
    }
    let gradient = match a.solver.as_str() {
        "bisection" => false,
        "gradient" => true,
        other => return Err(usage(format!("--solver {other:?}: expected bisection or gradient"))),
    };

    let val = load_validation(&a.data)?;
    let out_dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(out_dir)?;
    let stem = a
        .out
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| usage("--out needs a file name"))?
        .to_string();
    let mut model = ModelFile {
        method,
        classes: val.classes(),
        t_global: None,
        per_image: None,
        params: None,
        loss_curve: None,
        best_epoch: None,
    };
    let mut summary = json!({ "method": method, "model": a.out, "classes": val.classes() });
    match method {
        Method::Identity => {}
        Method::Ts => {
            let fit = if gradient {
                fit_ts_gradient(&val, policy, GradientConfig::default())?
            } else {
                fit_ts_bisection(&val, policy)?
            };
            if !fit.converged {
                warn!("temperature fit ended on a clamp or the iteration budget: T = {}", fit.temperature);
            }
            model.t_global = Some(fit.temperature);
            summary["t_global"] = json!(fit.temperature);
            summary["fit"] = json!(fit);
        }
        Method::Ibts | Method::Lts => {
            let mode = if method == Method::Lts { Mode::Lts } else { Mode::Ibts };
            let train_path = manifest_path(&a.data, "train")?;
            let owned;
            let train_set = match Manifest::read(&train_path) {
                Ok(m) if !m.samples.is_empty() => {
                    owned = load_dataset(&train_path)?;
                    &owned
                }
                _ => {
                    warn!("no training split, training on the validation split");
                    &val
                }
            };
            let fitted = train(train_set, Some(&val), mode, &config)?;
            let params_dir = format!("{stem}_params");
            let loss_file = format!("{stem}_loss.csv");
            fitted.params.save(out_dir.join(&params_dir))?;
            write_text(&out_dir.join(&loss_file), &fitted.loss_csv())?;
            if mode == Mode::Ibts {
                let field = predict(&fitted.params, &val, mode)?;
                if let TemperatureKind::PerImage(ts) = field.kind() {
                    model.per_image = Some(
                        val.samples()
                            .iter()
                            .map(|s| s.id.clone())
                            .zip(ts.iter().copied())
                            .collect(),
                    );
                }
            }
            model.params = Some(params_dir.into());
            model.loss_curve = Some(loss_file.into());
            model.best_epoch = Some(fitted.best_epoch);
            summary["best_epoch"] = json!(fitted.best_epoch);
            summary["epochs"] = json!(fitted.loss_curve.len());
            summary["final"] = json!(fitted.loss_curve.last());
        }
    }
    model.write(&a.out)?;
    Ok(Outcome::ok(summary))
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionEntry {
    id: String,
    probs: PathBuf,
    temperature: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Predictions {
    split: Split,
    classes: usize,
    samples: Vec<PredictionEntry>,
}

const PREDICTIONS: &str = "predictions.json";

pub fn apply(a: &ApplyArgs) -> CliResult<Outcome> {
    let manifest = manifest_path(&a.data, &a.split)?;
    let model = Model::load(&a.model)?;
    let data = load_dataset(&manifest)?;
    let temps = model.temperatures(&data)?;
    let outputs = calibrate(&data, &temps)?;
    create_dir(&a.out)?;
    let mut entries = Vec::with_capacity(data.len());
    let mut t_sum = 0.0;
    let mut t_count = 0usize;
    for (i, (s, out)) in data.samples().iter().zip(&outputs).enumerate() {
        let (h, w) = s.logits.dims();
        let field = match temps.for_sample(i)? {
            SampleTemperature::Uniform(t) => Grid::filled(h, w, t as f32),
            SampleTemperature::Local(g) => g.clone(),
        };
        t_sum += field.as_slice().iter().map(|&t| t as f64).sum::<f64>();
        t_count += field.len();
        let entry = PredictionEntry {
            id: s.id.clone(),
            probs: format!("{}_probs.npy", s.id).into(),
            temperature: format!("{}_temperature.npy", s.id).into(),
        };
        npy::save_npy(&out.probs.to_tensor(), a.out.join(&entry.probs))?;
        npy::save_grid(&field, a.out.join(&entry.temperature))?;
        entries.push(entry);
    }
    let preds = Predictions {
        split: data.split(),
        classes: data.classes(),
        samples: entries,
    };
    write_text(&a.out.join(PREDICTIONS), &(serde_json::to_string_pretty(&preds)? + "\n"))?;
    Ok(Outcome::ok(json!({
        "out": a.out,
        "split": data.split(),
        "samples": data.len(),
        "mean_temperature": t_sum / t_count.max(1) as f64,
    })))
}

/// Calibrated output from stored probabilities. The label map comes from the
/// raw logits, which the probabilities rank identically up to `f32` ties.
fn output_from_probs(probs: ProbMap, logits: &calibra_core::LogitMap) -> CliResult<CalibratedOutput> {
    let (h, w) = probs.dims();
    let n = probs.pixels();
    let mut z = Vec::new();
    let pred: Vec<u32> = (0..n)
        .map(|p| {
            logits.pixel_into(p, &mut z);
            argmax(z.iter().copied()) as u32
        })
        .collect();
    let confidence: Vec<f32> = (0..n).map(|p| probs.at(pred[p] as usize, p)).collect();
    Ok(CalibratedOutput {
        probs,
        confidence: Grid::new(h, w, confidence)?,
        pred_labels: LabelMap::new(h, w, pred)?,
    })
}

#[derive(Debug, Serialize)]
struct SampleReport<'a> {
    id: &'a str,
    #[serde(flatten)]
    report: &'a CalibrationReport,
}

pub fn eval(a: &EvalArgs) -> CliResult<Outcome> {
    let mut config = RegionsConfig {
        all: false,
        boundary: false,
        local: false,
        radius: a.radius,
        bins: a.bins,
        patch_count: a.patches,
        patch_size: a.patch_size,
        seed: a.seed,
        ..Default::default()
    };
    for r in a.regions.split(',').map(str::trim).filter(|r| !r.is_empty()) {
        match r {
            "all" => config.all = true,
            "boundary" => config.boundary = true,
            "local" => config.local = true,
            other => return Err(usage(format!("--regions: unknown region {other:?}"))),
        }
    }
    if !(config.all || config.boundary || config.local) {
        return Err(usage("--regions selects no region"));
    }
    if a.bins == 0 || a.patch_size == 0 {
        return Err(usage("--bins and --patch-size must be positive"));
    }

    let data = load_dataset(manifest_path(&a.data, &a.split)?)?;
    config.background = data.background();
    let files: Option<BTreeMap<String, PathBuf>> = match &a.pred {
        Some(dir) => {
            let path = dir.join(PREDICTIONS);
            let text = fs::read_to_string(&path)
                .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
            let preds: Predictions = serde_json::from_str(&text)?;
            if preds.classes != data.classes() {
                return Err(runtime(format!(
                    "predictions have {} classes, data has {}",
                    preds.classes,
                    data.classes()
                )));
            }
            Some(preds.samples.into_iter().map(|e| (e.id, dir.join(e.probs))).collect())
        }
        None => None,
    };

    let reports = par::map(data.samples(), |s| -> CliResult<CalibrationReport> {
        let output = match &files {
            Some(f) => {
                let path = f
                    .get(&s.id)
                    .ok_or_else(|| runtime(format!("no prediction for sample {}", s.id)))?;
                let probs = ProbMap::try_from(npy::load_npy(path)?)?;
                if probs.dims() != s.logits.dims() || probs.classes() != s.logits.classes() {
                    return Err(runtime(format!("{}: prediction shape does not match the logits", s.id)));
                }
                output_from_probs(probs, &s.logits)?
            }
            None => softmax_temp(&s.logits, 1.0)?,
        };
        Ok(evaluate(&output, &s.labels, &config)?)
    })
    .into_iter()
    .collect::<CliResult<Vec<_>>>()?;

    let mut warnings = 0;
    for (s, r) in data.samples().iter().zip(&reports) {
        for w in &r.warnings {
            warn!("{}: {w}", s.id);
            warnings += 1;
        }
    }
    let summary = summarize(&reports);
    let pooled_all = pool_bins(reports.iter().filter_map(|r| r.bins.all.as_deref()));
    let pooled_boundary = pool_bins(reports.iter().filter_map(|r| r.bins.boundary.as_deref()));
    if let Some(path) = &a.out {
        let samples: Vec<SampleReport> = data
            .samples()
            .iter()
            .zip(&reports)
            .map(|(s, report)| SampleReport { id: &s.id, report })
            .collect();
        let doc = json!({
            "split": data.split(),
            "config": config,
            "summary": summary,
            "bins": { "all": pooled_all, "boundary": pooled_boundary },
            "samples": samples,
        });
        write_text(path, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    }
    if let Some(path) = &a.diagram {
        let mut buf = Vec::new();
        write_diagram_csv(&pooled_all, &mut buf).map_err(runtime)?;
        fs::write(path, buf).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(Outcome::ok(json!({
        "split": data.split(),
        "summary": summary,
        "warnings": warnings,
        "report": a.out,
    })))
}

pub fn fuse(a: &FuseArgs) -> CliResult<Outcome> {
    enum Fusion {
        Vote(VoteMode),
        Svwv,
        Jlf,
    }
    let method = match a.method.as_str() {
        "mv" => Fusion::Vote(VoteMode::Majority),
        "pv" => Fusion::Vote(VoteMode::Plurality),
        "svwv" => Fusion::Svwv,
        "jlf" => Fusion::Jlf,
        other => return Err(usage(format!("--method {other:?}: expected mv, pv, svwv or jlf"))),
    };
    if !["true", "uncal", "calibrated"].contains(&a.probs.as_str()) {
        return Err(usage(format!("--probs {:?}: expected true, uncal or calibrated", a.probs)));
    }
    let reg = match a.reg {
        Some(reg) if reg > 0.0 => Regularization::Absolute { reg },
        Some(_) => return Err(usage("--reg must be positive")),
        None if a.reg_scale > 0.0 => Regularization::Relative {
            scale: a.reg_scale,
            floor: 1e-6,
        },
        None => return Err(usage("--reg-scale must be positive")),
    };

    let (_, bench) = read_fusion_bench(&a.bench)?;
    let mut extra = json!({});
    let stack: AtlasStack = match a.probs.as_str() {
        "true" => bench.stack.clone(),
        "uncal" => bench.distorted_stack()?,
        _ => {
            let (_, calib) = read_fusion_bench(a.bench.join("calib"))
                .map_err(|e| runtime(format!("calibrated probabilities need a calibration bench: {e}")))?;
            let temps = fit_atlas_temperatures(&calib.distorted_stack()?, &calib.truth)?;
            let probs = bench
                .distorted
                .iter()
                .zip(&temps)
                .map(|(p, &t)| p.map(|v| distort(v, t)))
                .collect();
            extra["calibration_t"] = json!(temps);
            bench.stack.with_probs(probs)?
        }
    };

    create_dir(&a.out)?;
    let majority = fuse_vote(&stack, VoteMode::Majority);
    let labels = match method {
        Fusion::Vote(mode) => {
            let out = if mode == VoteMode::Majority {
                majority.clone()
            } else {
                fuse_vote(&stack, mode)
            };
            if mode == VoteMode::Majority {
                extra["no_majority"] = json!(out.no_majority_count());
            }
            out.labels
        }
        Fusion::Svwv => fuse_svwv(&stack),
        Fusion::Jlf => {
            let out = fuse_jlf(&stack, reg)?;
            if a.dump_weights {
                let (h, w) = stack.dims();
                npy::save_f64(&[stack.len(), h, w], &out.weights, a.out.join("weights.npy"))?;
            }
            out.labels
        }
    };
    npy::save_labels(&labels, a.out.join("fused_labels.npy"))?;
    let seg = seg_metrics(&labels, &bench.truth, 0)?;
    let change = vote_change_report(&majority.labels, &labels, &bench.truth, &stack.changeable())?;
    write_text(&a.out.join("change.json"), &(serde_json::to_string_pretty(&change)? + "\n"))?;
    let mut doc = json!({
        "method": a.method,
        "probs": a.probs,
        "seg": seg,
        "vote_change": change,
        "out": a.out,
    });
    if let (Value::Object(d), Value::Object(e)) = (&mut doc, extra) {
        d.extend(e);
    }
    Ok(Outcome::ok(doc))
}

pub fn verify(a: &VerifyArgs) -> CliResult<Outcome> {
    let suites = a
        .suite
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Suite>().map_err(usage))
        .collect::<CliResult<Vec<_>>>()?;
    if suites.is_empty() {
        return Err(usage("--suite selects nothing"));
    }
    let config = VerifyConfig {
        seed: a.seed,
        corrupt: a.corrupt,
    };
    let mut reports = Vec::new();
    for s in suites {
        let r = run_suite(s, &config)?;
        for c in &r.checks {
            eprintln!(
                "{:<10} {:<4} {:<60} value={:.3e} limit={:.3e}",
                r.suite.to_string(),
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.limit
            );
        }
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    Ok(Outcome {
        json: json!({ "seed": a.seed, "passed": passed, "suites": reports }),
        success: passed,
    })
}
