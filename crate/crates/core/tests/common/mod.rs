//! Shared helpers: random calibrated outputs and brute-force metric oracles
//! written independently of the library's binning code.
#![allow(dead_code)]

use calibra_core::scaling::{softmax_temp, CalibratedOutput};
use calibra_core::{Grid, LabelMap, LogitMap, IGNORE};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub logits: LogitMap,
    pub output: CalibratedOutput,
    pub labels: LabelMap,
    pub mask: Option<Grid<bool>>,
}

/// Random logits (softmaxed at a random temperature), labels with a few
/// ignored pixels and, half the time, a random mask.
pub fn random_instance(rng: &mut ChaCha8Rng, max_side: usize) -> Instance {
    let h = rng.gen_range(1..=max_side);
    let w = rng.gen_range(2..=max_side);
    let classes = rng.gen_range(2..=6);
    let scale = rng.gen_range(0.5f32..6.0);
    let logits = LogitMap::new(
        classes,
        h,
        w,
        (0..classes * h * w).map(|_| scale * rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let output = softmax_temp(&logits, rng.gen_range(0.3..3.0)).unwrap();
    let mut labels: Vec<u32> = (0..h * w)
        .map(|p| {
            // correlate labels with the prediction so accuracy is not trivial
            if rng.gen_bool(0.6) {
                output.pred_labels.at(p)
            } else {
                rng.gen_range(0..classes as u32)
            }
        })
        .collect();
    labels.iter_mut().for_each(|l| {
        if rng.gen_bool(0.05) {
            *l = IGNORE
        }
    });
    labels[0] = 0;
    let mask = rng.gen_bool(0.5).then(|| {
        let mut m = Grid::from_fn(h, w, |_, _| rng.gen_bool(0.7));
        m.set(0, 0, true);
        m
    });
    Instance {
        logits,
        output,
        labels: LabelMap::new(h, w, labels).unwrap(),
        mask,
    }
}

fn supervised(inst: &Instance) -> Vec<usize> {
    (0..inst.labels.pixels())
        .filter(|&p| inst.labels.at(p) != IGNORE)
        .filter(|&p| inst.mask.as_ref().map_or(true, |m| m.as_slice()[p]))
        .collect()
}

/// Bin `j` in `1..=n` holds confidences in `((j-1)/n, j/n]`; zero goes to bin 1.
fn bin_of(c: f64, n: usize) -> usize {
    (1..=n).find(|&j| c * n as f64 <= j as f64).unwrap_or(n)
}

/// Per-bin sums of `(indicator - confidence)` and counts.
fn gaps(samples: &[(f64, f64)], n: usize) -> Vec<(f64, usize)> {
    let mut out = vec![(0.0, 0usize); n + 1];
    for &(c, y) in samples {
        let j = bin_of(c, n);
        out[j].0 += y - c;
        out[j].1 += 1;
    }
    out
}

fn top_label(inst: &Instance) -> Vec<(f64, f64)> {
    supervised(inst)
        .into_iter()
        .map(|p| {
            let c = inst.output.confidence.as_slice()[p] as f64;
            let ok = inst.output.pred_labels.at(p) == inst.labels.at(p);
            (c, ok as u8 as f64)
        })
        .collect()
}

pub fn ece(inst: &Instance, n: usize) -> f64 {
    let s = top_label(inst);
    gaps(&s, n).iter().map(|(g, _)| g.abs()).sum::<f64>() / s.len() as f64
}

pub fn mce(inst: &Instance, n: usize) -> f64 {
    gaps(&top_label(inst), n)
        .iter()
        .filter(|(_, k)| *k > 0)
        .map(|(g, k)| g.abs() / *k as f64)
        .fold(0.0, f64::max)
}

fn class_samples(inst: &Instance, l: usize) -> Vec<(f64, f64)> {
    supervised(inst)
        .into_iter()
        .map(|p| {
            let y = (inst.labels.at(p) as usize == l) as u8 as f64;
            (inst.output.probs.at(l, p) as f64, y)
        })
        .collect()
}

pub fn sce(inst: &Instance, n: usize) -> f64 {
    let classes = inst.output.probs.classes();
    let mut total = 0.0;
    for l in 0..classes {
        let s = class_samples(inst, l);
        total += gaps(&s, n).iter().map(|(g, _)| g.abs()).sum::<f64>() / (classes * s.len()) as f64;
    }
    total
}

pub fn ace(inst: &Instance, r: usize) -> f64 {
    let classes = inst.output.probs.classes();
    let mut total = 0.0;
    for l in 0..classes {
        let mut s: Vec<(usize, f64, f64)> =
            class_samples(inst, l).into_iter().enumerate().map(|(i, (c, y))| (i, c, y)).collect();
        s.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let n = s.len();
        let mut gaps = Vec::new();
        for k in 0..r {
            let chunk = &s[k * n / r..(k + 1) * n / r];
            if chunk.is_empty() {
                continue;
            }
            let m = chunk.len() as f64;
            let acc = chunk.iter().map(|t| t.2).sum::<f64>() / m;
            let conf = chunk.iter().map(|t| t.1).sum::<f64>() / m;
            gaps.push((acc - conf).abs());
        }
        total += gaps.iter().sum::<f64>() / gaps.len() as f64;
    }
    total / classes as f64
}
