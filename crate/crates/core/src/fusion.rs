//! Multi-atlas label fusion: voting, spatially varying weighted voting and
//! joint label fusion driven by per-atlas correctness probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Grid, LabelMap, IGNORE};

#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub labels: LabelMap,
    /// Probability that the atlas label is correct at each pixel.
    pub probs: Grid<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasStack {
    atlases: Vec<Atlas>,
}

impl AtlasStack {
    pub fn new(atlases: Vec<Atlas>) -> Result<Self> {
        let first = atlases
            .first()
            .ok_or_else(|| Error::Validation("atlas stack is empty".into()))?;
        let dims = first.labels.dims();
        for (i, a) in atlases.iter().enumerate() {
            if a.labels.dims() != dims || a.probs.dims() != dims {
                return Err(Error::Validation(format!(
                    "atlas {i}: shape differs from atlas 0 {dims:?}"
                )));
            }
            if let Some(p) = a.probs.as_slice().iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::Validation(format!(
                    "atlas {i}: probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(Self { atlases })
    }

    pub fn atlases(&self) -> &[Atlas] {
        &self.atlases
    }

    pub fn len(&self) -> usize {
        self.atlases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atlases.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.atlases[0].labels.dims()
    }

    fn pixels(&self) -> usize {
        self.atlases[0].labels.pixels()
    }

    /// Same labels, different probabilities.
    pub fn with_probs(&self, probs: Vec<Grid<f64>>) -> Result<Self> {
        if probs.len() != self.len() {
            return Err(Error::Validation(format!(
                "{} probability maps for {} atlases",
                probs.len(),
                self.len()
            )));
        }
        Self::new(
            self.atlases
                .iter()
                .zip(probs)
                .map(|(a, p)| Atlas {
                    labels: a.labels.clone(),
                    probs: p,
                })
                .collect(),
        )
    }

    /// Pixels where the atlases do not all agree.
    pub fn changeable(&self) -> Grid<bool> {
        let (h, w) = self.dims();
        Grid::from_fn(h, w, |y, x| {
            let first = self.atlases[0].labels.get(y, x);
            self.atlases.iter().any(|a| a.labels.get(y, x) != first)
        })
    }
}

/// Label with the largest total weight; ties go to the lowest label.
fn weighted_vote(votes: impl Iterator<Item = (u32, f64)>) -> u32 {
    let mut tally: Vec<(u32, f64)> = Vec::new();
    for (label, w) in votes {
        if label == IGNORE {
            continue;
        }
        match tally.iter_mut().find(|(l, _)| *l == label) {
            Some(t) => t.1 += w,
            None => tally.push((label, w)),
        }
    }
    tally.sort_by_key(|t| t.0);
    let mut best: Option<(u32, f64)> = None;
    for (l, w) in tally {
        if best.map_or(true, |(_, bw)| w > bw) {
            best = Some((l, w));
        }
    }
    best.map_or(IGNORE, |b| b.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMode {
    Majority,
    Plurality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutput {
    pub labels: LabelMap,
    /// Majority mode only: pixels where the winner has no strict majority
    /// and the plurality winner was emitted instead.
    pub no_majority: Grid<bool>,
}

impl VoteOutput {
    pub fn no_majority_count(&self) -> usize {
        self.no_majority.as_slice().iter().filter(|&&b| b).count()
    }
}

pub fn fuse_vote(stack: &AtlasStack, mode: VoteMode) -> VoteOutput {
    let (h, w) = stack.dims();
    let n = stack.len();
    let mut flags = Grid::filled(h, w, false);
    let labels = Grid::from_fn(h, w, |y, x| {
        let winner = weighted_vote(stack.atlases.iter().map(|a| (a.labels.get(y, x), 1.0)));
        if mode == VoteMode::Majority {
            let votes = stack.atlases.iter().filter(|a| a.labels.get(y, x) == winner).count();
            if 2 * votes <= n {
                flags.set(y, x, true);
            }
        }
        winner
    });
    VoteOutput {
        labels: LabelMap::from_grid(labels),
        no_majority: flags,
    }
}

/// Votes weighted by each atlas's correctness probability.
pub fn fuse_svwv(stack: &AtlasStack) -> LabelMap {
    let (h, w) = stack.dims();
    LabelMap::from_grid(Grid::from_fn(h, w, |y, x| {
        weighted_vote(stack.atlases.iter().map(|a| (a.labels.get(y, x), a.probs.get(y, x))))
    }))
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
fn solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<()> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col] == 0.0 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * b[k];
        }
        b[row] = s / a[row * n + row];
    }
    Some(())
}

/// Joint label fusion weights at one pixel: `(M + reg I) w ∝ 1` with
/// `M = (1 - p)(1 - p)^T`, normalized to sum to one.
pub fn jlf_weights(p: &[f64], reg: f64) -> Result<Vec<f64>> {
    let n = p.len();
    if n == 0 {
        return Err(Error::Validation("no atlases".into()));
    }
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(Error::Domain(format!("regularizer must be non-negative, got {reg}")));
    }
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("probability {v} outside [0, 1]")));
    }
    // M is invariant under atlas permutations when every p_i is equal, so
    // the solution is exactly uniform; skip the solver's rounding.
    if p.iter().all(|&v| v == p[0]) {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (1.0 - p[i]) * (1.0 - p[j]);
        }
        a[i * n + i] += reg;
    }
    let mut w = vec![1.0; n];
    let failed = || Error::Numerical(format!("JLF system is singular (reg = {reg})"));
    solve(&mut a, &mut w, n).ok_or_else(failed)?;
    let total: f64 = w.iter().sum();
    if !total.is_finite() || total == 0.0 || w.iter().any(|v| !v.is_finite()) {
        return Err(failed());
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Diagonal loading for the JLF system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularization {
    Absolute { reg: f64 },
    /// `max(scale * trace(M) / n, floor)`.
    Relative { scale: f64, floor: f64 },
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Relative {
            scale: 0.01,
            floor: 1e-6,
        }
    }
}

impl Regularization {
    pub fn value(&self, p: &[f64]) -> f64 {
        match *self {
            Regularization::Absolute { reg } => reg,
            Regularization::Relative { scale, floor } => {
                let trace: f64 = p.iter().map(|v| (1.0 - v) * (1.0 - v)).sum();
                (scale * trace / p.len() as f64).max(floor)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JlfOutput {
    pub labels: LabelMap,
    /// Weight planes, one per atlas, row-major `(n, H, W)`.
    pub weights: Vec<f64>,
}

pub fn fuse_jlf(stack: &AtlasStack, reg: Regularization) -> Result<JlfOutput> {
    let (h, w) = stack.dims();
    let n = stack.len();
    let pixels = stack.pixels();
    let rows = par::map_range(h, |y| -> Result<Vec<(u32, Vec<f64>)>> {
        let mut out = Vec::with_capacity(w);
        let mut p = vec![0.0; n];
        for x in 0..w {
            for (pi, a) in p.iter_mut().zip(&stack.atlases) {
                *pi = a.probs.get(y, x);
            }
            let wts = jlf_weights(&p, reg.value(&p)).map_err(|e| e.context(&format!("pixel ({y}, {x})")))?;
            let label = weighted_vote(stack.atlases.iter().zip(&wts).map(|(a, &wt)| (a.labels.get(y, x), wt)));
            out.push((label, wts));
        }
        Ok(out)
    });
    let mut labels = Vec::with_capacity(pixels);
    let mut weights = vec![0.0; n * pixels];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (label, wts)) in row?.into_iter().enumerate() {
            labels.push(label);
            for (i, v) in wts.into_iter().enumerate() {
                weights[i * pixels + y * w + x] = v;
            }
        }
    }
    Ok(JlfOutput {
        labels: LabelMap::new(h, w, labels)?,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteChange {
    pub changeable: usize,
    pub changed: usize,
    pub rate: f64,
    /// Fraction of changed pixels that went from wrong to correct.
    pub wrong_to_correct: Option<f64>,
    /// Fraction of changed pixels that went from correct to wrong.
    pub correct_to_wrong: Option<f64>,
}

pub fn vote_change_report(
    before: &LabelMap,
    after: &LabelMap,
    truth: &LabelMap,
    changeable: &Grid<bool>,
) -> Result<VoteChange> {
    if before.dims() != truth.dims() || after.dims() != truth.dims() || changeable.dims() != truth.dims() {
        return Err(Error::Validation("vote-change inputs differ in shape".into()));
    }
    let (mut total, mut changed, mut w2c, mut c2w) = (0usize, 0usize, 0usize, 0usize);
    for p in 0..truth.pixels() {
        if !changeable.as_slice()[p] {
            continue;
        }
        total += 1;
        let (b, a, t) = (before.at(p), after.at(p), truth.at(p));
        if a != b {
            changed += 1;
            w2c += (b != t && a == t) as usize;
            c2w += (b == t && a != t) as usize;
        }
    }
    let frac = |k: usize| (changed > 0).then(|| k as f64 / changed as f64);
    Ok(VoteChange {
        changeable: total,
        changed,
        rate: if total > 0 { changed as f64 / total as f64 } else { 0.0 },
        wrong_to_correct: frac(w2c),
        correct_to_wrong: frac(c2w),
    })
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Temperature-distorts a probability through its logit: `σ(logit(p) / t)`.
pub fn distort(p: f64, t: f64) -> f64 {
    sigmoid(logit(p) / t)
}

/// Binary temperature scaling: the `T` minimizing the NLL of `outcomes`
/// under `σ(logit(p) / T)`. Solved by bisection on the derivative in
/// `1/T`, which is monotone.
pub fn fit_binary_temperature(probs: &[f64], outcomes: &[bool]) -> Result<f64> {
    if probs.len() != outcomes.len() || probs.is_empty() {
        return Err(Error::Validation("need matching, non-empty probabilities and outcomes".into()));
    }
    let s: Vec<f64> = probs.iter().map(|&p| logit(p)).collect();
    // d/dalpha of the NLL; increasing in alpha
    let grad = |alpha: f64| -> f64 {
        s.iter()
            .zip(outcomes)
            .map(|(&si, &y)| (sigmoid(alpha * si) - y as u8 as f64) * si)
            .sum()
    };
    let (mut lo, mut hi) = (1e-6f64, 1e6f64);
    if grad(lo) >= 0.0 {
        return Ok(1.0 / lo);
    }
    if grad(hi) <= 0.0 {
        return Ok(1.0 / hi);
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if grad(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
    }
    Ok(1.0 / (lo * hi).sqrt())
}

/// One binary temperature per atlas, fitted to whether the atlas label
/// matches `truth`, using the probabilities the stack carries.
pub fn fit_atlas_temperatures(stack: &AtlasStack, truth: &LabelMap) -> Result<Vec<f64>> {
    if stack.dims() != truth.dims() {
        return Err(Error::Validation("truth and atlases differ in shape".into()));
    }
    stack
        .atlases()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let outcomes: Vec<bool> = (0..truth.pixels()).map(|p| a.labels.at(p) == truth.at(p)).collect();
            fit_binary_temperature(a.probs.as_slice(), &outcomes).map_err(|e| e.context(&format!("atlas {i}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(cols: &[(&[u32], &[f64])]) -> AtlasStack {
        AtlasStack::new(
            cols.iter()
                .map(|(l, p)| Atlas {
                    labels: LabelMap::new(1, l.len(), l.to_vec()).unwrap(),
                    probs: Grid::new(1, p.len(), p.to_vec()).unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn votes() {
        let s = stack(&[(&[0, 0, 2], &[0.5; 3]), (&[0, 1, 1], &[0.5; 3]), (&[1, 1, 0], &[0.5; 3])]);
        let mv = fuse_vote(&s, VoteMode::Majority);
        assert_eq!(mv.labels.as_slice(), &[0, 1, 0]);
        // pixel 2 votes {2, 1, 0}: no majority, lowest label wins the tie
        assert_eq!(mv.no_majority.as_slice(), &[false, false, true]);
        let tie = stack(&[(&[0], &[0.5]), (&[1], &[0.5])]);
        assert_eq!(fuse_vote(&tie, VoteMode::Plurality).labels.as_slice(), &[0]);
        let one = stack(&[(&[3, 1], &[0.2, 0.9])]);
        assert_eq!(fuse_vote(&one, VoteMode::Plurality).labels.as_slice(), &[3, 1]);
    }

    #[test]
    fn svwv_examples() {
        let s = stack(&[(&[0], &[0.9]), (&[1], &[0.8])]);
        assert_eq!(fuse_svwv(&s).as_slice(), &[0]);
        let s = stack(&[(&[1], &[0.3]), (&[1], &[0.3]), (&[0], &[0.5])]);
        assert_eq!(fuse_svwv(&s).as_slice(), &[1]);
    }

    #[test]
    fn jlf_examples() {
        let w = jlf_weights(&[1.0, 0.5], 0.01).unwrap();
        let u = [100.0, 1.0 / 0.26];
        let s = u[0] + u[1];
        assert!((w[0] - u[0] / s).abs() < 1e-12 && (w[1] - u[1] / s).abs() < 1e-12);
        assert!((w[0] - 0.9629).abs() < 1e-4);
        assert_eq!(jlf_weights(&[0.0, 0.0], 0.01).unwrap(), vec![0.5, 0.5]);
        assert_eq!(jlf_weights(&[0.7; 3], 0.0).unwrap(), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn jlf_good_atlas_beats_correlated_pair() {
        let s = stack(&[(&[1], &[0.2]), (&[1], &[0.2]), (&[0], &[0.95])]);
        let out = fuse_jlf(&s, Regularization::default()).unwrap();
        assert_eq!(out.labels.as_slice(), &[0]);
        let sum: f64 = (0..3).map(|i| out.weights[i]).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn solver_matches_hand_solution() {
        let mut a = vec![0.0, 2.0, 1.0, 1.0];
        let mut b = vec![4.0, 3.0];
        solve(&mut a, &mut b, 2).unwrap();
        assert_eq!(b, vec![1.0, 2.0]);
        let mut a = vec![0.0; 4];
        assert!(solve(&mut a, &mut [1.0, 1.0], 2).is_none());
    }

    #[test]
    fn change_report() {
        let truth = LabelMap::new(1, 12, vec![0; 12]).unwrap();
        let before = LabelMap::new(1, 12, vec![0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1]).unwrap();
        let after = LabelMap::new(1, 12, vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1]).unwrap();
        let mut ch = vec![true; 10];
        ch.extend([false, false]);
        let r = vote_change_report(&before, &after, &truth, &Grid::new(1, 12, ch).unwrap()).unwrap();
        assert_eq!((r.changeable, r.changed), (10, 2));
        assert_eq!(r.rate, 0.2);
        assert_eq!(r.wrong_to_correct, Some(0.5));
        assert_eq!(r.correct_to_wrong, Some(0.5));
        let none = vote_change_report(&before, &before, &truth, &Grid::filled(1, 12, false)).unwrap();
        assert_eq!((none.rate, none.wrong_to_correct), (0.0, None));
    }

    #[test]
    fn binary_ts_recovers_distortion() {
        // outcomes drawn deterministically at the true rate in each group
        let mut probs = Vec::new();
        let mut outcomes = Vec::new();
        for k in 1..10 {
            let p = k as f64 / 10.0;
            for j in 0..100 {
                probs.push(distort(p, 0.5));
                outcomes.push((j as f64) < p * 100.0);
            }
        }
        // logit(distorted) = 2 logit(p), so dividing by T = 2 undoes it
        let t = fit_binary_temperature(&probs, &outcomes).unwrap();
        assert!((t - 2.0).abs() < 1e-6, "{t}");
    }
}
