//! Segmentation quality: average surface distance, surface Dice at a
//! tolerance, 95th-percentile surface distance and volume Dice.
//!
//! Surfaces are the pixels of a class with a 4-neighbour outside that class;
//! the image border counts as outside. Distances are Euclidean, in pixels,
//! computed by brute force.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Grid, LabelMap, IGNORE};

/// Surface Dice tolerance in pixels.
pub const SURFACE_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub asd: f64,
    pub sd: f64,
    pub md95: f64,
    pub vd: f64,
}

type Point = (usize, usize);

fn surface(map: &Grid<u32>, class: u32) -> Vec<Point> {
    let (h, w) = map.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if map.get(y, x) != class {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || map.get(y - 1, x) != class
                || map.get(y + 1, x) != class
                || map.get(y, x - 1) != class
                || map.get(y, x + 1) != class;
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn dist(a: Point, b: Point) -> f64 {
    let dy = a.0 as f64 - b.0 as f64;
    let dx = a.1 as f64 - b.1 as f64;
    (dy * dy + dx * dx).sqrt()
}

fn nearest(p: Point, set: &[Point]) -> f64 {
    set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

/// Pixels within `tol` of any surface point.
fn band(shape: (usize, usize), surf: &[Point], tol: f64) -> Grid<bool> {
    let (h, w) = shape;
    let r = tol.floor() as usize;
    let mut g = Grid::filled(h, w, false);
    for &(y, x) in surf {
        for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                if dist((y, x), (yy, xx)) <= tol {
                    g.set(yy, xx, true);
                }
            }
        }
    }
    g
}

/// Nearest-rank percentile of unsorted values, `q` in (0, 100].
pub fn percentile_nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn class_metrics(pred: &Grid<u32>, truth: &Grid<u32>, class: u32) -> SegMetrics {
    let (h, w) = truth.dims();
    let in_p = pred.as_slice().iter().filter(|&&v| v == class).count();
    let in_t = truth.as_slice().iter().filter(|&&v| v == class).count();
    let both = pred
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .filter(|(&a, &b)| a == class && b == class)
        .count();
    let vd = 2.0 * both as f64 / (in_p + in_t) as f64;
    if in_p == 0 || in_t == 0 {
        // one side is missing: distances take the worst value on the grid
        let diag = ((h * h + w * w) as f64).sqrt();
        return SegMetrics {
            asd: diag,
            sd: 0.0,
            md95: diag,
            vd,
        };
    }
    let sp = surface(pred, class);
    let st = surface(truth, class);
    let mut d: Vec<f64> = sp.iter().map(|&p| nearest(p, &st)).collect();
    d.extend(st.iter().map(|&p| nearest(p, &sp)));
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    let md95 = percentile_nearest_rank(&d, 95.0);

    let bp = band((h, w), &sp, SURFACE_TOLERANCE);
    let bt = band((h, w), &st, SURFACE_TOLERANCE);
    let count = |g: &Grid<bool>| g.as_slice().iter().filter(|&&b| b).count();
    let inter = bp
        .as_slice()
        .iter()
        .zip(bt.as_slice())
        .filter(|(&a, &b)| a && b)
        .count();
    let sd = 2.0 * inter as f64 / (count(&bp) + count(&bt)) as f64;
    SegMetrics { asd, sd, md95, vd }
}

/// Per-class metrics averaged over the non-background classes present in
/// either map. Pixels ignored in `truth` are dropped from both maps.
pub fn seg_metrics(pred: &LabelMap, truth: &LabelMap, background: u32) -> Result<SegMetrics> {
    if pred.dims() != truth.dims() {
        return Err(Error::Validation(format!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.dims(),
            truth.dims()
        )));
    }
    let t = truth.grid();
    let p = Grid::from_fn(t.height(), t.width(), |y, x| {
        if t.get(y, x) == IGNORE {
            IGNORE
        } else {
            pred.get(y, x)
        }
    });
    let mut classes: Vec<u32> = p
        .as_slice()
        .iter()
        .chain(t.as_slice())
        .copied()
        .filter(|&v| v != IGNORE && v != background)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::EmptyRegion("no foreground class in either map".into()));
    }
    let per: Vec<SegMetrics> = classes.iter().map(|&c| class_metrics(&p, t, c)).collect();
    let n = per.len() as f64;
    Ok(SegMetrics {
        asd: per.iter().map(|m| m.asd).sum::<f64>() / n,
        sd: per.iter().map(|m| m.sd).sum::<f64>() / n,
        md95: per.iter().map(|m| m.md95).sum::<f64>() / n,
        vd: per.iter().map(|m| m.vd).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, oy: usize, ox: usize, s: usize) -> LabelMap {
        LabelMap::from_grid(Grid::from_fn(h, w, |y, x| {
            ((oy..oy + s).contains(&y) && (ox..ox + s).contains(&x)) as u32
        }))
    }

    #[test]
    fn identical_maps() {
        let a = square(16, 16, 3, 3, 5);
        let m = seg_metrics(&a, &a, 0).unwrap();
        assert_eq!(m, SegMetrics { asd: 0.0, sd: 1.0, md95: 0.0, vd: 1.0 });
    }

    #[test]
    fn offset_squares_volume_dice() {
        let a = square(16, 16, 4, 4, 4);
        let b = square(16, 16, 4, 5, 4);
        let m = seg_metrics(&a, &b, 0).unwrap();
        assert_eq!(m.vd, 0.75);
        // each 4x4 square has a 12-pixel ring; shifted rings are at most 1 apart
        assert!(m.asd > 0.0 && m.asd <= 1.0);
        assert_eq!(m.md95, 1.0);
    }

    #[test]
    fn nearest_rank() {
        assert_eq!(percentile_nearest_rank(&[3.0], 95.0), 3.0);
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&v, 95.0), 19.0);
        assert_eq!(percentile_nearest_rank(&v[..19], 95.0), 19.0);
    }

    #[test]
    fn background_only_is_empty() {
        let a = square(8, 8, 0, 0, 0);
        assert!(matches!(seg_metrics(&a, &a, 0), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn missing_class_takes_worst_distance() {
        let a = square(6, 8, 1, 1, 2);
        let b = square(6, 8, 0, 0, 0);
        let m = seg_metrics(&b, &a, 0).unwrap();
        assert_eq!(m.vd, 0.0);
        assert_eq!(m.sd, 0.0);
        assert_eq!(m.asd, 10.0);
    }
}
