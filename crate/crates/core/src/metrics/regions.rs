//! Evaluation regions: label boundaries, the foreground-plus-halo "All"
//! region, and random square patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Grid, LabelMap, IGNORE};

/// Default halo radius around label boundaries, in pixels.
pub const BOUNDARY_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionKind {
    All,
    Boundary,
    LocalPatch { origin: (usize, usize), size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub kind: RegionKind,
    pub mask: Grid<bool>,
}

impl RegionMask {
    pub fn count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.as_slice().iter().any(|&b| b)
    }
}

/// Pixels that have a differently-labelled pixel within Chebyshev distance
/// `radius`. With `radius == 0` only 4-neighbours are considered.
/// Ignored pixels never count as "different".
pub fn boundary_region(labels: &LabelMap, radius: usize) -> RegionMask {
    let (h, w) = labels.dims();
    let mut mask = Grid::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let here = labels.get(y, x);
            if here == IGNORE {
                continue;
            }
            let differs = |yy: usize, xx: usize| {
                let v = labels.get(yy, xx);
                v != IGNORE && v != here
            };
            let hit = if radius == 0 {
                (y > 0 && differs(y - 1, x))
                    || (y + 1 < h && differs(y + 1, x))
                    || (x > 0 && differs(y, x - 1))
                    || (x + 1 < w && differs(y, x + 1))
            } else {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
                (y0..=y1).any(|yy| (x0..=x1).any(|xx| differs(yy, xx)))
            };
            if hit {
                mask.set(y, x, true);
            }
        }
    }
    RegionMask {
        kind: RegionKind::Boundary,
        mask,
    }
}

/// Non-background pixels together with the boundary halo.
pub fn all_region(labels: &LabelMap, radius: usize, background: u32) -> RegionMask {
    let boundary = boundary_region(labels, radius);
    let (h, w) = labels.dims();
    let mask = Grid::from_fn(h, w, |y, x| {
        let v = labels.get(y, x);
        v != IGNORE && (v != background || boundary.mask.get(y, x))
    });
    RegionMask {
        kind: RegionKind::All,
        mask,
    }
}

/// `count` square patches with uniformly random origins, deterministic per
/// seed. `size` is clamped to the smaller image side.
pub fn local_patches(shape: (usize, usize), count: usize, size: usize, seed: u64) -> Vec<RegionMask> {
    let (h, w) = shape;
    let size = size.min(h).min(w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let oy = rng.gen_range(0..=h - size);
            let ox = rng.gen_range(0..=w - size);
            let mask = Grid::from_fn(h, w, |y, x| {
                (oy..oy + size).contains(&y) && (ox..ox + size).contains(&x)
            });
            RegionMask {
                kind: RegionKind::LocalPatch {
                    origin: (oy, ox),
                    size,
                },
                mask,
            }
        })
        .collect()
}

/// Which pixels a calibration loss is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Every labelled pixel.
    Full,
    /// The All region with the given boundary radius.
    All { radius: usize },
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::All {
            radius: BOUNDARY_RADIUS,
        }
    }
}

impl MaskPolicy {
    pub fn mask(&self, labels: &LabelMap, background: u32) -> Option<Grid<bool>> {
        match *self {
            MaskPolicy::Full => None,
            MaskPolicy::All { radius } => Some(all_region(labels, radius, background).mask),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(h: usize, w: usize, f: impl Fn(usize) -> u32) -> LabelMap {
        LabelMap::from_grid(Grid::from_fn(h, w, |_, x| f(x)))
    }

    fn mask_cols(m: &RegionMask) -> Vec<usize> {
        let w = m.mask.width();
        (0..w).filter(|&x| m.mask.get(0, x)).collect()
    }

    #[test]
    fn constant_labels_have_no_boundary() {
        let l = cols(8, 8, |_| 1);
        assert!(boundary_region(&l, 2).is_empty());
    }

    #[test]
    fn vertical_edge_radius_two() {
        // label 0 in columns 0..4, label 1 in 4..8; edge at column 4
        let l = cols(8, 8, |x| (x >= 4) as u32);
        let m = boundary_region(&l, 2);
        assert_eq!(mask_cols(&m), vec![2, 3, 4, 5]);
        // every row is identical
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.mask.get(y, x), (2..=5).contains(&x));
            }
        }
    }

    #[test]
    fn radius_zero_is_four_neighbourhood() {
        let mut g = Grid::filled(5, 5, 0u32);
        g.set(2, 2, 1);
        let m = boundary_region(&LabelMap::from_grid(g), 0);
        let on: Vec<(usize, usize)> = (0..5)
            .flat_map(|y| (0..5).map(move |x| (y, x)))
            .filter(|&(y, x)| m.mask.get(y, x))
            .collect();
        assert_eq!(on, vec![(1, 2), (2, 1), (2, 2), (2, 3), (3, 2)]);
    }

    #[test]
    fn all_region_examples() {
        let bg = cols(6, 6, |_| 0);
        assert!(all_region(&bg, 2, 0).is_empty());

        let fg = cols(6, 6, |x| 1 + (x >= 3) as u32);
        assert_eq!(all_region(&fg, 2, 0).count(), 36);

        // 2x2 foreground square at (4..6, 4..6) in a 10x10 background
        let g = Grid::from_fn(10, 10, |y, x| ((4..6).contains(&y) && (4..6).contains(&x)) as u32);
        let m = all_region(&LabelMap::from_grid(g), 2, 0);
        // brute force: square plus background pixels within Chebyshev 2 of it
        for y in 0..10usize {
            for x in 0..10usize {
                let in_sq = (4..6).contains(&y) && (4..6).contains(&x);
                let near = (4..6).any(|sy: usize| {
                    (4..6).any(|sx: usize| y.abs_diff(sy) <= 2 && x.abs_diff(sx) <= 2)
                });
                assert_eq!(m.mask.get(y, x), in_sq || near, "({y},{x})");
            }
        }
    }

    #[test]
    fn patches_cover_image_when_size_matches() {
        let ps = local_patches((16, 16), 10, 16, 3);
        assert_eq!(ps.len(), 10);
        assert!(ps.iter().all(|p| p.count() == 256));
    }

    #[test]
    fn patches_are_seeded_and_bounded() {
        let a = local_patches((100, 100), 10, 72, 9);
        let b = local_patches((100, 100), 10, 72, 9);
        assert_eq!(a, b);
        for p in &a {
            let RegionKind::LocalPatch { origin, size } = p.kind else {
                panic!()
            };
            assert_eq!(size, 72);
            assert!(origin.0 <= 28 && origin.1 <= 28);
        }
    }

    #[test]
    fn oversize_patch_is_clamped() {
        let p = &local_patches((20, 30), 1, 72, 0)[0];
        assert_eq!(p.kind, RegionKind::LocalPatch { origin: (0, p_origin_x(p)), size: 20 });
    }

    fn p_origin_x(p: &RegionMask) -> usize {
        match p.kind {
            RegionKind::LocalPatch { origin, .. } => origin.1,
            _ => unreachable!(),
        }
    }
}
