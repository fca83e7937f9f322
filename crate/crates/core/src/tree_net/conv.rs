//! 5x5 convolutions with dilation 2 and zero padding, same-size output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KERNEL: usize = 5;
pub const DILATION: usize = 2;
pub const TAPS: usize = KERNEL * KERNEL;
const HALF: isize = (KERNEL / 2) as isize;

/// Multi-channel `f64` planes, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Validation(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// One output channel: weights laid out `[channel][ky][kx]`, plus a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub channels: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Filter {
    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            weights: vec![0.0; channels * TAPS],
            bias: 0.0,
        }
    }

    pub fn weight(&self, c: usize, ky: usize, kx: usize) -> f64 {
        self.weights[c * TAPS + ky * KERNEL + kx]
    }

    pub fn len(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Row/column ranges of output pixels whose tap at offset `d` stays inside
/// a dimension of length `n`.
#[inline]
fn valid(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

#[inline]
fn offset(k: usize) -> isize {
    (k as isize - HALF) * DILATION as isize
}

fn check(input: &FeatureMap, filter: &Filter) -> Result<()> {
    if filter.channels != input.channels || filter.weights.len() != filter.channels * TAPS {
        return Err(Error::Validation(format!(
            "filter expects {} channels, input has {}",
            filter.channels, input.channels
        )));
    }
    Ok(())
}

/// Applies each filter to `input`, one output plane per filter.
pub fn conv_forward(input: &FeatureMap, filters: &[&Filter]) -> Result<Vec<Vec<f64>>> {
    for f in filters {
        check(input, f)?;
    }
    let (h, w) = (input.height, input.width);
    let mut outs: Vec<Vec<f64>> = filters.iter().map(|f| vec![f.bias; h * w]).collect();
    for c in 0..input.channels {
        let plane = input.plane(c);
        for ky in 0..KERNEL {
            let dy = offset(ky);
            let (y0, y1) = valid(h, dy);
            for kx in 0..KERNEL {
                let dx = offset(kx);
                let (x0, x1) = valid(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for (f, out) in filters.iter().zip(outs.iter_mut()) {
                    let wt = f.weight(c, ky, kx);
                    if wt == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let src_row = (y as isize + dy) as usize * w;
                        let src = &plane[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        let dst = &mut out[y * w + x0..y * w + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    Ok(outs)
}

/// Single-filter convenience wrapper.
pub fn conv2d_dilated(input: &FeatureMap, filter: &Filter) -> Result<Vec<f64>> {
    Ok(conv_forward(input, &[filter])?.pop().unwrap())
}

/// Accumulates weight and bias gradients of each filter given the gradient
/// of its output plane.
pub fn conv_weight_grad(input: &FeatureMap, douts: &[&[f64]], grads: &mut [&mut Filter]) {
    let (h, w) = (input.height, input.width);
    for (dout, g) in douts.iter().zip(grads.iter_mut()) {
        g.bias += dout.iter().sum::<f64>();
    }
    for c in 0..input.channels {
        let plane = input.plane(c);
        for ky in 0..KERNEL {
            let dy = offset(ky);
            let (y0, y1) = valid(h, dy);
            for kx in 0..KERNEL {
                let dx = offset(kx);
                let (x0, x1) = valid(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for (dout, g) in douts.iter().zip(grads.iter_mut()) {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize * w) as isize;
                        let src = &plane[(src_row + x0 as isize + dx) as usize
                            ..(src_row + x1 as isize + dx) as usize];
                        let d = &dout[y * w + x0..y * w + x1];
                        acc += d.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    g.weights[c * TAPS + ky * KERNEL + kx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop reference.
    fn reference(input: &FeatureMap, f: &Filter) -> Vec<f64> {
        let (h, w) = (input.height as isize, input.width as isize);
        let mut out = vec![0.0; (h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                let mut s = f.bias;
                for c in 0..input.channels {
                    for ky in 0..5 {
                        for kx in 0..5 {
                            let yy = y + 2 * (ky as isize - 2);
                            let xx = x + 2 * (kx as isize - 2);
                            if yy >= 0 && yy < h && xx >= 0 && xx < w {
                                s += input.plane(c)[(yy * w + xx) as usize] * f.weight(c, ky, kx);
                            }
                        }
                    }
                }
                out[(y * w + x) as usize] = s;
            }
        }
        out
    }

    fn random_filter(rng: &mut ChaCha8Rng, channels: usize) -> Filter {
        Filter {
            channels,
            weights: (0..channels * TAPS).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bias: rng.gen_range(-1.0..1.0),
        }
    }

    #[test]
    fn constant_from_bias() {
        let input = FeatureMap::new(1, 3, 4, vec![2.0; 12]).unwrap();
        let f = Filter {
            bias: 0.7,
            ..Filter::zeros(1)
        };
        assert_eq!(conv2d_dilated(&input, &f).unwrap(), vec![0.7; 12]);
    }

    #[test]
    fn center_tap_is_identity() {
        let data: Vec<f64> = (0..20).map(f64::from).collect();
        let input = FeatureMap::new(1, 4, 5, data.clone()).unwrap();
        let mut f = Filter::zeros(1);
        f.weights[2 * KERNEL + 2] = 1.0;
        assert_eq!(conv2d_dilated(&input, &f).unwrap(), data);
    }

    #[test]
    fn matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (c, h, w) in [(2, 7, 7), (3, 1, 9), (1, 12, 5)] {
            let input =
                FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .unwrap();
            let f = random_filter(&mut rng, c);
            let got = conv2d_dilated(&input, &f).unwrap();
            let want = reference(&input, &f);
            // same summation order as the reference, so equality is exact
            assert_eq!(got, want);
        }
    }

    #[test]
    fn channel_mismatch() {
        let input = FeatureMap::zeros(2, 3, 3);
        assert!(matches!(
            conv2d_dilated(&input, &Filter::zeros(1)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn weight_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input =
            FeatureMap::new(2, 6, 7, (0..84).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let f = random_filter(&mut rng, 2);
        let dout: Vec<f64> = (0..42).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |f: &Filter| -> f64 {
            reference(&input, f).iter().zip(&dout).map(|(a, b)| a * b).sum()
        };
        let mut g = Filter::zeros(2);
        conv_weight_grad(&input, &[&dout], &mut [&mut g]);
        // the loss is linear in the weights, so differences are exact up to rounding
        for i in 0..f.weights.len() {
            let mut p = f.clone();
            p.weights[i] += 1.0;
            assert!((loss(&p) - loss(&f) - g.weights[i]).abs() < 1e-9);
        }
        let mut p = f.clone();
        p.bias += 1.0;
        assert!((loss(&p) - loss(&f) - g.bias).abs() < 1e-9);
    }
}
