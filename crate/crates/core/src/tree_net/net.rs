//! The gated tree network predicting a per-pixel temperature.
//!
//! ```text
//! a_m = v_m * logits + 1      (m = 1..4)      a_5 = v_5 * image + 1
//! g_j = sigmoid(c_j * logits)                 (j = 5..8)
//! n_5 = g_5 a_1 + (1 - g_5) a_2               n_6 = g_6 a_3 + (1 - g_6) a_4
//! n_7 = g_7 n_5 + (1 - g_7) n_6
//! T   = ReLU(g_8 a_5 + (1 - g_8) n_7) + eps
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::conv::{conv_forward, conv_weight_grad, FeatureMap, Filter, DILATION, KERNEL};
use crate::error::{Error, Result};
use crate::npy;
use crate::scaling::scaled_stats;
use crate::tensor::{Grid, ImageTensor, LabelMap, LogitMap, IGNORE};

pub const DEFAULT_EPSILON: f64 = 1e-3;

const FILTER_NAMES: [&str; 9] = ["v1", "v2", "v3", "v4", "v5", "c5", "c6", "c7", "c8"];

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNetParams {
    classes: usize,
    channels: usize,
    epsilon: f64,
    /// Logit leaves v1..v4.
    pub leaves: [Filter; 4],
    /// Image leaf v5.
    pub image_leaf: Filter,
    /// Gates c5..c8.
    pub gates: [Filter; 4],
}

impl TreeNetParams {
    /// All-zero initialization, which yields `T = 1 + eps` everywhere.
    pub fn zeros(classes: usize, channels: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
        }
        if classes < 2 || channels == 0 {
            return Err(Error::Validation(format!(
                "need at least 2 classes and 1 image channel, got {classes} and {channels}"
            )));
        }
        Ok(Self {
            classes,
            channels,
            epsilon,
            leaves: std::array::from_fn(|_| Filter::zeros(classes)),
            image_leaf: Filter::zeros(channels),
            gates: std::array::from_fn(|_| Filter::zeros(classes)),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Filters in canonical order v1..v4, v5, c5..c8.
    pub fn filters(&self) -> [&Filter; 9] {
        let [v1, v2, v3, v4] = &self.leaves;
        let [c5, c6, c7, c8] = &self.gates;
        [v1, v2, v3, v4, &self.image_leaf, c5, c6, c7, c8]
    }

    pub fn filters_mut(&mut self) -> [&mut Filter; 9] {
        let [v1, v2, v3, v4] = &mut self.leaves;
        let [c5, c6, c7, c8] = &mut self.gates;
        [v1, v2, v3, v4, &mut self.image_leaf, c5, c6, c7, c8]
    }

    pub fn len(&self) -> usize {
        self.filters().iter().map(|f| f.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattened parameters: per filter, weights then bias.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for f in self.filters() {
            out.extend_from_slice(&f.weights);
            out.push(f.bias);
        }
        out
    }

    pub fn set_from_slice(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                self.len(),
                values.len()
            )));
        }
        let mut rest = values;
        for f in self.filters_mut() {
            let n = f.weights.len();
            f.weights.copy_from_slice(&rest[..n]);
            f.bias = rest[n];
            rest = &rest[n + 1..];
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.classes, self.channels, self.epsilon).expect("valid shape")
    }

    fn check_inputs(&self, logits: &LogitMap, image: Option<&ImageTensor>) -> Result<()> {
        if logits.classes() != self.classes {
            return Err(Error::Validation(format!(
                "network expects {} classes, logits have {}",
                self.classes,
                logits.classes()
            )));
        }
        if let Some(img) = image {
            if img.channels() != self.channels || img.dims() != logits.dims() {
                return Err(Error::Validation(format!(
                    "image {}x{:?} does not match network channels {} / logits {:?}",
                    img.channels(),
                    img.dims(),
                    self.channels,
                    logits.dims()
                )));
            }
        }
        Ok(())
    }

    /// Saves one NPY kernel per filter plus `header.json` with the biases.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut biases = std::collections::BTreeMap::new();
        for (name, f) in FILTER_NAMES.iter().zip(self.filters()) {
            npy::save_f64(&[f.channels, KERNEL, KERNEL], &f.weights, dir.join(format!("{name}.npy")))?;
            biases.insert(name.to_string(), f.bias);
        }
        let header = ParamsHeader {
            epsilon: self.epsilon,
            classes: self.classes,
            channels: self.channels,
            dilation: DILATION,
            biases,
        };
        let path = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("header.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: ParamsHeader = serde_json::from_str(&text)?;
        if header.dilation != DILATION {
            return Err(Error::Validation(format!(
                "only dilation {DILATION} is supported, header says {}",
                header.dilation
            )));
        }
        let mut params = Self::zeros(header.classes, header.channels, header.epsilon)?;
        for (name, f) in FILTER_NAMES.iter().zip(params.filters_mut()) {
            let (shape, data) = npy::load_f64(dir.join(format!("{name}.npy")))?;
            if shape != [f.channels, KERNEL, KERNEL] {
                return Err(Error::Validation(format!(
                    "{name}: expected kernel shape ({}, 5, 5), got {shape:?}",
                    f.channels
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{name}: non-finite weights")));
            }
            f.weights = data;
            f.bias = *header
                .biases
                .get(*name)
                .ok_or_else(|| Error::Validation(format!("header lacks bias for {name}")))?;
        }
        Ok(params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsHeader {
    epsilon: f64,
    classes: usize,
    channels: usize,
    dilation: usize,
    biases: std::collections::BTreeMap<String, f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    snapshot: Vec<f64>,
    logits: FeatureMap,
    image: FeatureMap,
    /// Leaves a1..a5.
    leaves: [Vec<f64>; 5],
    /// Gates g5..g8 after the sigmoid.
    gates: [Vec<f64>; 4],
    n5: Vec<f64>,
    n6: Vec<f64>,
    n7: Vec<f64>,
    pre: Vec<f64>,
    temperature: Vec<f64>,
}

impl ForwardCache {
    pub fn temperature(&self) -> &[f64] {
        &self.temperature
    }

    /// Root input before the ReLU.
    pub fn pre_activation(&self) -> &[f64] {
        &self.pre
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.logits.height, self.logits.width)
    }

    pub fn temperature_grid(&self) -> Grid<f32> {
        let (h, w) = self.dims();
        Grid::new(h, w, self.temperature.iter().map(|&t| t as f32).collect())
            .expect("cache dims are valid")
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit_features(logits: &LogitMap) -> FeatureMap {
    let (h, w) = logits.dims();
    FeatureMap {
        channels: logits.classes(),
        height: h,
        width: w,
        data: logits.as_slice().iter().map(|&v| v as f64).collect(),
    }
}

fn image_features(image: Option<&ImageTensor>, channels: usize, dims: (usize, usize)) -> FeatureMap {
    match image {
        Some(img) => {
            let data = (0..img.channels())
                .flat_map(|c| img.plane(c).iter().map(|&v| v as f64))
                .collect();
            FeatureMap {
                channels: img.channels(),
                height: dims.0,
                width: dims.1,
                data,
            }
        }
        // no image: the image leaf sees zeros and contributes bias + 1
        None => FeatureMap::zeros(channels, dims.0, dims.1),
    }
}

/// Per-pixel temperature field and the cache needed to differentiate it.
pub fn forward(
    params: &TreeNetParams,
    logits: &LogitMap,
    image: Option<&ImageTensor>,
) -> Result<ForwardCache> {
    params.check_inputs(logits, image)?;
    let lf = logit_features(logits);
    let imf = image_features(image, params.channels, logits.dims());

    let [v1, v2, v3, v4] = &params.leaves;
    let [c5, c6, c7, c8] = &params.gates;
    let mut outs = conv_forward(&lf, &[v1, v2, v3, v4, c5, c6, c7, c8])?.into_iter();
    let mut take = || outs.next().expect("eight outputs");
    let mut a: [Vec<f64>; 5] = std::array::from_fn(|_| Vec::new());
    for leaf in a.iter_mut().take(4) {
        *leaf = take();
        leaf.iter_mut().for_each(|v| *v += 1.0);
    }
    let gates: [Vec<f64>; 4] = std::array::from_fn(|_| {
        let mut g = take();
        g.iter_mut().for_each(|v| *v = sigmoid(*v));
        g
    });
    a[4] = conv_forward(&imf, &[&params.image_leaf])?.pop().expect("one output");
    a[4].iter_mut().for_each(|v| *v += 1.0);

    let n = lf.pixels();
    let mix = |g: &[f64], x: &[f64], y: &[f64]| -> Vec<f64> {
        (0..n).map(|p| g[p] * x[p] + (1.0 - g[p]) * y[p]).collect()
    };
    let n5 = mix(&gates[0], &a[0], &a[1]);
    let n6 = mix(&gates[1], &a[2], &a[3]);
    let n7 = mix(&gates[2], &n5, &n6);
    let pre = mix(&gates[3], &a[4], &n7);
    let temperature = pre.iter().map(|&v| v.max(0.0) + params.epsilon).collect();
    Ok(ForwardCache {
        snapshot: params.to_vec(),
        logits: lf,
        image: imf,
        leaves: a,
        gates,
        n5,
        n6,
        n7,
        pre,
        temperature,
    })
}

/// Image-level temperature: the spatial mean of the local field.
pub fn forward_ibts(
    params: &TreeNetParams,
    logits: &LogitMap,
    image: Option<&ImageTensor>,
) -> Result<f64> {
    let cache = forward(params, logits, image)?;
    Ok(mean(cache.temperature()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// How the field is turned into the temperatures used by the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Per-pixel temperatures.
    Lts,
    /// One temperature per image, the mean of the field.
    Ibts,
}

/// Summed NLL over supervised pixels in `mask` and the number of such pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSum {
    pub nll: f64,
    pub pixels: usize,
}

fn supervised(labels: &LabelMap, mask: Option<&Grid<bool>>, p: usize) -> bool {
    labels.at(p) != IGNORE && mask.map_or(true, |m| m.as_slice()[p])
}

/// Per-pixel NLL contribution and its derivative with respect to `T`.
fn pixel_loss(cache: &ForwardCache, z: &mut Vec<f64>, p: usize, label: usize, t: f64) -> (f64, f64) {
    let classes = cache.logits.channels;
    let n = cache.logits.pixels();
    z.clear();
    z.extend((0..classes).map(|l| cache.logits.data[l * n + p]));
    let alpha = 1.0 / t;
    let (lse, weighted) = scaled_stats(z, alpha);
    let zs = z[label];
    (lse - alpha * zs, -(weighted - zs) / (t * t))
}

/// Loss of a cached forward pass without computing gradients.
pub fn loss(
    cache: &ForwardCache,
    labels: &LabelMap,
    mask: Option<&Grid<bool>>,
    mode: Mode,
) -> Result<LossSum> {
    check_labels(cache, labels, mask)?;
    let t_img = mean(&cache.temperature);
    let mut z = Vec::new();
    let mut out = LossSum { nll: 0.0, pixels: 0 };
    for p in 0..labels.pixels() {
        if !supervised(labels, mask, p) {
            continue;
        }
        let t = match mode {
            Mode::Lts => cache.temperature[p],
            Mode::Ibts => t_img,
        };
        out.nll += pixel_loss(cache, &mut z, p, labels.at(p) as usize, t).0;
        out.pixels += 1;
    }
    Ok(out)
}

fn check_labels(cache: &ForwardCache, labels: &LabelMap, mask: Option<&Grid<bool>>) -> Result<()> {
    if labels.dims() != cache.dims() || mask.is_some_and(|m| m.dims() != cache.dims()) {
        return Err(Error::Validation("labels or mask do not match the forward pass".into()));
    }
    labels.validate(cache.logits.channels)
}

/// Gradient of the summed masked NLL with respect to every parameter.
/// Fails with a state error if `params` changed since `cache` was built.
pub fn backward(
    params: &TreeNetParams,
    cache: &ForwardCache,
    labels: &LabelMap,
    mask: Option<&Grid<bool>>,
    mode: Mode,
) -> Result<(LossSum, TreeNetParams)> {
    if cache.snapshot != params.to_vec() {
        return Err(Error::State(
            "forward cache is stale: parameters changed since the forward pass".into(),
        ));
    }
    check_labels(cache, labels, mask)?;
    let n = cache.logits.pixels();
    let t_img = mean(&cache.temperature);
    let mut z = Vec::new();
    let mut dt = vec![0.0; n];
    let mut total = LossSum { nll: 0.0, pixels: 0 };
    let mut dt_img = 0.0;
    for p in 0..n {
        if !supervised(labels, mask, p) {
            continue;
        }
        let t = match mode {
            Mode::Lts => cache.temperature[p],
            Mode::Ibts => t_img,
        };
        let (l, d) = pixel_loss(cache, &mut z, p, labels.at(p) as usize, t);
        total.nll += l;
        total.pixels += 1;
        match mode {
            Mode::Lts => dt[p] = d,
            Mode::Ibts => dt_img += d,
        }
    }
    if mode == Mode::Ibts {
        dt.iter_mut().for_each(|v| *v = dt_img / n as f64);
    }

    let [g5, g6, g7, g8] = &cache.gates;
    let [a1, a2, a3, a4, a5] = &cache.leaves;
    let mut da: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let mut dz: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    for p in 0..n {
        // subgradient 0 at the kink
        let dpre = if cache.pre[p] > 0.0 { dt[p] } else { 0.0 };
        if dpre == 0.0 {
            continue;
        }
        let dgate = |g: f64, d: f64| d * g * (1.0 - g);

        da[4][p] = dpre * g8[p];
        let dn7 = dpre * (1.0 - g8[p]);
        dz[3][p] = dgate(g8[p], dpre * (a5[p] - cache.n7[p]));

        let dn5 = dn7 * g7[p];
        let dn6 = dn7 * (1.0 - g7[p]);
        dz[2][p] = dgate(g7[p], dn7 * (cache.n5[p] - cache.n6[p]));

        da[0][p] = dn5 * g5[p];
        da[1][p] = dn5 * (1.0 - g5[p]);
        dz[0][p] = dgate(g5[p], dn5 * (a1[p] - a2[p]));

        da[2][p] = dn6 * g6[p];
        da[3][p] = dn6 * (1.0 - g6[p]);
        dz[1][p] = dgate(g6[p], dn6 * (a3[p] - a4[p]));
    }

    let mut grad = params.zeros_like();
    {
        let [v1, v2, v3, v4] = &mut grad.leaves;
        let [c5, c6, c7, c8] = &mut grad.gates;
        conv_weight_grad(
            &cache.logits,
            &[&da[0], &da[1], &da[2], &da[3], &dz[0], &dz[1], &dz[2], &dz[3]],
            &mut [v1, v2, v3, v4, c5, c6, c7, c8],
        );
    }
    conv_weight_grad(&cache.image, &[&da[4]], &mut [&mut grad.image_leaf]);
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(h: usize, w: usize) -> (LogitMap, ImageTensor, LabelMap) {
        let data: Vec<f32> = (0..3 * h * w).map(|i| ((i * 7) % 11) as f32 * 0.3 - 1.0).collect();
        let img: Vec<f32> = (0..h * w).map(|i| ((i * 5) % 13) as f32 * 0.1).collect();
        let labels: Vec<u32> = (0..h * w).map(|i| (i % 3) as u32).collect();
        (
            LogitMap::new(3, h, w, data).unwrap(),
            ImageTensor::new(1, h, w, img).unwrap(),
            LabelMap::new(h, w, labels).unwrap(),
        )
    }

    #[test]
    fn zero_params_give_one_plus_eps() {
        let p = TreeNetParams::zeros(3, 1, DEFAULT_EPSILON).unwrap();
        let (z, img, _) = inputs(6, 5);
        let c = forward(&p, &z, Some(&img)).unwrap();
        assert!(c.temperature().iter().all(|&t| t == 1.0 + DEFAULT_EPSILON));
        assert!((forward_ibts(&p, &z, None).unwrap() - (1.0 + DEFAULT_EPSILON)).abs() < 1e-12);
    }

    #[test]
    fn saturated_image_gate() {
        let mut p = TreeNetParams::zeros(3, 1, DEFAULT_EPSILON).unwrap();
        p.image_leaf.bias = 9.0;
        p.gates[3].bias = 100.0;
        let (z, img, _) = inputs(4, 4);
        let c = forward(&p, &z, Some(&img)).unwrap();
        for &t in c.temperature() {
            assert!((t - (10.0 + DEFAULT_EPSILON)).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_root_clamps_to_eps() {
        let mut p = TreeNetParams::zeros(3, 1, DEFAULT_EPSILON).unwrap();
        for f in p.leaves.iter_mut() {
            f.bias = -5.0;
        }
        p.image_leaf.bias = -5.0;
        let (z, img, _) = inputs(4, 4);
        let c = forward(&p, &z, Some(&img)).unwrap();
        assert!(c.temperature().iter().all(|&t| t == DEFAULT_EPSILON));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = TreeNetParams::zeros(3, 1, DEFAULT_EPSILON).unwrap();
        let (z, img, l) = inputs(4, 4);
        let c = forward(&p, &z, Some(&img)).unwrap();
        p.gates[0].bias = 0.5;
        assert!(matches!(
            backward(&p, &c, &l, None, Mode::Lts),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn flat_round_trip_and_files() {
        let mut p = TreeNetParams::zeros(3, 2, 0.01).unwrap();
        let v: Vec<f64> = (0..p.len()).map(|i| i as f64 * 0.001 - 0.3).collect();
        p.set_from_slice(&v).unwrap();
        assert_eq!(p.to_vec(), v);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(TreeNetParams::load(dir.path()).unwrap(), p);
        assert!(dir.path().join("v5.npy").exists());
    }

    #[test]
    fn shape_mismatch() {
        let p = TreeNetParams::zeros(4, 1, DEFAULT_EPSILON).unwrap();
        let (z, _, _) = inputs(3, 3);
        assert!(matches!(forward(&p, &z, None), Err(Error::Validation(_))));
    }
}
