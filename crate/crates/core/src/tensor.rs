//! Dense tensors and the validated domain types built on them.
//!
//! Storage is `f32`, row-major, class/channel axis first. Everything that
//! accumulates over pixels (losses, metric numerators) works in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value marking an unlabeled pixel. Excluded from every loss and metric.
pub const IGNORE: u32 = u32::MAX;

/// Shape-erased dense `f32` tensor, the unit of NPY interchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Element at a full multi-index (row-major).
    pub fn get(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub(crate) fn rank3(&self, what: &str) -> Result<[usize; 3]> {
        match *self.shape.as_slice() {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::Validation(format!(
                "{what}: expected rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Rank-2 `(H, W)` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "degenerate grid shape ({height}, {width})"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Validation(format!(
                "grid ({height}, {width}) needs {} elements, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

impl Grid<f32> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width],
            data: self.data.clone(),
        }
    }
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "{what}: non-finite value {} at flat index {i}",
            data[i]
        )));
    }
    Ok(())
}

/// Class-major `(L, H, W)` block of `f32` values.
#[derive(Debug, Clone, PartialEq)]
struct Planes {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Planes {
    fn from_tensor(t: Tensor, what: &str) -> Result<Self> {
        let [channels, height, width] = t.rank3(what)?;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "{what}: degenerate shape {:?}",
                t.shape
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data: t.data,
        })
    }

    fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }
}

/// Per-pixel class logits `z(x)`, shape `(L, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap(Planes);

impl LogitMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::try_from(Tensor::new(vec![classes, height, width], data)?)
    }

    pub fn classes(&self) -> usize {
        self.0.channels
    }
    pub fn height(&self) -> usize {
        self.0.height
    }
    pub fn width(&self) -> usize {
        self.0.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }
    pub fn pixels(&self) -> usize {
        self.0.height * self.0.width
    }

    /// Contiguous `H*W` plane of class `l`.
    pub fn plane(&self, l: usize) -> &[f32] {
        self.0.plane(l)
    }

    #[inline]
    pub fn at(&self, l: usize, pixel: usize) -> f32 {
        self.0.data[l * self.pixels() + pixel]
    }

    /// Logit vector of one pixel, widened to `f64`.
    pub fn pixel_into(&self, pixel: usize, out: &mut Vec<f64>) {
        out.clear();
        let n = self.pixels();
        out.extend((0..self.classes()).map(|l| self.0.data[l * n + pixel] as f64));
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_tensor(&self) -> Tensor {
        self.0.to_tensor()
    }
}

impl TryFrom<Tensor> for LogitMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        let planes = Planes::from_tensor(t, "logits")?;
        if planes.channels < 2 {
            return Err(Error::Validation(format!(
                "logits: need at least 2 classes, got {}",
                planes.channels
            )));
        }
        check_finite(&planes.data, "logits")?;
        Ok(Self(planes))
    }
}

/// Per-pixel class probabilities, shape `(L, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Planes);

impl ProbMap {
    /// Channel sums must be 1 within this tolerance.
    pub const SUM_TOL: f64 = 1e-5;

    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::try_from(Tensor::new(vec![classes, height, width], data)?)
    }

    pub(crate) fn from_raw(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), classes * height * width);
        Self(Planes {
            channels: classes,
            height,
            width,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.0.channels
    }
    pub fn height(&self) -> usize {
        self.0.height
    }
    pub fn width(&self) -> usize {
        self.0.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }
    pub fn pixels(&self) -> usize {
        self.0.height * self.0.width
    }
    pub fn plane(&self, l: usize) -> &[f32] {
        self.0.plane(l)
    }

    #[inline]
    pub fn at(&self, l: usize, pixel: usize) -> f32 {
        self.0.data[l * self.pixels() + pixel]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_tensor(&self) -> Tensor {
        self.0.to_tensor()
    }
}

impl TryFrom<Tensor> for ProbMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        let planes = Planes::from_tensor(t, "probabilities")?;
        check_finite(&planes.data, "probabilities")?;
        if let Some(v) = planes.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "probabilities: value {v} outside [0, 1]"
            )));
        }
        let n = planes.height * planes.width;
        for p in 0..n {
            let s: f64 = (0..planes.channels)
                .map(|c| planes.data[c * n + p] as f64)
                .sum();
            if (s - 1.0).abs() > Self::SUM_TOL {
                return Err(Error::Validation(format!(
                    "probabilities: pixel {p} sums to {s}"
                )));
            }
        }
        Ok(Self(planes))
    }
}

/// Input image intensities `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Planes);

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::try_from(Tensor::new(vec![channels, height, width], data)?)
    }

    /// All-zero image, used when a sample carries no image.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Planes {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        })
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }
    pub fn height(&self) -> usize {
        self.0.height
    }
    pub fn width(&self) -> usize {
        self.0.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }
    pub fn plane(&self, c: usize) -> &[f32] {
        self.0.plane(c)
    }
    pub fn to_tensor(&self) -> Tensor {
        self.0.to_tensor()
    }
}

impl TryFrom<Tensor> for ImageTensor {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        let planes = Planes::from_tensor(t, "image")?;
        check_finite(&planes.data, "image")?;
        Ok(Self(planes))
    }
}

/// Per-pixel class indices; [`IGNORE`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap(Grid<u32>);

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        Ok(Self(Grid::new(height, width, data)?))
    }

    pub fn from_grid(grid: Grid<u32>) -> Self {
        Self(grid)
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }
    pub fn width(&self) -> usize {
        self.0.width()
    }
    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
    pub fn pixels(&self) -> usize {
        self.0.len()
    }
    pub fn grid(&self) -> &Grid<u32> {
        &self.0
    }
    pub fn as_slice(&self) -> &[u32] {
        self.0.as_slice()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.0.get(y, x)
    }

    #[inline]
    pub fn at(&self, pixel: usize) -> u32 {
        self.0.as_slice()[pixel]
    }

    /// Checks every non-ignored entry is a valid class index.
    pub fn validate(&self, classes: usize) -> Result<()> {
        for (i, &v) in self.0.as_slice().iter().enumerate() {
            if v != IGNORE && v as usize >= classes {
                return Err(Error::Validation(format!(
                    "label {v} at pixel {i} out of range for {classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// Sample-level view of a temperature, as consumed by the scaling kernels.
#[derive(Debug, Clone, Copy)]
pub enum SampleTemperature<'a> {
    Uniform(f64),
    Local(&'a Grid<f32>),
}

impl SampleTemperature<'_> {
    #[inline]
    pub fn at(&self, pixel: usize) -> f64 {
        match self {
            SampleTemperature::Uniform(t) => *t,
            SampleTemperature::Local(g) => g.as_slice()[pixel] as f64,
        }
    }
}

impl From<f64> for SampleTemperature<'_> {
    fn from(t: f64) -> Self {
        SampleTemperature::Uniform(t)
    }
}

impl<'a> From<&'a Grid<f32>> for SampleTemperature<'a> {
    fn from(g: &'a Grid<f32>) -> Self {
        SampleTemperature::Local(g)
    }
}

/// Default clamp ceiling for temperatures; stands in for `T -> inf`.
pub const T_MAX: f64 = 1e6;

/// Global, per-image or per-pixel positive temperatures for a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum TemperatureKind {
    Global(f64),
    PerImage(Vec<f64>),
    Local(Vec<Grid<f32>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureField {
    kind: TemperatureKind,
    t_max: f64,
}

impl TemperatureField {
    pub fn new(kind: TemperatureKind, t_max: f64) -> Result<Self> {
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(Error::Domain(format!("t_max must be positive, got {t_max}")));
        }
        let check = |t: f64| -> Result<()> {
            if t > 0.0 && t <= t_max {
                Ok(())
            } else {
                Err(Error::Domain(format!(
                    "temperature {t} outside (0, {t_max}]"
                )))
            }
        };
        match &kind {
            TemperatureKind::Global(t) => check(*t)?,
            TemperatureKind::PerImage(ts) => ts.iter().try_for_each(|&t| check(t))?,
            TemperatureKind::Local(grids) => grids
                .iter()
                .flat_map(|g| g.as_slice())
                .try_for_each(|&t| check(t as f64))?,
        }
        Ok(Self { kind, t_max })
    }

    pub fn global(t: f64) -> Result<Self> {
        Self::new(TemperatureKind::Global(t), T_MAX)
    }

    pub fn per_image(ts: Vec<f64>) -> Result<Self> {
        Self::new(TemperatureKind::PerImage(ts), T_MAX)
    }

    pub fn local(grids: Vec<Grid<f32>>) -> Result<Self> {
        Self::new(TemperatureKind::Local(grids), T_MAX)
    }

    pub fn kind(&self) -> &TemperatureKind {
        &self.kind
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// Number of samples covered; `None` for a global temperature.
    pub fn len(&self) -> Option<usize> {
        match &self.kind {
            TemperatureKind::Global(_) => None,
            TemperatureKind::PerImage(v) => Some(v.len()),
            TemperatureKind::Local(v) => Some(v.len()),
        }
    }

    pub fn for_sample(&self, index: usize) -> Result<SampleTemperature<'_>> {
        match &self.kind {
            TemperatureKind::Global(t) => Ok(SampleTemperature::Uniform(*t)),
            TemperatureKind::PerImage(v) => v
                .get(index)
                .map(|&t| SampleTemperature::Uniform(t))
                .ok_or_else(|| Error::Validation(format!("no temperature for sample {index}"))),
            TemperatureKind::Local(v) => v
                .get(index)
                .map(SampleTemperature::Local)
                .ok_or_else(|| Error::Validation(format!("no temperature for sample {index}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub logits: LogitMap,
    pub labels: LabelMap,
    pub image: Option<ImageTensor>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        logits: LogitMap,
        labels: LabelMap,
        image: Option<ImageTensor>,
    ) -> Result<Self> {
        let id = id.into();
        if labels.dims() != logits.dims() {
            return Err(Error::Validation(format!(
                "{id}: spatial mismatch (logits {:?}, labels {:?})",
                logits.dims(),
                labels.dims()
            )));
        }
        labels
            .validate(logits.classes())
            .map_err(|e| e.context(&id))?;
        if let Some(img) = &image {
            if img.dims() != logits.dims() {
                return Err(Error::Validation(format!(
                    "{id}: spatial mismatch (logits {:?}, image {:?})",
                    logits.dims(),
                    img.dims()
                )));
            }
        }
        Ok(Self {
            id,
            logits,
            labels,
            image,
        })
    }
}

/// Ordered, validated collection of samples from one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    split: Split,
    classes: usize,
    background: u32,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(split: Split, samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Validation(format!("{split} dataset has no samples")))?;
        let classes = first.logits.classes();
        let channels = first.image.as_ref().map(|i| i.channels());
        for s in &samples {
            if s.logits.classes() != classes {
                return Err(Error::Validation(format!(
                    "{}: {} classes, dataset has {classes}",
                    s.id,
                    s.logits.classes()
                )));
            }
            if s.image.as_ref().map(|i| i.channels()) != channels {
                return Err(Error::Validation(format!(
                    "{}: image channels inconsistent with the rest of the dataset",
                    s.id
                )));
            }
        }
        Ok(Self {
            split,
            classes,
            background: 0,
            samples,
        })
    }

    /// Overrides the background class (default 0).
    pub fn with_background(mut self, background: u32) -> Result<Self> {
        if background as usize >= self.classes {
            return Err(Error::Validation(format!(
                "background class {background} out of range for {} classes",
                self.classes
            )));
        }
        self.background = background;
        Ok(self)
    }

    pub fn background(&self) -> u32 {
        self.background
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Image channel count, or `None` when the samples carry no image.
    pub fn image_channels(&self) -> Option<usize> {
        self.samples[0].image.as_ref().map(|i| i.channels())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_map_rejects_non_finite() {
        let err = LogitMap::new(2, 1, 1, vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn logit_map_needs_two_classes() {
        assert!(LogitMap::new(1, 2, 2, vec![0.0; 4]).is_err());
    }

    #[test]
    fn prob_map_checks_channel_sums() {
        assert!(ProbMap::new(2, 1, 1, vec![0.5, 0.5]).is_ok());
        assert!(ProbMap::new(2, 1, 1, vec![0.5, 0.6]).is_err());
        assert!(ProbMap::new(2, 1, 1, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn temperature_field_bounds() {
        assert!(TemperatureField::global(0.0).is_err());
        assert!(TemperatureField::global(-1.0).is_err());
        assert!(TemperatureField::global(T_MAX * 2.0).is_err());
        assert!(TemperatureField::global(T_MAX).is_ok());
        let g = Grid::new(1, 2, vec![1.0f32, 0.0]).unwrap();
        assert!(TemperatureField::local(vec![g]).is_err());
    }

    #[test]
    fn sample_rejects_spatial_mismatch() {
        let logits = LogitMap::new(2, 3, 4, vec![0.0; 24]).unwrap();
        let labels = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        let err = Sample::new("sample-0", logits, labels, None).unwrap_err();
        assert!(err.to_string().contains("sample-0: spatial mismatch"));
    }

    #[test]
    fn sample_rejects_out_of_range_label() {
        let logits = LogitMap::new(2, 1, 2, vec![0.0; 4]).unwrap();
        let labels = LabelMap::new(1, 2, vec![0, 2]).unwrap();
        assert!(Sample::new("s", logits.clone(), labels, None).is_err());
        let labels = LabelMap::new(1, 2, vec![IGNORE, 1]).unwrap();
        assert!(Sample::new("s", logits, labels, None).is_ok());
    }

    #[test]
    fn dataset_rejects_empty_and_mixed_classes() {
        assert!(Dataset::new(Split::Val, vec![]).is_err());
        let a = Sample::new(
            "a",
            LogitMap::new(2, 1, 1, vec![0.0; 2]).unwrap(),
            LabelMap::new(1, 1, vec![0]).unwrap(),
            None,
        )
        .unwrap();
        let b = Sample::new(
            "b",
            LogitMap::new(3, 1, 1, vec![0.0; 3]).unwrap(),
            LabelMap::new(1, 1, vec![0]).unwrap(),
            None,
        )
        .unwrap();
        assert!(Dataset::new(Split::Val, vec![a, b]).is_err());
    }
}
