//! Adam training of the tree network on masked NLL.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::net::{backward, forward, loss, Mode, TreeNetParams, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::metrics::MaskPolicy;
use crate::par;
use crate::tensor::{Dataset, Grid, Sample, TemperatureField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `(first epoch, learning rate)` steps; epochs counted from 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub adam: AdamConfig,
    /// Images whose gradients are averaged per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub mask: MaskPolicy,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_schedule: vec![(0, 1e-4), (50, 1e-5)],
            adam: AdamConfig::default(),
            batch: 4,
            seed: 0,
            mask: MaskPolicy::default(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.is_empty() {
            return Err(Error::Validation("learning-rate schedule is empty".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Validation(
                "learning-rate schedule epochs must be strictly increasing".into(),
            ));
        }
        if let Some((_, lr)) = self.lr_schedule.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Validation(format!("learning rate {lr} is not positive")));
        }
        if self.batch == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .unwrap_or(&self.lr_schedule[0])
            .1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitArtifacts {
    /// Parameters at `best_epoch`.
    pub params: TreeNetParams,
    pub loss_curve: Vec<EpochLoss>,
    /// Epoch with the lowest validation NLL (training NLL without a
    /// validation set); 0 means the initialization.
    pub best_epoch: usize,
}

impl FitArtifacts {
    /// Loss curve as CSV `epoch,train_nll,val_nll`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,train_nll,val_nll\n");
        for e in &self.loss_curve {
            let val = e.val_nll.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_nll, val));
        }
        out
    }
}

struct Prepared<'a> {
    sample: &'a Sample,
    mask: Option<Grid<bool>>,
}

fn prepare<'a>(data: &'a Dataset, policy: MaskPolicy) -> Vec<Prepared<'a>> {
    data.samples()
        .iter()
        .map(|s| Prepared {
            sample: s,
            mask: policy.mask(&s.labels, data.background()),
        })
        .collect()
}

/// Summed NLL and pixel count over a dataset, reduced in sample order.
fn dataset_loss(params: &TreeNetParams, items: &[Prepared<'_>], mode: Mode) -> Result<(f64, usize)> {
    let parts = par::map(items, |it| -> Result<(f64, usize)> {
        let cache = forward(params, &it.sample.logits, it.sample.image.as_ref())?;
        let l = loss(&cache, &it.sample.labels, it.mask.as_ref(), mode)?;
        Ok((l.nll, l.pixels))
    });
    let mut total = (0.0, 0);
    for p in parts {
        let (n, c) = p?;
        total.0 += n;
        total.1 += c;
    }
    Ok(total)
}

/// Mean per-pixel NLL of `params` on `data` under `policy`.
pub fn mean_nll(params: &TreeNetParams, data: &Dataset, mode: Mode, policy: MaskPolicy) -> Result<f64> {
    let (nll, pixels) = dataset_loss(params, &prepare(data, policy), mode)?;
    if pixels == 0 {
        return Err(Error::EmptyRegion("no supervised pixels".into()));
    }
    Ok(nll / pixels as f64)
}

fn image_channels(data: &Dataset) -> usize {
    data.image_channels().unwrap_or(1)
}

/// Trains from zero initialization. Returns the parameters from the epoch
/// with the best validation NLL.
pub fn train(
    data: &Dataset,
    val: Option<&Dataset>,
    mode: Mode,
    config: &TrainConfig,
) -> Result<FitArtifacts> {
    config.validate()?;
    if let Some(v) = val {
        if v.classes() != data.classes() || v.image_channels() != data.image_channels() {
            return Err(Error::Validation(
                "validation set does not match the training set's classes or channels".into(),
            ));
        }
    }
    let mut params = TreeNetParams::zeros(data.classes(), image_channels(data), config.epsilon)?;
    let items = prepare(data, config.mask);
    let val_items = val.map(|v| prepare(v, config.mask));

    let mut flat = params.to_vec();
    let mut adam = Adam::new(flat.len(), config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();

    let mut best = (f64::INFINITY, 0, params.clone());
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        let (mut epoch_nll, mut epoch_pixels) = (0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let results = par::map(chunk, |&i| -> Result<Option<(f64, usize, Vec<f64>)>> {
                let it = &items[i];
                let cache = forward(&params, &it.sample.logits, it.sample.image.as_ref())?;
                let (l, g) = backward(&params, &cache, &it.sample.labels, it.mask.as_ref(), mode)?;
                if l.pixels == 0 {
                    return Ok(None);
                }
                let scale = 1.0 / l.pixels as f64;
                Ok(Some((l.nll, l.pixels, g.to_vec().into_iter().map(|v| v * scale).collect())))
            });
            let mut grad = vec![0.0; flat.len()];
            let mut used = 0usize;
            for r in results {
                if let Some((nll, pixels, g)) = r? {
                    epoch_nll += nll;
                    epoch_pixels += pixels;
                    used += 1;
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
            if used == 0 {
                continue;
            }
            grad.iter_mut().for_each(|v| *v /= used as f64);
            if grad.iter().any(|v| !v.is_finite()) || !epoch_nll.is_finite() {
                return Err(Error::Numerical(format!(
                    "epoch {}: non-finite loss or gradient",
                    epoch + 1
                )));
            }
            adam.step(&mut flat, &grad, lr);
            params.set_from_slice(&flat)?;
        }
        if epoch_pixels == 0 {
            return Err(Error::EmptyRegion("no supervised training pixels".into()));
        }
        let train_nll = epoch_nll / epoch_pixels as f64;
        let val_nll = match &val_items {
            Some(v) => {
                let (nll, pixels) = dataset_loss(&params, v, mode)?;
                if pixels == 0 {
                    return Err(Error::EmptyRegion("no supervised validation pixels".into()));
                }
                Some(nll / pixels as f64)
            }
            None => None,
        };
        let score = val_nll.unwrap_or(train_nll);
        if !score.is_finite() {
            return Err(Error::Numerical(format!("epoch {}: NaN loss", epoch + 1)));
        }
        if score < best.0 {
            best = (score, epoch + 1, params.clone());
        }
        curve.push(EpochLoss {
            epoch: epoch + 1,
            train_nll,
            val_nll,
        });
    }
    Ok(FitArtifacts {
        params: best.2,
        loss_curve: curve,
        best_epoch: best.1,
    })
}

/// Temperatures the trained network assigns to every sample of `data`.
pub fn predict(params: &TreeNetParams, data: &Dataset, mode: Mode) -> Result<TemperatureField> {
    let fields = par::map(data.samples(), |s| {
        forward(params, &s.logits, s.image.as_ref())
            .map(|c| c.temperature_grid())
            .map_err(|e| e.context(&s.id))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    match mode {
        Mode::Lts => TemperatureField::local(fields),
        Mode::Ibts => TemperatureField::per_image(
            fields
                .iter()
                .map(|g| g.as_slice().iter().map(|&t| t as f64).sum::<f64>() / g.len() as f64)
                .collect(),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{LabelMap, LogitMap, Split};

    fn tiny() -> Dataset {
        let samples = (0..3)
            .map(|i| {
                let (h, w) = (6, 6);
                let labels: Vec<u32> = (0..h * w).map(|p| ((p + i) % 2) as u32).collect();
                let mut z = vec![0f32; 2 * h * w];
                for p in 0..h * w {
                    // overconfident: large margin, some errors
                    let pred = if p % 5 == 0 { 1 - labels[p] } else { labels[p] };
                    z[pred as usize * h * w + p] = 6.0;
                }
                Sample::new(
                    format!("t{i}"),
                    LogitMap::new(2, h, w, z).unwrap(),
                    LabelMap::new(h, w, labels).unwrap(),
                    None,
                )
                .unwrap()
            })
            .collect();
        Dataset::new(Split::Train, samples).unwrap()
    }

    #[test]
    fn zero_epochs_keep_init() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let fit = train(&tiny(), None, Mode::Lts, &cfg).unwrap();
        assert_eq!(fit.best_epoch, 0);
        assert!(fit.loss_curve.is_empty());
        assert!(fit.params.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_lowers_nll_and_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 20,
            lr_schedule: vec![(0, 0.02)],
            mask: MaskPolicy::Full,
            ..Default::default()
        };
        let d = tiny();
        let a = train(&d, Some(&d), Mode::Lts, &cfg).unwrap();
        let b = train(&d, Some(&d), Mode::Lts, &cfg).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        let init = TreeNetParams::zeros(2, 1, cfg.epsilon).unwrap();
        let before = mean_nll(&init, &d, Mode::Lts, MaskPolicy::Full).unwrap();
        let after = mean_nll(&a.params, &d, Mode::Lts, MaskPolicy::Full).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn schedule_validation() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(49), 1e-4);
        assert_eq!(cfg.lr_at(50), 1e-5);
        cfg.lr_schedule = vec![(5, 1e-3), (5, 1e-4)];
        assert!(cfg.validate().is_err());
        cfg.lr_schedule = vec![(0, 0.0)];
        assert!(cfg.validate().is_err());
    }
}
