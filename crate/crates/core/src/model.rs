//! Calibration models as stored on disk.
//!
//! ```json
//! { "method": "lts", "classes": 4, "params": "m_params", "loss_curve": "m_loss.csv", "best_epoch": 17 }
//! { "method": "ts", "classes": 4, "t_global": 2.97 }
//! ```
//!
//! Paths are relative to the model file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scaling::{softmax_temp, CalibratedOutput};
use crate::tensor::{Dataset, TemperatureField};
use crate::tree_net::{predict, Mode, TreeNetParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// `T = 1` everywhere.
    Identity,
    Ts,
    Ibts,
    Lts,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Method::Identity),
            "ts" => Ok(Method::Ts),
            "ibts" => Ok(Method::Ibts),
            "lts" => Ok(Method::Lts),
            other => Err(Error::Validation(format!(
                "unknown method {other:?} (identity, ts, ibts, lts)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub method: Method,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_global: Option<f64>,
    /// Temperatures of the images the model was fitted or evaluated on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_curve: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
}

impl ModelFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A model ready to produce temperatures.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Identity { classes: usize },
    Global { classes: usize, t: f64 },
    /// Looked up by sample id.
    PerImage { classes: usize, t: BTreeMap<String, f64> },
    Network { params: TreeNetParams, mode: Mode },
}

impl Model {
    /// Resolves a model file, loading network parameters if it has any.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = ModelFile::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let classes = file.classes;
        let model = match (file.method, &file.params) {
            (Method::Identity, _) => Model::Identity { classes },
            (Method::Ts, _) => Model::Global {
                classes,
                t: file
                    .t_global
                    .ok_or_else(|| Error::Validation("ts model without t_global".into()))?,
            },
            (Method::Ibts | Method::Lts, Some(dir)) => Model::Network {
                params: TreeNetParams::load(base.join(dir))?,
                mode: if file.method == Method::Lts { Mode::Lts } else { Mode::Ibts },
            },
            (Method::Ibts, None) => Model::PerImage {
                classes,
                t: file
                    .per_image
                    .ok_or_else(|| Error::Validation("ibts model without params or per_image".into()))?,
            },
            (Method::Lts, None) => return Err(Error::Validation("lts model without params".into())),
        };
        if model.classes() != classes {
            return Err(Error::Validation(format!(
                "model file declares {classes} classes, parameters have {}",
                model.classes()
            )));
        }
        Ok(model)
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Identity { classes } | Model::Global { classes, .. } | Model::PerImage { classes, .. } => {
                *classes
            }
            Model::Network { params, .. } => params.classes(),
        }
    }

    /// Temperatures for every sample of `data`.
    pub fn temperatures(&self, data: &Dataset) -> Result<TemperatureField> {
        if data.classes() != self.classes() {
            return Err(Error::Validation(format!(
                "model expects {} classes, data has {}",
                self.classes(),
                data.classes()
            )));
        }
        match self {
            Model::Identity { .. } => TemperatureField::global(1.0),
            Model::Global { t, .. } => TemperatureField::global(*t),
            Model::PerImage { t, .. } => TemperatureField::per_image(
                data.samples()
                    .iter()
                    .map(|s| {
                        t.get(&s.id)
                            .copied()
                            .ok_or_else(|| Error::Validation(format!("no temperature for sample {}", s.id)))
                    })
                    .collect::<Result<_>>()?,
            ),
            Model::Network { params, mode } => predict(params, data, *mode),
        }
    }
}

/// Calibrated outputs of every sample under `temps`.
pub fn calibrate(data: &Dataset, temps: &TemperatureField) -> Result<Vec<CalibratedOutput>> {
    if temps.len().is_some_and(|n| n != data.len()) {
        return Err(Error::Validation("temperature field does not cover the dataset".into()));
    }
    par::map_range(data.len(), |i| {
        let s = &data.samples()[i];
        softmax_temp(&s.logits, temps.for_sample(i)?).map_err(|e| e.context(&s.id))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{LabelMap, LogitMap, Sample, Split};

    fn data(classes: usize) -> Dataset {
        let s = Sample::new(
            "a",
            LogitMap::new(classes, 2, 2, (0..classes * 4).map(|v| v as f32 * 0.3).collect()).unwrap(),
            LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap(),
            None,
        )
        .unwrap();
        Dataset::new(Split::Test, vec![s]).unwrap()
    }

    #[test]
    fn file_round_trip_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let file = ModelFile {
            method: Method::Ts,
            classes: 3,
            t_global: Some(2.5),
            per_image: None,
            params: None,
            loss_curve: None,
            best_epoch: None,
        };
        file.write(&path).unwrap();
        assert_eq!(ModelFile::read(&path).unwrap(), file);
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains("per_image"));
        let m = Model::load(&path).unwrap();
        assert_eq!(m, Model::Global { classes: 3, t: 2.5 });
        assert!(matches!(m.temperatures(&data(2)), Err(Error::Validation(_))));
    }

    #[test]
    fn network_model_loads_params() {
        let dir = tempfile::tempdir().unwrap();
        let params = TreeNetParams::zeros(3, 1, 1e-3).unwrap();
        params.save(dir.path().join("m_params")).unwrap();
        let file = ModelFile {
            method: Method::Lts,
            classes: 3,
            t_global: None,
            per_image: None,
            params: Some("m_params".into()),
            loss_curve: None,
            best_epoch: Some(0),
        };
        file.write(dir.path().join("m.json")).unwrap();
        let m = Model::load(dir.path().join("m.json")).unwrap();
        let temps = m.temperatures(&data(3)).unwrap();
        let out = calibrate(&data(3), &temps).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn identity_matches_plain_softmax() {
        let d = data(3);
        let temps = Model::Identity { classes: 3 }.temperatures(&d).unwrap();
        let out = calibrate(&d, &temps).unwrap();
        let plain = softmax_temp(&d.samples()[0].logits, 1.0).unwrap();
        assert_eq!(out[0], plain);
    }

    #[test]
    fn per_image_lookup_requires_every_id() {
        let m = Model::PerImage {
            classes: 3,
            t: BTreeMap::from([("b".to_string(), 2.0)]),
        };
        assert!(m.temperatures(&data(3)).is_err());
    }
}
