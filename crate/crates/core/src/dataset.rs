//! JSON dataset manifests.
//!
//! ```json
//! { "split": "val", "classes": 4, "background": 0,
//!   "samples": [ { "id": "val-000", "logits": "val/val-000_logits.npy",
//!                  "labels": "val/val-000_labels.npy", "image": "val/val-000_image.npy" } ] }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::par;
use crate::tensor::{Dataset, ImageTensor, LogitMap, Sample, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub logits: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<u32>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Loads and eagerly validates every sample listed in a manifest.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest.as_ref();
    let m = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let samples = par::map(&m.samples, |entry| -> Result<Sample> {
        let logits = LogitMap::try_from(npy::load_npy(resolve(&entry.logits))?)
            .map_err(|e| e.context(&entry.id))?;
        let labels = npy::load_labels(resolve(&entry.labels))?;
        let image = match &entry.image {
            Some(p) => Some(
                ImageTensor::try_from(npy::load_npy(resolve(p))?)
                    .map_err(|e| e.context(&entry.id))?,
            ),
            None => None,
        };
        Sample::new(entry.id.clone(), logits, labels, image)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    if let Some(s) = samples.iter().find(|s| s.logits.classes() != m.classes) {
        return Err(Error::Validation(format!(
            "{}: {} classes, manifest declares {}",
            s.id,
            s.logits.classes(),
            m.classes
        )));
    }
    let ds = Dataset::new(m.split, samples)?;
    match m.background {
        Some(bg) => ds.with_background(bg),
        None => Ok(ds),
    }
}

/// Writes every sample's tensors under `dir/<split>/` and a manifest at
/// `dir/<split>.json`. Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let split = dataset.split().to_string();
    let sub = dir.join(&split);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;

    let mut entries = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let logits = PathBuf::from(&split).join(format!("{}_logits.npy", s.id));
        let labels = PathBuf::from(&split).join(format!("{}_labels.npy", s.id));
        npy::save_npy(&s.logits.to_tensor(), dir.join(&logits))?;
        npy::save_labels(&s.labels, dir.join(&labels))?;
        let image = match &s.image {
            Some(img) => {
                let p = PathBuf::from(&split).join(format!("{}_image.npy", s.id));
                npy::save_npy(&img.to_tensor(), dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(SampleEntry {
            id: s.id.clone(),
            logits,
            labels,
            image,
        });
    }
    let manifest = Manifest {
        split: dataset.split(),
        classes: dataset.classes(),
        background: Some(dataset.background()),
        samples: entries,
    };
    let path = dir.join(format!("{split}.json"));
    manifest.write(&path)?;
    Ok(path)
}
