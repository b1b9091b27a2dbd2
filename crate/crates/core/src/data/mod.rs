//! Samples, datasets, on-disk layout and the synthetic texture corpus.

pub mod image_io;
pub mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use image_io::read_image;

pub const NORMAL_TAG: &str = "normal";

/// One image with its label and type tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C,H,W]`, values in `[0,1]`.
    pub image: Tensor,
    pub label: u8,
    pub type_tag: String,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, type_tag: impl Into<String>) -> Result<Self> {
        let type_tag = type_tag.into();
        let id = id.into();
        if image.ndim() != 3 {
            return Err(Error::Dimension(format!(
                "sample {id}: image must be [C,H,W], got {:?}",
                image.shape()
            )));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("sample {id}: pixel outside [0,1]")));
        }
        let label = u8::from(type_tag != NORMAL_TAG);
        Ok(Self {
            id,
            image,
            label,
            type_tag,
        })
    }

    pub fn is_normal(&self) -> bool {
        self.label == 0
    }
}

/// Train/test id lists read from `train.txt` / `test.txt` next to the data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub normals: Vec<Sample>,
    pub anomalies: Vec<Sample>,
    pub split: Option<SplitManifest>,
}

impl Dataset {
    pub fn new(normals: Vec<Sample>, anomalies: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            normals,
            anomalies,
            split: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in self.normals.iter().chain(&self.anomalies) {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
        }
        if let Some(s) = self.normals.iter().find(|s| !s.is_normal()) {
            return Err(Error::Data(format!("{} is in the normal list but labeled anomalous", s.id)));
        }
        if let Some(s) = self.anomalies.iter().find(|s| s.is_normal()) {
            return Err(Error::Data(format!("{} is in the anomaly list but labeled normal", s.id)));
        }
        Ok(())
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.normals.iter().chain(&self.anomalies)
    }

    /// Anomaly type tags in first-seen order.
    pub fn anomaly_types(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.anomalies {
            if !out.contains(&s.type_tag) {
                out.push(s.type_tag.clone());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub input_size: usize,
    pub channels: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: 3,
        }
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Reads one image file into a `[C,S,S]` tensor.
pub fn load_image(path: &Path, opts: LoadOptions) -> Result<Tensor> {
    read_image(path)?
        .resize_nearest(opts.input_size, opts.input_size)
        .to_tensor(opts.channels)
}

fn load_dir(dir: &Path, tag: &str, opts: LoadOptions) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for path in list_dir(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let image = load_image(&path, opts)?;
        out.push(Sample::new(format!("{tag}/{stem}"), image, tag)?);
    }
    Ok(out)
}

fn read_id_list(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
    ))
}

/// Loads `root/normal/*` and `root/anomaly/<type>/*`. Sample ids are `<type>/<file stem>`.
pub fn load_dataset(root: &Path, opts: LoadOptions) -> Result<Dataset> {
    let normal_dir = root.join(NORMAL_TAG);
    if !normal_dir.is_dir() {
        return Err(Error::Data(format!("{} has no normal/ directory", root.display())));
    }
    let normals = load_dir(&normal_dir, NORMAL_TAG, opts)?;
    if normals.is_empty() {
        return Err(Error::Data(format!("{} contains no images", normal_dir.display())));
    }
    let mut anomalies = Vec::new();
    let anomaly_dir = root.join("anomaly");
    if anomaly_dir.is_dir() {
        for dir in list_dir(&anomaly_dir)?.into_iter().filter(|p| p.is_dir()) {
            let tag = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if tag == NORMAL_TAG {
                return Err(Error::Data("anomaly type may not be named \"normal\"".into()));
            }
            anomalies.extend(load_dir(&dir, &tag, opts)?);
        }
    }
    let mut ds = Dataset::new(normals, anomalies)?;
    let train = read_id_list(&root.join("train.txt"))?;
    let test = read_id_list(&root.join("test.txt"))?;
    if train.is_some() || test.is_some() {
        let split = SplitManifest {
            train: train.unwrap_or_default(),
            test: test.unwrap_or_default(),
        };
        let known: HashSet<&str> = ds.samples().map(|s| s.id.as_str()).collect();
        if let Some(bad) = split.train.iter().chain(&split.test).find(|id| !known.contains(id.as_str())) {
            return Err(Error::Data(format!("split manifest names unknown id {bad}")));
        }
        ds.split = Some(split);
    }
    Ok(ds)
}
