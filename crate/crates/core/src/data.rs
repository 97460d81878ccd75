//! Labelled datasets: IDX (MNIST) files and seeded synthetic problems.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{streams, RngStream, Tensor};

/// Row-major `samples × features` inputs with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (rows, _) = features.dims2()?;
        if rows != labels.len() {
            return Err(Error::Consistency(format!(
                "{rows} samples but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Consistency(format!("label {bad} outside {classes} classes")));
        }
        if !features.all_finite() {
            return Err(Error::Consistency("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let f = self.feature_count();
        let mut data = Vec::with_capacity(indices.len() * f);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (Tensor::new(vec![indices.len(), f], data).expect("batch shape"), labels)
    }

    /// The first `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (features, labels) = self.batch(&idx);
        Self {
            features,
            labels,
            classes: self.classes,
        }
    }
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    let mut r = img.as_slice();
    let header = |r: &mut &[u8], path: &Path| -> Result<u32> {
        r.read_u32::<BigEndian>()
            .map_err(|_| Error::format(path, "truncated header"))
    };
    let magic = header(&mut r, images)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(images, format!("bad image magic {magic:#010x}")));
    }
    let n = header(&mut r, images)? as usize;
    let rows = header(&mut r, images)? as usize;
    let cols = header(&mut r, images)? as usize;
    let pixels = rows * cols;
    if r.len() < n * pixels {
        return Err(Error::format(
            images,
            format!("expected {} pixel bytes, found {}", n * pixels, r.len()),
        ));
    }

    let mut lr = lab.as_slice();
    let magic = header(&mut lr, labels)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(labels, format!("bad label magic {magic:#010x}")));
    }
    let nl = header(&mut lr, labels)? as usize;
    if nl != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {nl} labels",
            images.display(),
            labels.display()
        )));
    }
    if lr.len() < n {
        return Err(Error::format(
            labels,
            format!("expected {n} label bytes, found {}", lr.len()),
        ));
    }

    let take = limit.map_or(n, |l| l.min(n));
    let data: Vec<f64> = r[..take * pixels].iter().map(|&p| p as f64 / 255.0).collect();
    let labels_vec: Vec<usize> = lr[..take].iter().map(|&l| l as usize).collect();
    let classes = 10;
    if let Some(&bad) = labels_vec.iter().find(|&&l| l >= classes) {
        return Err(Error::format(labels, format!("label {bad} outside 0..10")));
    }
    Dataset::new(Tensor::new(vec![take, pixels], data)?, labels_vec, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    GaussianBlobs,
    TwoSpirals,
}

/// Where a run's training and validation data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// The four standard MNIST IDX files inside `dir`; the test split is used
    /// for validation.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        val_limit: Option<usize>,
    },
    Synthetic {
        kind: SyntheticKind,
        train: usize,
        val: usize,
        #[serde(default = "default_features")]
        features: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_margin")]
        margin: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_features() -> usize {
    2
}
fn default_classes() -> usize {
    2
}
fn default_noise() -> f64 {
    1.0
}
fn default_margin() -> f64 {
    4.0
}

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

impl DataSpec {
    /// Loads `(train, validation)`. Relative MNIST directories resolve
    /// against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            DataSpec::Mnist {
                dir,
                train_limit,
                val_limit,
            } => {
                let dir = base.join(dir);
                let train = load_idx(
                    &dir.join(MNIST_TRAIN_IMAGES),
                    &dir.join(MNIST_TRAIN_LABELS),
                    *train_limit,
                )?;
                let val = load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS), *val_limit)?;
                Ok((train, val))
            }
            DataSpec::Synthetic {
                kind,
                train,
                val,
                features,
                classes,
                noise,
                margin,
                seed,
            } => {
                let params = SyntheticParams {
                    samples: train + val,
                    features: *features,
                    classes: *classes,
                    noise: *noise,
                    margin: *margin,
                };
                let all = synthetic(*kind, &params, *seed)?;
                let idx: Vec<usize> = (0..all.len()).collect();
                let (tf, tl) = all.batch(&idx[..*train]);
                let (vf, vl) = all.batch(&idx[*train..]);
                Ok((Dataset::new(tf, tl, *classes)?, Dataset::new(vf, vl, *classes)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    /// Per-coordinate noise standard deviation `σ`.
    pub noise: f64,
    /// Blobs only: distance from each class center to the hyperplanes
    /// bisecting it from every other center, in units of `σ`.
    pub margin: f64,
}

/// Seeded synthetic classification data in shuffled order.
///
/// Gaussian blobs put class `c` at `margin · σ · √2 · e_c` (so
/// `features >= classes`); two spirals are the classic interleaved 2-D
/// problem with radial noise `0.1 σ`.
pub fn synthetic(kind: SyntheticKind, p: &SyntheticParams, seed: u64) -> Result<Dataset> {
    let SyntheticParams {
        samples,
        features,
        classes,
        noise,
        margin,
    } = *p;
    if samples == 0 || features == 0 || classes < 2 || !(noise >= 0.0) {
        return Err(Error::Config(format!(
            "synthetic data needs samples >= 1, features >= 1, classes >= 2, noise >= 0 \
             (got {samples}, {features}, {classes}, {noise})"
        )));
    }
    let mut rng = RngStream::new(seed, streams::SYNTHETIC_DATA);
    let mut data = Vec::with_capacity(samples * features);
    let mut labels = Vec::with_capacity(samples);
    match kind {
        SyntheticKind::GaussianBlobs => {
            if features < classes || !(margin >= 0.0) {
                return Err(Error::Config(format!(
                    "gaussian blobs need features >= classes and margin >= 0 (got {features}, {classes}, {margin})"
                )));
            }
            let offset = margin * noise * std::f64::consts::SQRT_2;
            for i in 0..samples {
                let c = i % classes;
                for f in 0..features {
                    let center = if f == c { offset } else { 0.0 };
                    data.push(center + noise * rng.normal());
                }
                labels.push(c);
            }
        }
        SyntheticKind::TwoSpirals => {
            if features != 2 || classes != 2 {
                return Err(Error::Config("two-spirals data is 2-D with 2 classes".into()));
            }
            for i in 0..samples {
                let c = i % 2;
                let t = rng.uniform(0.25, 1.0);
                let angle = 3.0 * std::f64::consts::PI * t + std::f64::consts::PI * c as f64;
                data.push(t * angle.cos() + noise * 0.1 * rng.normal());
                data.push(t * angle.sin() + noise * 0.1 * rng.normal());
                labels.push(c);
            }
        }
    }
    let mut order: Vec<usize> = (0..samples).collect();
    rng.shuffle(&mut order);
    let base = Dataset::new(Tensor::new(vec![samples, features], data)?, labels, classes)?;
    let (f, l) = base.batch(&order);
    Dataset::new(f, l, classes)
}
