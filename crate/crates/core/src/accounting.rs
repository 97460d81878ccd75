//! Trainable-parameter accounting for bit-level training versus per-weight
//! training, over named parameter-shape tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ShapeEntry {
    pub fn params(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter tensors of a network, by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeTable {
    pub name: String,
    pub layers: Vec<ShapeEntry>,
}

impl ShapeTable {
    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(ShapeEntry::params).collect()
    }

    pub fn total(&self) -> usize {
        self.counts().iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    /// One trainable variable per weight.
    pub per_weight_params: u64,
    /// One trainable variable per bit of every weight.
    pub bit_split_params: u64,
    pub ratio: f64,
}

pub fn param_accounting(counts: &[usize], bits: u8) -> Result<Accounting> {
    if bits == 0 {
        return Err(Error::Input("bit width must be at least 1".into()));
    }
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Input("parameter counts must be positive".into()));
    }
    let per_weight: u64 = counts.iter().map(|&c| c as u64).sum();
    let split = per_weight * bits as u64;
    Ok(Accounting {
        per_weight_params: per_weight,
        bit_split_params: split,
        ratio: split as f64 / per_weight as f64,
    })
}

struct Builder {
    layers: Vec<ShapeEntry>,
}

impl Builder {
    fn new() -> Self {
        Self { layers: Vec::new() }
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) {
        self.layers.push(ShapeEntry {
            name: format!("{name}.weight"),
            shape: vec![out, inp, k, k],
        });
    }

    fn bn(&mut self, name: &str, c: usize) {
        for p in ["weight", "bias"] {
            self.layers.push(ShapeEntry {
                name: format!("{name}.{p}"),
                shape: vec![c],
            });
        }
    }

    fn fc(&mut self, name: &str, out: usize, inp: usize) {
        self.layers.push(ShapeEntry {
            name: format!("{name}.weight"),
            shape: vec![out, inp],
        });
        self.layers.push(ShapeEntry {
            name: format!("{name}.bias"),
            shape: vec![out],
        });
    }

    fn finish(self, name: &str) -> ShapeTable {
        ShapeTable {
            name: name.into(),
            layers: self.layers,
        }
    }
}

/// CIFAR ResNet-20 with parameter-free (zero-padding) shortcuts.
pub fn resnet20() -> ShapeTable {
    let mut b = Builder::new();
    b.conv("conv1", 16, 3, 3);
    b.bn("bn1", 16);
    let mut inp = 16;
    for (stage, width) in [16, 32, 64].into_iter().enumerate() {
        for block in 0..3 {
            let p = format!("layer{}.{block}", stage + 1);
            b.conv(&format!("{p}.conv1"), width, inp, 3);
            b.bn(&format!("{p}.bn1"), width);
            b.conv(&format!("{p}.conv2"), width, width, 3);
            b.bn(&format!("{p}.bn2"), width);
            inp = width;
        }
    }
    b.fc("fc", 10, 64);
    b.finish("resnet20")
}

/// ImageNet ResNet-18.
pub fn resnet18() -> ShapeTable {
    let mut b = Builder::new();
    b.conv("conv1", 64, 3, 7);
    b.bn("bn1", 64);
    let mut inp = 64;
    for (stage, width) in [64, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let p = format!("layer{}.{block}", stage + 1);
            b.conv(&format!("{p}.conv1"), width, inp, 3);
            b.bn(&format!("{p}.bn1"), width);
            b.conv(&format!("{p}.conv2"), width, width, 3);
            b.bn(&format!("{p}.bn2"), width);
            if inp != width {
                b.conv(&format!("{p}.downsample.0"), width, inp, 1);
                b.bn(&format!("{p}.downsample.1"), width);
            }
            inp = width;
        }
    }
    b.fc("fc", 1000, 512);
    b.finish("resnet18")
}

/// ImageNet ResNet-50.
pub fn resnet50() -> ShapeTable {
    let mut b = Builder::new();
    b.conv("conv1", 64, 3, 7);
    b.bn("bn1", 64);
    let mut inp = 64;
    for (stage, (width, blocks)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate() {
        for block in 0..blocks {
            let p = format!("layer{}.{block}", stage + 1);
            b.conv(&format!("{p}.conv1"), width, inp, 1);
            b.bn(&format!("{p}.bn1"), width);
            b.conv(&format!("{p}.conv2"), width, width, 3);
            b.bn(&format!("{p}.bn2"), width);
            b.conv(&format!("{p}.conv3"), 4 * width, width, 1);
            b.bn(&format!("{p}.bn3"), 4 * width);
            if block == 0 {
                b.conv(&format!("{p}.downsample.0"), 4 * width, inp, 1);
                b.bn(&format!("{p}.downsample.1"), 4 * width);
            }
            inp = 4 * width;
        }
    }
    b.fc("fc", 1000, 2048);
    b.finish("resnet50")
}
