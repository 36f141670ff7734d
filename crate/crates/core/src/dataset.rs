use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// One sample's label provenance. `true_label` is kept for auditing only and
/// is never read by the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub index: usize,
    pub true_label: usize,
    pub given_label: usize,
    pub corrupted: bool,
}

impl CorruptionRecord {
    pub fn clean(index: usize, label: usize) -> Self {
        Self { index, true_label: label, given_label: label, corrupted: false }
    }

    pub fn new(index: usize, true_label: usize, given_label: usize) -> Self {
        Self { index, true_label, given_label, corrupted: true_label != given_label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Symmetric,
    Asymmetric,
    InstanceDependent,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::None => "none",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Asymmetric => "asymmetric",
            NoiseKind::InstanceDependent => "instance_dependent",
        })
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "clean" => Ok(NoiseKind::None),
            "symmetric" => Ok(NoiseKind::Symmetric),
            "asymmetric" => Ok(NoiseKind::Asymmetric),
            "instance_dependent" | "instance" => Ok(NoiseKind::InstanceDependent),
            other => Err(Error::validation("noise kind", format!("unknown kind `{other}`"))),
        }
    }
}

/// How symmetric noise spreads the rate `P` over classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SymmetricConvention {
    /// `P/C` to every class including the true one; diagonal `1 - P + P/C`.
    #[default]
    UniformAll,
    /// `P/(C-1)` to every other class; diagonal `1 - P`.
    UniformOffDiagonal,
}

impl std::fmt::Display for SymmetricConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SymmetricConvention::UniformAll => "uniform_all",
            SymmetricConvention::UniformOffDiagonal => "uniform_off_diagonal",
        })
    }
}

impl std::str::FromStr for SymmetricConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_all" => Ok(SymmetricConvention::UniformAll),
            "uniform_off_diagonal" => Ok(SymmetricConvention::UniformOffDiagonal),
            other => Err(Error::validation("convention", format!("unknown convention `{other}`"))),
        }
    }
}

/// Provenance of a dataset's given labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub noise_kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
    pub convention: Option<SymmetricConvention>,
    pub num_classes: usize,
    pub realized_rate: f64,
    /// Instance-dependent noise: epoch and training accuracy of the proxy
    /// checkpoint whose predictions became the given labels.
    pub proxy_epoch: Option<usize>,
    pub proxy_accuracy: Option<f64>,
}

impl ManifestHeader {
    pub fn clean(num_classes: usize) -> Self {
        Self {
            noise_kind: NoiseKind::None,
            rate: 0.0,
            seed: 0,
            convention: None,
            num_classes,
            realized_rate: 0.0,
            proxy_epoch: None,
            proxy_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub images: Vec<Image>,
    pub records: Vec<CorruptionRecord>,
    pub num_classes: usize,
    pub manifest: ManifestHeader,
}

impl NoisyDataset {
    /// A dataset whose given labels equal the ground truth.
    pub fn clean(images: Vec<Image>, labels: &[usize], num_classes: usize) -> Result<Self> {
        let records = labels.iter().enumerate().map(|(i, &l)| CorruptionRecord::clean(i, l)).collect();
        let ds = Self { images, records, num_classes, manifest: ManifestHeader::clean(num_classes) };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn given_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.given_label).collect()
    }

    pub fn true_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.true_label).collect()
    }

    pub fn is_clean(&self) -> bool {
        self.records.iter().all(|r| !r.corrupted)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.records.len() {
            return Err(Error::validation(
                "dataset",
                format!("{} images but {} label records", self.images.len(), self.records.len()),
            ));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.index != i {
                return Err(Error::validation("dataset", format!("record {i} carries index {}", r.index)));
            }
            if r.true_label >= self.num_classes || r.given_label >= self.num_classes {
                return Err(Error::validation(
                    "dataset",
                    format!("record {i} has labels ({}, {}) outside [0, {})", r.true_label, r.given_label, self.num_classes),
                ));
            }
            if r.corrupted != (r.true_label != r.given_label) {
                return Err(Error::validation("dataset", format!("record {i} has an inconsistent corrupted flag")));
            }
        }
        Ok(())
    }

    /// Same images with new label records (and manifest).
    pub fn with_records(&self, records: Vec<CorruptionRecord>, manifest: ManifestHeader) -> Result<Self> {
        let ds = Self { images: self.images.clone(), records, num_classes: self.num_classes, manifest };
        ds.validate()?;
        Ok(ds)
    }
}
