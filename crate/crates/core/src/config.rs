//! Experiment configuration files (TOML).
//!
//! ```toml
//! output = "runs/sym40"
//! export_features = false
//!
//! [dataset]
//! # root = "data/oct"      # folder-per-class images; omit for synthetic data
//! channels = 3
//! height = 16
//! width = 16
//! test_fraction = 0.2      # folder datasets only
//! split_seed = 0
//! class_names = []         # optional check against the discovered classes
//! standardize = false      # per-channel mean/std from the training split
//!
//! [dataset.synthetic]
//! num_classes = 4
//! train_size = 2000
//! test_size = 1000
//! seed = 0
//!
//! [noise]
//! kind = "symmetric"       # none | symmetric | asymmetric | instance_dependent
//! rate = 0.4
//! convention = "uniform_all"
//! seed = 0
//!
//! [model]
//! encoder_kind = "toy_cnn" # small_residual_18 | vgg_19_like | toy_cnn
//!
//! [train]
//! method = "ours"          # ours | default_baseline | label_smooth
//! stage1_epochs = 10
//! stage2_epochs = 20
//! ```
//!
//! Every table accepts the full set of fields of the type it maps to and
//! rejects unknown keys. The model's class count, group size and input
//! geometry are taken from `[dataset]` and `[train]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_folder_dataset, split_dataset, SyntheticRecipe};
use crate::dataset::{NoiseKind, NoisyDataset, SymmetricConvention};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{EncoderKind, ModelConfig, Pooling};
use crate::noise::ProxyOptions;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: Option<PathBuf>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub class_names: Vec<String>,
    pub standardize: bool,
    pub synthetic: SyntheticRecipe,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            root: None,
            channels: 3,
            height: 16,
            width: 16,
            test_fraction: 0.2,
            split_seed: 0,
            class_names: Vec::new(),
            standardize: false,
            synthetic: SyntheticRecipe::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub convention: SymmetricConvention,
    pub seed: u64,
    pub proxy: ProxyOptions,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { kind: NoiseKind::None, rate: 0.0, convention: SymmetricConvention::default(), seed: 0, proxy: ProxyOptions::default() }
    }
}

/// Architecture fields of [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_kind: EncoderKind,
    pub toy_widths: Vec<usize>,
    pub toy_pooling: Pooling,
    pub base_width: usize,
    pub projection_layers: usize,
    pub projection_dim: usize,
    pub mixup_head_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            encoder_kind: m.encoder_kind,
            toy_widths: m.toy_widths,
            toy_pooling: m.toy_pooling,
            base_width: m.base_width,
            projection_layers: m.projection_layers,
            projection_dim: m.projection_dim,
            mixup_head_layers: m.mixup_head_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory.
    pub output: PathBuf,
    pub export_features: bool,
    pub dataset: DatasetSpec,
    pub noise: NoiseSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs/default"),
            export_features: false,
            dataset: DatasetSpec::default(),
            noise: NoiseSpec::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Loaded train/test splits, both with clean labels.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: NoisyDataset,
    pub test: NoisyDataset,
    pub class_names: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn num_classes(&self) -> usize {
        if self.dataset.root.is_some() && !self.dataset.class_names.is_empty() {
            self.dataset.class_names.len()
        } else {
            self.dataset.synthetic.num_classes
        }
    }

    /// Recipe with the spec's image geometry filled in.
    pub fn recipe(&self) -> SyntheticRecipe {
        SyntheticRecipe {
            channels: self.dataset.channels,
            height: self.dataset.height,
            width: self.dataset.width,
            ..self.dataset.synthetic.clone()
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            encoder_kind: m.encoder_kind,
            toy_widths: m.toy_widths.clone(),
            toy_pooling: m.toy_pooling,
            base_width: m.base_width,
            projection_layers: m.projection_layers,
            projection_dim: m.projection_dim,
            mixup_head_layers: m.mixup_head_layers,
            num_classes,
            group_size: self.train.group_size,
            input_channels: self.dataset.channels,
            input_height: self.dataset.height,
            input_width: self.dataset.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.channels != 1 && d.channels != 3 {
            return Err(Error::validation("dataset.channels", format!("{}; expected 1 or 3", d.channels)));
        }
        if d.root.is_none() {
            self.recipe().validate()?;
        } else if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::validation("dataset.test_fraction", format!("{} not in (0, 1)", d.test_fraction)));
        }
        let n = &self.noise;
        if !(0.0..1.0).contains(&n.rate) {
            return Err(Error::validation("noise.rate", format!("{} not in [0, 1)", n.rate)));
        }
        if n.kind == NoiseKind::None && n.rate != 0.0 {
            return Err(Error::validation("noise.rate", "must be 0 when noise.kind is none"));
        }
        self.train.validate()?;
        self.model_config(self.num_classes().max(2)).validate()
    }

    /// Loads or generates the clean splits described by `[dataset]`.
    pub fn load_data(&self) -> Result<LoadedData> {
        let d = &self.dataset;
        let mut data = match &d.root {
            None => {
                let recipe = self.recipe();
                let (train, test) = generate_synthetic(&recipe)?;
                let class_names = recipe.class_shapes().iter().map(|s| format!("{s:?}").to_lowercase()).collect();
                LoadedData { train, test, class_names }
            }
            Some(root) => {
                let folder = load_folder_dataset(root, d.channels, d.height, d.width)?;
                if !d.class_names.is_empty() && d.class_names != folder.class_names {
                    return Err(Error::Ingest {
                        path: root.clone(),
                        reason: format!("declared classes {:?} but found {:?}", d.class_names, folder.class_names),
                    });
                }
                let (train, test) = split_dataset(&folder.dataset, d.test_fraction, d.split_seed)?;
                LoadedData { train, test, class_names: folder.class_names }
            }
        };
        if d.standardize {
            let stats = channel_stats(&data.train.images);
            standardize(&mut data.train.images, &stats);
            standardize(&mut data.test.images, &stats);
        }
        Ok(data)
    }
}

/// Per-channel `(mean, std)` over a set of images.
pub fn channel_stats(images: &[Image]) -> Vec<(f64, f64)> {
    let Some(first) = images.first() else { return Vec::new() };
    (0..first.channels)
        .map(|c| {
            let n = (images.len() * first.height * first.width) as f64;
            let mean = images.iter().flat_map(|i| i.plane(c)).sum::<f64>() / n;
            let var = images.iter().flat_map(|i| i.plane(c)).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt().max(1e-12))
        })
        .collect()
}

pub fn standardize(images: &mut [Image], stats: &[(f64, f64)]) {
    for img in images {
        for (c, &(mean, std)) in stats.iter().enumerate() {
            for y in 0..img.height {
                for x in 0..img.width {
                    let v = img.at_mut(c, y, x);
                    *v = (*v - mean) / std;
                }
            }
        }
    }
}
