//! Shared encoder with classifier, projection and mixup-attention heads.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Var};
use crate::error::{Error, Result};
use crate::image::{to_nhwc, Image};
use crate::nn::{BatchNorm, Conv2d, Linear, ParamId, ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    #[serde(rename = "small_residual_18")]
    SmallResidual18,
    #[serde(rename = "vgg_19_like")]
    Vgg19Like,
    ToyCnn,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::SmallResidual18 => "small_residual_18",
            EncoderKind::Vgg19Like => "vgg_19_like",
            EncoderKind::ToyCnn => "toy_cnn",
        })
    }
}

/// How the toy CNN turns its last feature map into a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Average,
    /// Keep every position: `d = h × w × channels` of the last map.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    /// Channel widths of the toy CNN's conv layers.
    pub toy_widths: Vec<usize>,
    pub toy_pooling: Pooling,
    /// First-stage width of the residual and VGG encoders (64 gives d = 512).
    pub base_width: usize,
    /// Layers in the projection head (1 or 2).
    pub projection_layers: usize,
    pub projection_dim: usize,
    /// Layers in the mixup-attention head (1, 2 or 3).
    pub mixup_head_layers: usize,
    pub num_classes: usize,
    pub group_size: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_kind: EncoderKind::SmallResidual18,
            toy_widths: vec![8, 16, 32],
            toy_pooling: Pooling::Average,
            base_width: 64,
            projection_layers: 2,
            projection_dim: 128,
            mixup_head_layers: 2,
            num_classes: 4,
            group_size: 4,
            input_channels: 3,
            input_height: 32,
            input_width: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.projection_layers) {
            return Err(Error::validation("model.projection_layers", format!("{} not in {{1, 2}}", self.projection_layers)));
        }
        if !(1..=3).contains(&self.mixup_head_layers) {
            return Err(Error::validation("model.mixup_head_layers", format!("{} not in {{1, 2, 3}}", self.mixup_head_layers)));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("model.num_classes", "need at least 2 classes"));
        }
        if self.group_size == 0 {
            return Err(Error::validation("model.group_size", "must be at least 1"));
        }
        if self.projection_dim == 0 {
            return Err(Error::validation("model.projection_dim", "must be positive"));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::validation("model.input_channels", format!("{}; expected 1 or 3", self.input_channels)));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::validation("model.input size", "must be positive"));
        }
        match self.encoder_kind {
            EncoderKind::ToyCnn if self.toy_widths.is_empty() || self.toy_widths.contains(&0) => {
                Err(Error::validation("model.toy_widths", "need at least one positive width"))
            }
            EncoderKind::SmallResidual18 | EncoderKind::Vgg19Like if self.base_width == 0 => {
                Err(Error::validation("model.base_width", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Encoder feature dimension `d`.
    pub fn feature_dim(&self) -> usize {
        match self.encoder_kind {
            EncoderKind::ToyCnn => {
                let width = *self.toy_widths.last().unwrap_or(&0);
                match self.toy_pooling {
                    Pooling::Average => width,
                    Pooling::Flatten => {
                        let (h, w) = self.toy_output_size();
                        h * w * width
                    }
                }
            }
            EncoderKind::SmallResidual18 => 8 * self.base_width,
            EncoderKind::Vgg19Like => 8 * vgg_width(self.base_width, 64),
        }
    }
}

impl ModelConfig {
    /// Spatial size of the toy CNN's last feature map.
    fn toy_output_size(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for _ in 1..self.toy_widths.len() {
            if h >= 2 && w >= 2 {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }
}

fn vgg_width(base: usize, reference: usize) -> usize {
    (reference * base / 64).max(1)
}

fn conv3(pad_stride: usize) -> ConvGeom {
    ConvGeom { kernel: 3, stride: pad_stride, pad: 1 }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, conv3(stride), false, rng);
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), cout);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, conv3(1), false, rng);
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), cout);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let geom = ConvGeom { kernel: 1, stride, pad: 0 };
            (
                Conv2d::new(store, &format!("{name}.shortcut.conv"), cin, cout, geom, false, rng),
                BatchNorm::new(store, &format!("{name}.shortcut.bn"), cout),
            )
        });
        Self { conv1, bn1, conv2, bn2, shortcut }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let y = conv.forward(s, x)?;
                bn.forward(s, y)?
            }
            None => x,
        };
        let y = s.graph.add(h, skip)?;
        Ok(s.graph.relu(y))
    }
}

#[derive(Debug, Clone)]
enum VggItem {
    Conv(Conv2d, BatchNorm),
    Pool,
}

#[derive(Debug, Clone)]
enum Encoder {
    Toy { convs: Vec<Conv2d>, flatten: bool },
    Residual { stem: Conv2d, stem_bn: BatchNorm, stem_pool: bool, blocks: Vec<BasicBlock> },
    Vgg(Vec<VggItem>),
}

impl Encoder {
    fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let cin = cfg.input_channels;
        match cfg.encoder_kind {
            EncoderKind::ToyCnn => {
                let mut prev = cin;
                let convs = cfg
                    .toy_widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let c = Conv2d::new(store, &format!("encoder.conv{i}"), prev, w, conv3(1), true, rng);
                        prev = w;
                        c
                    })
                    .collect();
                Encoder::Toy { convs, flatten: cfg.toy_pooling == Pooling::Flatten }
            }
            EncoderKind::SmallResidual18 => {
                let w = cfg.base_width;
                // small inputs keep full resolution in the stem
                let large = cfg.input_height.min(cfg.input_width) >= 64;
                let geom = if large { ConvGeom { kernel: 7, stride: 2, pad: 3 } } else { conv3(1) };
                let stem = Conv2d::new(store, "encoder.stem.conv", cin, w, geom, false, rng);
                let stem_bn = BatchNorm::new(store, "encoder.stem.bn", w);
                let mut blocks = Vec::new();
                let mut prev = w;
                for (stage, width) in [w, 2 * w, 4 * w, 8 * w].into_iter().enumerate() {
                    for b in 0..2 {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        blocks.push(BasicBlock::new(store, &format!("encoder.layer{}.{b}", stage + 1), prev, width, stride, rng));
                        prev = width;
                    }
                }
                Encoder::Residual { stem, stem_bn, stem_pool: large, blocks }
            }
            EncoderKind::Vgg19Like => {
                let plan: [usize; 21] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0];
                let mut prev = cin;
                let mut items = Vec::new();
                for (i, &width) in plan.iter().enumerate() {
                    if width == 0 {
                        items.push(VggItem::Pool);
                        continue;
                    }
                    let w = vgg_width(cfg.base_width, width);
                    items.push(VggItem::Conv(
                        Conv2d::new(store, &format!("encoder.features.{i}.conv"), prev, w, conv3(1), false, rng),
                        BatchNorm::new(store, &format!("encoder.features.{i}.bn"), w),
                    ));
                    prev = w;
                }
                Encoder::Vgg(items)
            }
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        match self {
            Encoder::Toy { convs, flatten } => {
                for (i, conv) in convs.iter().enumerate() {
                    h = conv.forward(s, h)?;
                    h = s.graph.relu(h);
                    if i + 1 < convs.len() && s.graph.shape(h)[1] >= 2 && s.graph.shape(h)[2] >= 2 {
                        h = s.graph.max_pool2(h)?;
                    }
                }
                if *flatten {
                    let shape = s.graph.shape(h).to_vec();
                    return s.graph.reshape(h, &[shape[0], shape[1..].iter().product()]);
                }
            }
            Encoder::Residual { stem, stem_bn, stem_pool, blocks } => {
                h = stem.forward(s, h)?;
                h = stem_bn.forward(s, h)?;
                h = s.graph.relu(h);
                if *stem_pool {
                    h = s.graph.max_pool2(h)?;
                }
                for b in blocks {
                    h = b.forward(s, h)?;
                }
            }
            Encoder::Vgg(items) => {
                for item in items {
                    match item {
                        VggItem::Conv(conv, bn) => {
                            h = conv.forward(s, h)?;
                            h = bn.forward(s, h)?;
                            h = s.graph.relu(h);
                        }
                        VggItem::Pool => {
                            if s.graph.shape(h)[1] >= 2 && s.graph.shape(h)[2] >= 2 {
                                h = s.graph.max_pool2(h)?;
                            }
                        }
                    }
                }
            }
        }
        s.graph.global_avg_pool(h)
    }
}

fn mlp(s: &mut Session, layers: &[Linear], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(s, h)?;
        if i + 1 < layers.len() {
            h = s.graph.relu(h);
        }
    }
    Ok(h)
}

/// Learnable log-scales of the two supervised loss weights.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyParams {
    pub log_sigma_mixup: ParamId,
    pub log_sigma_supervised: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    pub classifier: Linear,
    pub projection: Vec<Linear>,
    pub mixup_head: Vec<Linear>,
    pub uncertainty: UncertaintyParams,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config, &mut store, &mut rng);
        let d = config.feature_dim();
        let classifier = Linear::new(&mut store, "classifier", d, config.num_classes, &mut rng);
        let projection = match config.projection_layers {
            1 => vec![Linear::new(&mut store, "projection.0", d, config.projection_dim, &mut rng)],
            _ => vec![
                Linear::new(&mut store, "projection.0", d, d, &mut rng),
                Linear::new(&mut store, "projection.1", d, config.projection_dim, &mut rng),
            ],
        };
        let m = config.group_size;
        let mut dims = vec![d * m];
        dims.extend(std::iter::repeat_n(d, config.mixup_head_layers - 1));
        dims.push(m);
        let mixup_head = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("mixup_head.{i}"), w[0], w[1], &mut rng))
            .collect();
        let zero = ndarray::ArrayD::zeros(ndarray::IxDyn(&[]));
        let uncertainty = UncertaintyParams {
            log_sigma_mixup: store.add("uncertainty.log_sigma_mixup", zero.clone()),
            log_sigma_supervised: store.add("uncertainty.log_sigma_supervised", zero),
        };
        Ok(Self { config: config.clone(), store, encoder, classifier, projection, mixup_head, uncertainty })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// `[B, H, W, C]` images to `[B, d]` features.
    pub fn encode(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.input_height || shape[2] != c.input_width || shape[3] != c.input_channels {
            return Err(Error::validation(
                "encoder input",
                format!("shape {shape:?}, expected [B, {}, {}, {}]", c.input_height, c.input_width, c.input_channels),
            ));
        }
        self.encoder.forward(s, x)
    }

    /// `[B, d]` features to `[B, C]` logits.
    pub fn classify(&self, s: &mut Session, features: Var) -> Result<Var> {
        self.classifier.forward(s, features)
    }

    /// `[B, d]` features to `[B, p]` embeddings.
    pub fn project(&self, s: &mut Session, features: Var) -> Result<Var> {
        mlp(s, &self.projection, features)
    }

    /// `[K, M·d]` concatenated group features to `[K, M]` weights in (0, 1).
    pub fn attention_weights(&self, s: &mut Session, group_features: Var) -> Result<Var> {
        let expected = self.feature_dim() * self.config.group_size;
        let shape = s.graph.shape(group_features);
        if shape.len() != 2 || shape[1] != expected {
            return Err(Error::validation("mixup head input", format!("shape {shape:?}, expected [K, {expected}]")));
        }
        let h = mlp(s, &self.mixup_head, group_features)?;
        Ok(s.graph.sigmoid(h))
    }

    /// Eval-mode features for a list of images, computed in chunks.
    pub fn features(&self, images: &[Image]) -> Result<Array2<f64>> {
        self.eval_map(images, |m, s, x| m.encode(s, x))
    }

    /// Eval-mode logits for a list of images.
    pub fn logits(&self, images: &[Image]) -> Result<Array2<f64>> {
        self.eval_map(images, |m, s, x| {
            let v = m.encode(s, x)?;
            m.classify(s, v)
        })
    }

    fn eval_map(&self, images: &[Image], f: impl Fn(&Self, &mut Session, Var) -> Result<Var>) -> Result<Array2<f64>> {
        const CHUNK: usize = 256;
        let mut parts = Vec::new();
        for chunk in images.chunks(CHUNK) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let mut s = Session::new(&self.store, false);
            let x = s.graph.constant(to_nhwc(&refs)?);
            let out = f(self, &mut s, x)?;
            let v = s.graph.value(out);
            let rows = v.shape()[0];
            parts.push(v.view().into_shape_with_order((rows, v.len() / rows.max(1))).expect("2-d output").to_owned());
        }
        if parts.is_empty() {
            return Err(Error::validation("images", "empty input"));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn sigma(&self) -> (f64, f64) {
        let get = |id| self.store.value(id).iter().next().copied().unwrap_or(0.0).exp();
        (get(self.uncertainty.log_sigma_mixup), get(self.uncertainty.log_sigma_supervised))
    }
}
