//! Two-stage training (contrastive warm-up, then joint decision loss) and the
//! plain supervised baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{strong_view, weak_view, AugmentConfig};
use crate::autograd::Var;
use crate::dataset::NoisyDataset;
use crate::error::{Error, Result};
use crate::image::{to_nhwc, Image};
use crate::losses::{contrastive_loss_graph, decision_loss_graph, mixup_graph, one_hot, smooth_labels};
use crate::model::{Model, ModelConfig};
use crate::nn::{apply_buffer_updates, Session};
use crate::optim::Adam;
use crate::sampler::{derive_seed, shuffled_batches, GroupingMode, MgbsSampler, MiniGroupBatch, RemainderPolicy};

const INIT_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const WARMUP_STREAM: u64 = 3;
const SAMPLER_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Ours,
    DefaultBaseline,
    LabelSmooth,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ours => "ours",
            Method::DefaultBaseline => "default_baseline",
            Method::LabelSmooth => "label_smooth",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Method::Ours),
            "default_baseline" | "default" => Ok(Method::DefaultBaseline),
            "label_smooth" => Ok(Method::LabelSmooth),
            other => Err(Error::validation("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Which terms of the full objective are active (ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSwitches {
    pub supervised: bool,
    pub mixup: bool,
    pub contrastive: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self { supervised: true, mixup: true, contrastive: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `K`: groups per batch.
    pub groups_per_batch: usize,
    /// `M`: samples per group.
    pub group_size: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub temperature: f64,
    pub lambda: f64,
    /// Learn the two uncertainty scales; when false both stay at 1.
    pub learn_sigma: bool,
    pub include_positive_in_denominator: bool,
    pub losses: LossSwitches,
    pub grouping: GroupingMode,
    pub remainder: RemainderPolicy,
    /// Label-smoothing strength for the `label_smooth` baseline.
    pub smooth_epsilon: f64,
    /// Group size used by the baselines; 1 is ordinary shuffled batching.
    pub baseline_group_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            stage1_epochs: 30,
            stage2_epochs: 70,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            groups_per_batch: 2,
            group_size: 4,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            temperature: 0.5,
            lambda: 0.1,
            learn_sigma: true,
            include_positive_in_denominator: false,
            losses: LossSwitches::default(),
            grouping: GroupingMode::IntraClass,
            remainder: RemainderPolicy::Resample,
            smooth_epsilon: 0.1,
            baseline_group_size: 1,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// `N_b = K × M`
    pub fn batch_size(&self) -> usize {
        self.groups_per_batch * self.group_size
    }

    /// Epochs a run of this config trains for; the warm-up is skipped when
    /// the contrastive term is off.
    pub fn total_epochs(&self) -> usize {
        match self.method {
            Method::Ours if !self.losses.contrastive => self.stage2_epochs,
            _ => self.stage1_epochs + self.stage2_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: String| Err(Error::validation(format!("train.{name}"), reason));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} is not positive", self.learning_rate));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor", format!("{} not in (0, 1]", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta", format!("({}, {}) not in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", format!("{} is not positive", self.temperature));
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", format!("{} is negative", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.smooth_epsilon) {
            return bad("smooth_epsilon", format!("{} not in [0, 1]", self.smooth_epsilon));
        }
        if self.groups_per_batch == 0 || self.group_size == 0 {
            return bad("batch", "groups_per_batch and group_size must be at least 1".into());
        }
        if self.baseline_group_size == 0 || !self.batch_size().is_multiple_of(self.baseline_group_size) {
            return bad(
                "baseline_group_size",
                format!("{} does not divide the batch size {}", self.baseline_group_size, self.batch_size()),
            );
        }
        if self.method == Method::Ours && !self.losses.supervised && !self.losses.mixup {
            return bad("losses", "at least one of supervised or mixup must be enabled".into());
        }
        self.augment.validate()
    }

    fn contrastive_in_stage2(&self) -> bool {
        self.losses.contrastive && self.lambda > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Stage1,
    Stage2,
    Baseline,
}

/// Learning rate for epoch `phase_epoch` (0-based) of a phase. Stage 1 runs
/// at the base rate; stage 2 decays every `lr_decay_every` epochs; baselines
/// follow the same totals, decaying from epoch `stage1_epochs` on.
pub fn learning_rate(cfg: &TrainConfig, phase: Phase, phase_epoch: usize) -> f64 {
    let decayed = |e: usize| cfg.learning_rate * cfg.lr_decay_factor.powi((e / cfg.lr_decay_every) as i32);
    match phase {
        Phase::Init | Phase::Stage1 => cfg.learning_rate,
        Phase::Stage2 => decayed(phase_epoch),
        Phase::Baseline => match phase_epoch.checked_sub(cfg.stage1_epochs) {
            None => cfg.learning_rate,
            Some(e) => decayed(e),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    pub steps: usize,
    /// Mean optimized objective over the epoch's steps.
    pub loss: f64,
    pub supervised_loss: Option<f64>,
    pub mixup_loss: Option<f64>,
    pub contrastive_sum: Option<f64>,
    pub contrastive_mean: Option<f64>,
    pub decision_loss: Option<f64>,
    pub sigma_mixup: Option<f64>,
    pub sigma_supervised: Option<f64>,
    /// Percent of weak-view training predictions matching the given labels.
    pub train_accuracy: Option<f64>,
    /// Percent of test predictions matching the true labels.
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    /// Completed epochs across all phases.
    pub epoch: usize,
    pub phase: Phase,
    pub step: usize,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, derive_seed(cfg.seed, INIT_STREAM))?;
        let optimizer = Adam::new(model.store.len(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self { model, optimizer, epoch: 0, phase: Phase::Init, step: 0, history: Vec::new() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Views and labels of one training batch, in group order.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub indices: Vec<usize>,
    pub weak: Vec<Image>,
    /// Two strong views per sample, interleaved; empty when unused.
    pub strong: Vec<Image>,
    pub given: Vec<usize>,
    pub group_labels: Vec<Option<usize>>,
    pub group_size: usize,
}

impl StepBatch {
    pub fn from_groups(
        dataset: &NoisyDataset,
        batch: &MiniGroupBatch,
        with_strong: bool,
        augment: &AugmentConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let indices = batch.indices();
        let mut weak = Vec::with_capacity(indices.len());
        let mut strong = Vec::new();
        for &i in &indices {
            let img = &dataset.images[i];
            weak.push(weak_view(img, augment, rng)?);
            if with_strong {
                strong.push(strong_view(img, augment, rng)?);
                strong.push(strong_view(img, augment, rng)?);
            }
        }
        let given = indices.iter().map(|&i| dataset.records[i].given_label).collect();
        Ok(Self {
            indices,
            weak,
            strong,
            given,
            group_labels: batch.groups.iter().map(|g| g.given_label).collect(),
            group_size: batch.group_size,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub supervised: Option<f64>,
    pub mixup: Option<f64>,
    pub contrastive_sum: Option<f64>,
    pub contrastive_mean: Option<f64>,
    pub decision: Option<f64>,
    pub correct: usize,
    pub count: usize,
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn count_correct(s: &Session, logits: Var, labels: &[usize]) -> usize {
    let v = s.graph.value(logits);
    let v = v.view().into_shape_with_order((labels.len(), v.len() / labels.len())).expect("logit matrix");
    v.rows().into_iter().zip(labels).filter(|(r, &l)| argmax_row(*r) == l).count()
}

fn images_var(s: &mut Session, images: &[Image]) -> Result<Var> {
    let refs: Vec<&Image> = images.iter().collect();
    Ok(s.graph.constant(to_nhwc(&refs)?))
}

fn constant_matrix(s: &mut Session, m: ndarray::Array2<f64>) -> Var {
    s.graph.constant(m.into_dyn())
}

/// Builds the stage-2 objective `L_d + λ·mean(L_c)` for one batch.
pub fn stage2_objective(s: &mut Session, model: &Model, batch: &StepBatch, cfg: &TrainConfig) -> Result<(Var, StepLosses)> {
    let nb = batch.weak.len();
    let m = batch.group_size;
    let k = batch.group_labels.len();
    let c = model.config.num_classes;
    if nb != k * m || nb == 0 {
        return Err(Error::Shape(format!("batch of {nb} samples is not {k} groups of {m}")));
    }
    let use_lc = cfg.contrastive_in_stage2();
    if use_lc && batch.strong.len() != 2 * nb {
        return Err(Error::Shape(format!("{} strong views for {nb} samples", batch.strong.len())));
    }
    let mut all = batch.weak.clone();
    if use_lc {
        all.extend(batch.strong.iter().cloned());
    }
    let x = images_var(s, &all)?;
    let feats = model.encode(s, x)?;
    let v = if use_lc { s.graph.slice_rows(feats, 0, nb)? } else { feats };
    let logits = model.classify(s, v)?;
    let mut out = StepLosses { count: nb, correct: count_correct(s, logits, &batch.given), ..Default::default() };

    let l_s = if cfg.losses.supervised {
        let t = constant_matrix(s, one_hot(&batch.given, c)?);
        let l = s.graph.soft_cross_entropy(logits, t)?;
        out.supervised = Some(s.graph.scalar(l));
        Some(l)
    } else {
        None
    };

    let l_m = if cfg.losses.mixup {
        let d = model.feature_dim();
        let concat = s.graph.reshape(v, &[k, m * d])?;
        let w = model.attention_weights(s, concat)?;
        let mut mixed = Vec::with_capacity(k);
        let mut targets = Vec::with_capacity(k);
        for g in 0..k {
            let wk = s.graph.slice_rows(w, g, 1)?;
            let vk = s.graph.slice_rows(v, g * m, m)?;
            mixed.push(mixup_graph(&mut s.graph, wk, vk)?);
            let members = &batch.given[g * m..(g + 1) * m];
            let target = match batch.group_labels[g] {
                Some(label) => constant_matrix(s, one_hot(&[label], c)?),
                None => {
                    let y = constant_matrix(s, one_hot(members, c)?);
                    mixup_graph(&mut s.graph, wk, y)?
                }
            };
            targets.push(target);
        }
        let vmix = s.graph.concat_rows(&mixed)?;
        let ymix = s.graph.concat_rows(&targets)?;
        let mix_logits = model.classify(s, vmix)?;
        let l = s.graph.soft_cross_entropy(mix_logits, ymix)?;
        out.mixup = Some(s.graph.scalar(l));
        Some(l)
    } else {
        None
    };

    let l_d = match (l_m, l_s) {
        (Some(lm), Some(ls)) if cfg.learn_sigma => {
            let s1 = s.param(model.uncertainty.log_sigma_mixup);
            let s2 = s.param(model.uncertainty.log_sigma_supervised);
            decision_loss_graph(&mut s.graph, lm, ls, s1, s2)?
        }
        (Some(lm), Some(ls)) => s.graph.add(lm, ls)?,
        (Some(l), None) | (None, Some(l)) => l,
        (None, None) => return Err(Error::validation("train.losses", "no supervised term enabled")),
    };
    out.decision = Some(s.graph.scalar(l_d));

    let total = if use_lc {
        let sv = s.graph.slice_rows(feats, nb, 2 * nb)?;
        let u = model.project(s, sv)?;
        let (sum, mean) = contrastive_loss_graph(&mut s.graph, u, cfg.temperature, cfg.include_positive_in_denominator)?;
        out.contrastive_sum = Some(s.graph.scalar(sum));
        out.contrastive_mean = Some(s.graph.scalar(mean));
        let reg = s.graph.scale(mean, cfg.lambda);
        s.graph.add(l_d, reg)?
    } else {
        l_d
    };
    out.total = s.graph.scalar(total);
    Ok((total, out))
}

/// Contrastive warm-up objective over interleaved strong views.
pub fn stage1_objective(s: &mut Session, model: &Model, strong: &[Image], cfg: &TrainConfig) -> Result<(Var, StepLosses)> {
    let x = images_var(s, strong)?;
    let v = model.encode(s, x)?;
    let u = model.project(s, v)?;
    let (sum, mean) = contrastive_loss_graph(&mut s.graph, u, cfg.temperature, cfg.include_positive_in_denominator)?;
    let out = StepLosses {
        total: s.graph.scalar(mean),
        contrastive_sum: Some(s.graph.scalar(sum)),
        contrastive_mean: Some(s.graph.scalar(mean)),
        ..Default::default()
    };
    Ok((mean, out))
}

/// Plain supervised objective on weak views; `epsilon = 0` is the Default baseline.
pub fn baseline_objective(s: &mut Session, model: &Model, batch: &StepBatch, epsilon: f64) -> Result<(Var, StepLosses)> {
    let x = images_var(s, &batch.weak)?;
    let v = model.encode(s, x)?;
    let logits = model.classify(s, v)?;
    let t = constant_matrix(s, smooth_labels(&batch.given, model.config.num_classes, epsilon)?);
    let l = s.graph.soft_cross_entropy(logits, t)?;
    let value = s.graph.scalar(l);
    Ok((
        l,
        StepLosses {
            total: value,
            supervised: Some(value),
            correct: count_correct(s, logits, &batch.given),
            count: batch.given.len(),
            ..Default::default()
        },
    ))
}

/// Runs one forward/backward pass and applies an Adam update.
pub fn optimize_step<F>(state: &mut TrainState, lr: f64, objective: F) -> Result<StepLosses>
where
    F: FnOnce(&mut Session, &Model) -> Result<(Var, StepLosses)>,
{
    let (grads, buffers, losses) = {
        let mut s = Session::new(&state.model.store, true);
        let (total, losses) = objective(&mut s, &state.model)?;
        if !losses.total.is_finite() {
            let (s1, s2) = state.model.sigma();
            return Err(Error::NonFinite {
                epoch: state.epoch,
                step: state.step,
                snapshot: format!("{losses:?}, sigma=({s1}, {s2}), lr={lr}"),
            });
        }
        let mut g = s.graph.backward(total)?;
        (s.param_grads(&mut g), s.take_buffer_updates(), losses)
    };
    apply_buffer_updates(&mut state.model.store, buffers);
    state.optimizer.step(&mut state.model.store, grads, lr);
    state.step += 1;
    Ok(losses)
}

/// Train-mode loss of a batch without updating anything.
pub fn evaluate_objective<F>(model: &Model, objective: F) -> Result<StepLosses>
where
    F: FnOnce(&mut Session, &Model) -> Result<(Var, StepLosses)>,
{
    let mut s = Session::new(&model.store, true);
    objective(&mut s, model).map(|(_, l)| l)
}

pub fn predict_labels(model: &Model, images: &[Image]) -> Result<Vec<usize>> {
    let logits = model.logits(images)?;
    Ok(logits.rows().into_iter().map(argmax_row).collect())
}

fn test_accuracy(model: &Model, test: Option<&NoisyDataset>) -> Result<Option<f64>> {
    let Some(test) = test else { return Ok(None) };
    let preds = predict_labels(model, &test.images)?;
    let hits = preds.iter().zip(&test.records).filter(|(p, r)| **p == r.true_label).count();
    Ok(Some(100.0 * hits as f64 / test.len() as f64))
}

#[derive(Default)]
struct Accum {
    steps: usize,
    total: f64,
    supervised: Option<f64>,
    mixup: Option<f64>,
    contrastive_sum: Option<f64>,
    contrastive_mean: Option<f64>,
    decision: Option<f64>,
    correct: usize,
    count: usize,
}

impl Accum {
    fn add(&mut self, l: &StepLosses) {
        fn acc(slot: &mut Option<f64>, v: Option<f64>) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
        self.steps += 1;
        self.total += l.total;
        acc(&mut self.supervised, l.supervised);
        acc(&mut self.mixup, l.mixup);
        acc(&mut self.contrastive_sum, l.contrastive_sum);
        acc(&mut self.contrastive_mean, l.contrastive_mean);
        acc(&mut self.decision, l.decision);
        self.correct += l.correct;
        self.count += l.count;
    }

    fn finish(self, state: &TrainState, phase: Phase, lr: f64, sigma: bool, test: Option<f64>) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        let mean = |v: Option<f64>| v.map(|v| v / n);
        let (s1, s2) = state.model.sigma();
        EpochMetrics {
            epoch: state.epoch,
            phase,
            learning_rate: lr,
            steps: self.steps,
            loss: self.total / n,
            supervised_loss: mean(self.supervised),
            mixup_loss: mean(self.mixup),
            contrastive_sum: mean(self.contrastive_sum),
            contrastive_mean: mean(self.contrastive_mean),
            decision_loss: mean(self.decision),
            sigma_mixup: sigma.then_some(s1),
            sigma_supervised: sigma.then_some(s2),
            train_accuracy: (self.count > 0).then(|| 100.0 * self.correct as f64 / self.count as f64),
            test_accuracy: test,
        }
    }
}

fn epoch_rng(cfg: &TrainConfig, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, AUGMENT_STREAM), epoch as u64))
}

fn finish_epoch<H>(state: &mut TrainState, metrics: EpochMetrics, hook: &mut H) -> Result<Control>
where
    H: FnMut(&TrainState, &EpochMetrics) -> Result<Control>,
{
    log::info!(
        "epoch {} ({:?}) lr {:.2e} loss {:.5} train_acc {:?} test_acc {:?}",
        metrics.epoch,
        metrics.phase,
        metrics.learning_rate,
        metrics.loss,
        metrics.train_accuracy,
        metrics.test_accuracy
    );
    state.history.push(metrics.clone());
    state.epoch += 1;
    hook(state, &metrics)
}

fn check_dataset(dataset: &NoisyDataset, model: &Model) -> Result<()> {
    dataset.validate()?;
    if dataset.num_classes != model.config.num_classes {
        return Err(Error::validation(
            "dataset",
            format!("{} classes but the model predicts {}", dataset.num_classes, model.config.num_classes),
        ));
    }
    Ok(())
}

/// Contrastive warm-up: label-agnostic shuffled batches of `K × M` samples,
/// two strong views each; only the encoder and projection head are updated.
pub fn train_stage1_with<H>(state: &mut TrainState, dataset: &NoisyDataset, cfg: &TrainConfig, hook: &mut H) -> Result<Control>
where
    H: FnMut(&TrainState, &EpochMetrics) -> Result<Control>,
{
    check_dataset(dataset, &state.model)?;
    state.phase = Phase::Stage1;
    if !cfg.losses.contrastive {
        return Ok(Control::Continue);
    }
    let warmup_seed = derive_seed(cfg.seed, WARMUP_STREAM);
    for e in 0..cfg.stage1_epochs {
        let lr = learning_rate(cfg, Phase::Stage1, e);
        let mut rng = epoch_rng(cfg, state.epoch);
        let mut acc = Accum::default();
        for idx in shuffled_batches(dataset.len(), cfg.batch_size(), warmup_seed, state.epoch)? {
            let mut strong = Vec::with_capacity(2 * idx.len());
            for &i in &idx {
                strong.push(strong_view(&dataset.images[i], &cfg.augment, &mut rng)?);
                strong.push(strong_view(&dataset.images[i], &cfg.augment, &mut rng)?);
            }
            let l = optimize_step(state, lr, |s, m| stage1_objective(s, m, &strong, cfg))?;
            acc.add(&l);
        }
        let metrics = acc.finish(state, Phase::Stage1, lr, false, None);
        if finish_epoch(state, metrics, hook)? == Control::Stop {
            return Ok(Control::Stop);
        }
    }
    Ok(Control::Continue)
}

pub fn train_stage1(state: &mut TrainState, dataset: &NoisyDataset, cfg: &TrainConfig) -> Result<()> {
    train_stage1_with(state, dataset, cfg, &mut |_, _| Ok(Control::Continue)).map(|_| ())
}

fn sampler(dataset: &NoisyDataset, cfg: &TrainConfig, group_size: usize, mode: GroupingMode) -> Result<MgbsSampler> {
    MgbsSampler::new(
        &dataset.records,
        group_size,
        cfg.batch_size() / group_size,
        derive_seed(cfg.seed, SAMPLER_STREAM),
        cfg.remainder,
        mode,
    )
}

/// Joint stage over mini-group batches.
pub fn train_stage2_with<H>(
    state: &mut TrainState,
    dataset: &NoisyDataset,
    cfg: &TrainConfig,
    test: Option<&NoisyDataset>,
    hook: &mut H,
) -> Result<Control>
where
    H: FnMut(&TrainState, &EpochMetrics) -> Result<Control>,
{
    check_dataset(dataset, &state.model)?;
    if state.model.config.group_size != cfg.group_size {
        return Err(Error::validation(
            "group_size",
            format!("model built for M = {} but training uses M = {}", state.model.config.group_size, cfg.group_size),
        ));
    }
    state.phase = Phase::Stage2;
    let sampler = sampler(dataset, cfg, cfg.group_size, cfg.grouping)?;
    let with_strong = cfg.contrastive_in_stage2();
    let sigma = cfg.learn_sigma && cfg.losses.supervised && cfg.losses.mixup;
    for e in 0..cfg.stage2_epochs {
        let lr = learning_rate(cfg, Phase::Stage2, e);
        let mut rng = epoch_rng(cfg, state.epoch);
        let mut acc = Accum::default();
        for b in sampler.epoch(state.epoch)? {
            let batch = StepBatch::from_groups(dataset, &b, with_strong, &cfg.augment, &mut rng)?;
            let l = optimize_step(state, lr, |s, m| stage2_objective(s, m, &batch, cfg))?;
            acc.add(&l);
        }
        let test_acc = test_accuracy(&state.model, test)?;
        let metrics = acc.finish(state, Phase::Stage2, lr, sigma, test_acc);
        if finish_epoch(state, metrics, hook)? == Control::Stop {
            return Ok(Control::Stop);
        }
    }
    Ok(Control::Continue)
}

pub fn train_stage2(state: &mut TrainState, dataset: &NoisyDataset, cfg: &TrainConfig) -> Result<()> {
    train_stage2_with(state, dataset, cfg, None, &mut |_, _| Ok(Control::Continue)).map(|_| ())
}

/// Full two-stage run.
pub fn train_ours_with<H>(
    dataset: &NoisyDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    test: Option<&NoisyDataset>,
    mut hook: H,
) -> Result<TrainState>
where
    H: FnMut(&TrainState, &EpochMetrics) -> Result<Control>,
{
    let mut state = TrainState::new(model_cfg, cfg)?;
    if train_stage1_with(&mut state, dataset, cfg, &mut hook)? == Control::Stop {
        return Ok(state);
    }
    train_stage2_with(&mut state, dataset, cfg, test, &mut hook)?;
    Ok(state)
}

/// Supervised training on the given labels for `stage1_epochs +
/// stage2_epochs` epochs with the same optimizer and batch size.
pub fn train_baseline_with<H>(
    dataset: &NoisyDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    test: Option<&NoisyDataset>,
    mut hook: H,
) -> Result<TrainState>
where
    H: FnMut(&TrainState, &EpochMetrics) -> Result<Control>,
{
    let epsilon = match cfg.method {
        Method::DefaultBaseline => 0.0,
        Method::LabelSmooth => cfg.smooth_epsilon,
        Method::Ours => return Err(Error::Precondition("train_baseline called with method `ours`".into())),
    };
    let mut state = TrainState::new(model_cfg, cfg)?;
    check_dataset(dataset, &state.model)?;
    state.phase = Phase::Baseline;
    let sampler = sampler(dataset, cfg, cfg.baseline_group_size, GroupingMode::IntraClass)?;
    for e in 0..cfg.stage1_epochs + cfg.stage2_epochs {
        let lr = learning_rate(cfg, Phase::Baseline, e);
        let mut rng = epoch_rng(cfg, state.epoch);
        let mut acc = Accum::default();
        for b in sampler.epoch(state.epoch)? {
            let batch = StepBatch::from_groups(dataset, &b, false, &cfg.augment, &mut rng)?;
            let l = optimize_step(&mut state, lr, |s, m| baseline_objective(s, m, &batch, epsilon))?;
            acc.add(&l);
        }
        let test_acc = test_accuracy(&state.model, test)?;
        let metrics = acc.finish(&state, Phase::Baseline, lr, false, test_acc);
        if finish_epoch(&mut state, metrics, &mut hook)? == Control::Stop {
            break;
        }
    }
    Ok(state)
}

pub fn train_baseline(dataset: &NoisyDataset, model_cfg: &ModelConfig, cfg: &TrainConfig, test: Option<&NoisyDataset>) -> Result<TrainState> {
    train_baseline_with(dataset, model_cfg, cfg, test, |_, _| Ok(Control::Continue))
}

/// Dispatches on `cfg.method`.
pub fn fit<H>(dataset: &NoisyDataset, model_cfg: &ModelConfig, cfg: &TrainConfig, test: Option<&NoisyDataset>, hook: H) -> Result<TrainState>
where
    H: FnMut(&TrainState, &EpochMetrics) -> Result<Control>,
{
    match cfg.method {
        Method::Ours => train_ours_with(dataset, model_cfg, cfg, test, hook),
        Method::DefaultBaseline | Method::LabelSmooth => train_baseline_with(dataset, model_cfg, cfg, test, hook),
    }
}
