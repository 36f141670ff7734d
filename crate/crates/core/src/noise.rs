//! Label corruption: transition matrices for instance-independent noise,
//! proxy-model predictions for instance-dependent noise, and audits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CorruptionRecord, ManifestHeader, NoiseKind, NoisyDataset, SymmetricConvention};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Symmetric,
    Asymmetric,
}

/// Row-stochastic label-corruption model: `rows[t][n]` is the probability
/// that a sample of true class `t` is given label `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    num_classes: usize,
    rows: Vec<Vec<f64>>,
    kind: MatrixKind,
}

impl TransitionMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn get(&self, true_label: usize, given_label: usize) -> f64 {
        self.rows[true_label][given_label]
    }

    /// Expected fraction of corrupted labels when true labels are uniform
    /// over classes: `1 - mean(diagonal)`.
    pub fn expected_noise_rate(&self) -> f64 {
        1.0 - (0..self.num_classes).map(|t| self.rows[t][t]).sum::<f64>() / self.num_classes as f64
    }

    pub fn is_identity(&self) -> bool {
        (0..self.num_classes).all(|t| self.rows[t][t] == 1.0)
    }

    /// Checks the structural invariants for the matrix kind.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if self.rows.len() != c || self.rows.iter().any(|r| r.len() != c) {
            return Err(Error::validation("transition matrix", format!("not {c}x{c}")));
        }
        for (t, row) in self.rows.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::validation("transition matrix", format!("row {t} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::validation("transition matrix", format!("row {t} sums to {s}")));
            }
            match self.kind {
                MatrixKind::Symmetric => {
                    let off: Vec<f64> = (0..c).filter(|&n| n != t).map(|n| row[n]).collect();
                    if off.windows(2).any(|w| w[0] != w[1]) {
                        return Err(Error::validation("transition matrix", format!("row {t} has unequal off-diagonal entries")));
                    }
                }
                MatrixKind::Asymmetric => {
                    let nonzero: Vec<usize> = (0..c).filter(|&n| row[n] != 0.0).collect();
                    let next = (t + 1) % c;
                    let ok = match nonzero.as_slice() {
                        [only] => *only == t,
                        [a, b] => (*a == t && *b == next) || (*a == next && *b == t),
                        _ => false,
                    };
                    if !ok {
                        return Err(Error::validation("transition matrix", format!("row {t} is not a next-class flip")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_classes(c: usize) -> Result<()> {
    if c < 2 {
        return Err(Error::validation("num_classes", format!("{c}; need at least 2 classes")));
    }
    Ok(())
}

/// Uniform label flips with total rate `p`, spread according to `convention`.
pub fn build_symmetric_matrix(p: f64, c: usize, convention: SymmetricConvention) -> Result<TransitionMatrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::validation("rate", format!("{p} not in [0, 1)")));
    }
    check_classes(c)?;
    let (diag, off) = match convention {
        SymmetricConvention::UniformAll => (1.0 - p + p / c as f64, p / c as f64),
        SymmetricConvention::UniformOffDiagonal => (1.0 - p, p / (c - 1) as f64),
    };
    let rows = (0..c).map(|t| (0..c).map(|n| if n == t { diag } else { off }).collect()).collect();
    let m = TransitionMatrix { num_classes: c, rows, kind: MatrixKind::Symmetric };
    m.validate()?;
    Ok(m)
}

/// Circular next-class flips: class `t` becomes `(t + 1) mod C` with rate `p`.
pub fn build_asymmetric_matrix(p: f64, c: usize) -> Result<TransitionMatrix> {
    if !(0.0..0.5).contains(&p) {
        return Err(Error::validation(
            "rate",
            format!("{p} not in [0, 0.5); at 0.5 and above the flipped class outnumbers the true one"),
        ));
    }
    if c == 2 {
        return Err(Error::validation(
            "num_classes",
            "asymmetric noise over 2 classes is symmetric noise; use build_symmetric_matrix",
        ));
    }
    check_classes(c)?;
    let mut rows = vec![vec![0.0; c]; c];
    for (t, row) in rows.iter_mut().enumerate() {
        row[t] = 1.0 - p;
        row[(t + 1) % c] += p;
    }
    let m = TransitionMatrix { num_classes: c, rows, kind: MatrixKind::Asymmetric };
    m.validate()?;
    Ok(m)
}

fn check_labels(labels: &[usize], c: usize) -> Result<()> {
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(Error::validation("labels", format!("label {l} at index {i} is outside [0, {c})")));
    }
    Ok(())
}

/// Draws each given label independently from the row of its true label.
/// Pure in `(labels, matrix, seed)`.
pub fn apply_transition(labels: &[usize], matrix: &TransitionMatrix, seed: u64) -> Result<Vec<CorruptionRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_transition_with(labels, matrix, |row| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (n, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return n;
            }
        }
        // u landed in the rounding slack above the last cumulative sum
        row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
    })
}

/// [`apply_transition`] with a caller-supplied draw from a matrix row.
pub fn apply_transition_with(
    labels: &[usize],
    matrix: &TransitionMatrix,
    mut draw: impl FnMut(&[f64]) -> usize,
) -> Result<Vec<CorruptionRecord>> {
    check_labels(labels, matrix.num_classes)?;
    labels
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let given = draw(&matrix.rows[t]);
            if given >= matrix.num_classes {
                return Err(Error::validation("draw", format!("sampler returned class {given}")));
            }
            Ok(CorruptionRecord::new(i, t, given))
        })
        .collect()
}

pub fn realized_noise_rate(records: &[CorruptionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("records", "empty sequence"));
    }
    Ok(records.iter().filter(|r| r.corrupted).count() as f64 / records.len() as f64)
}

/// Symmetric or asymmetric corruption of bare labels (no images needed).
pub fn inject_labels(
    labels: &[usize],
    num_classes: usize,
    kind: NoiseKind,
    rate: f64,
    convention: SymmetricConvention,
    seed: u64,
) -> Result<(ManifestHeader, Vec<CorruptionRecord>)> {
    let (matrix, convention) = match kind {
        NoiseKind::Symmetric => (build_symmetric_matrix(rate, num_classes, convention)?, Some(convention)),
        NoiseKind::Asymmetric => (build_asymmetric_matrix(rate, num_classes)?, None),
        NoiseKind::None => {
            check_labels(labels, num_classes)?;
            let records = labels.iter().enumerate().map(|(i, &l)| CorruptionRecord::clean(i, l)).collect();
            return Ok((ManifestHeader { seed, ..ManifestHeader::clean(num_classes) }, records));
        }
        NoiseKind::InstanceDependent => {
            return Err(Error::validation("noise kind", "instance-dependent noise needs images and a proxy model"));
        }
    };
    let records = apply_transition(labels, &matrix, seed)?;
    let realized_rate = realized_noise_rate(&records)?;
    let header = ManifestHeader {
        noise_kind: kind,
        rate,
        seed,
        convention,
        num_classes,
        realized_rate,
        proxy_epoch: None,
        proxy_accuracy: None,
    };
    Ok((header, records))
}

/// Corrupts a clean dataset with symmetric or asymmetric noise.
pub fn inject_instance_independent(
    clean: &NoisyDataset,
    kind: NoiseKind,
    rate: f64,
    convention: SymmetricConvention,
    seed: u64,
) -> Result<NoisyDataset> {
    if !clean.is_clean() {
        return Err(Error::Precondition("dataset already carries corrupted labels".into()));
    }
    let (manifest, records) = inject_labels(&clean.true_labels(), clean.num_classes, kind, rate, convention, seed)?;
    clean.with_records(records, manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyOptions {
    /// Accepted distance between proxy training accuracy and `1 - P`.
    pub tolerance: f64,
    /// Maximum proxy training epochs.
    pub max_epochs: usize,
}

impl Default for ProxyOptions {
    fn default() -> Self {
        Self { tolerance: 0.02, max_epochs: 50 }
    }
}

/// Instance-dependent noise: trains a plain supervised proxy on the clean
/// labels, takes the earliest epoch whose training accuracy lies within
/// `tolerance` of `1 - P` (otherwise the nearest one), and uses that
/// checkpoint's predictions as the given labels. Fails only when no epoch
/// got down to `1 - P + tolerance`.
pub fn inject_instance_dependent(
    clean: &NoisyDataset,
    rate: f64,
    model_config: &ModelConfig,
    proxy_config: &TrainConfig,
    options: &ProxyOptions,
    seed: u64,
) -> Result<NoisyDataset> {
    if !clean.is_clean() {
        return Err(Error::Precondition("dataset already carries corrupted labels".into()));
    }
    if !(rate > 0.0 && rate < 0.5) {
        return Err(Error::validation("rate", format!("{rate} not in (0, 0.5)")));
    }
    let target = 1.0 - rate;
    let mut cfg = proxy_config.clone();
    cfg.method = trainer::Method::DefaultBaseline;
    cfg.seed = seed;
    cfg.stage1_epochs = 0;
    cfg.stage2_epochs = options.max_epochs;

    let truth = clean.true_labels();
    // (epoch, accuracy, predictions) of the checkpoint nearest the target so far
    let mut nearest: Option<(usize, f64, Vec<usize>)> = None;
    let mut chosen: Option<(usize, f64, Vec<usize>)> = None;
    let mut lowest = f64::INFINITY;
    trainer::train_baseline_with(clean, model_config, &cfg, None, |state, _metrics| {
        let preds = trainer::predict_labels(&state.model, &clean.images)?;
        let acc = preds.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64;
        let epoch = state.epoch;
        lowest = lowest.min(acc);
        if (acc - target).abs() <= options.tolerance {
            chosen = Some((epoch, acc, preds));
            return Ok(trainer::Control::Stop);
        }
        if nearest.as_ref().is_none_or(|(_, a, _)| (acc - target).abs() < (a - target).abs()) {
            nearest = Some((epoch, acc, preds));
        }
        Ok(trainer::Control::Continue)
    })?;

    let (epoch, acc, preds) = match (chosen, nearest) {
        (Some(c), _) => c,
        (None, Some(n)) if lowest <= target + options.tolerance => {
            log::warn!("proxy never came within {} of accuracy {target:.4}; using epoch {} at {:.4}", options.tolerance, n.0, n.1);
            n
        }
        (None, Some(n)) => return Err(Error::ProxyAccuracy { target: target + options.tolerance, closest: n.1, epoch: n.0 }),
        (None, None) => return Err(Error::validation("proxy max_epochs", "must be at least 1")),
    };
    let records: Vec<CorruptionRecord> =
        truth.iter().zip(&preds).enumerate().map(|(i, (&t, &p))| CorruptionRecord::new(i, t, p)).collect();
    let realized_rate = realized_noise_rate(&records)?;
    let manifest = ManifestHeader {
        noise_kind: NoiseKind::InstanceDependent,
        rate,
        seed,
        convention: None,
        num_classes: clean.num_classes,
        realized_rate,
        proxy_epoch: Some(epoch),
        proxy_accuracy: Some(acc),
    };
    clean.with_records(records, manifest)
}
