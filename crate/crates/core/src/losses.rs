//! Contrastive, mixup, uncertainty-weighted and supervised losses.
//!
//! Each loss has a graph form used for training and a plain value form.
//! Contrastive embeddings are laid out as `[2N, p]` rows
//! `(U_1a, U_1b, U_2a, U_2b, …)`: two strong views per sample, interleaved.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine_similarity: lengths {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::validation("embedding", "zero-norm vector has no direction"));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub embeddings: Array2<f64>,
    pub temperature: f64,
    /// Standard NT-Xent denominator (every other view, positive included)
    /// instead of the cross-sample-only one.
    pub include_positive_in_denominator: bool,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Array2<f64>, temperature: f64) -> Result<Self> {
        if !embeddings.nrows().is_multiple_of(2) {
            return Err(Error::validation("contrastive batch", format!("{} rows; expected two views per sample", embeddings.nrows())));
        }
        if embeddings.nrows() < 4 {
            return Err(Error::validation("contrastive batch", "need at least 2 samples for a non-empty denominator"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::validation("temperature", format!("{temperature} is not positive")));
        }
        Ok(Self { embeddings, temperature, include_positive_in_denominator: false })
    }

    pub fn num_samples(&self) -> usize {
        self.embeddings.nrows() / 2
    }
}

/// Which strong view of a sample anchors a pair loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorView {
    First,
    Second,
}

/// Loss of one anchor view against its partner, written directly from the
/// definition: the denominator runs over all four view pairings of sample
/// `i` with every other sample `j` and leaves out the positive pair.
pub fn contrastive_pair_loss(i: usize, anchor: AnchorView, batch: &ContrastiveBatch) -> Result<f64> {
    let n = batch.num_samples();
    if i >= n {
        return Err(Error::validation("sample index", format!("{i} >= {n}")));
    }
    let e = &batch.embeddings;
    let tau = batch.temperature;
    let (a, b) = match anchor {
        AnchorView::First => (2 * i, 2 * i + 1),
        AnchorView::Second => (2 * i + 1, 2 * i),
    };
    let sim = |x: usize, y: usize| cosine_similarity(e.row(x), e.row(y));
    let pos = sim(a, b)? / tau;
    let mut den = 0.0;
    if batch.include_positive_in_denominator {
        for k in (0..2 * n).filter(|&k| k != a) {
            den += (sim(a, k)? / tau).exp();
        }
    } else {
        for j in (0..n).filter(|&j| j != i) {
            for ti in [2 * i, 2 * i + 1] {
                for tj in [2 * j, 2 * j + 1] {
                    den += (sim(ti, tj)? / tau).exp();
                }
            }
        }
    }
    Ok(den.ln() - pos)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveValue {
    /// Sum of both directed pair losses over all samples.
    pub sum: f64,
    /// `sum / 2N`
    pub mean: f64,
}

/// Graph form of the contrastive loss; returns `(sum, mean)` nodes.
pub fn contrastive_loss_graph(g: &mut Graph, embeddings: Var, temperature: f64, include_positive: bool) -> Result<(Var, Var)> {
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) || shape[0] < 4 {
        return Err(Error::validation("contrastive batch", format!("embedding shape {shape:?}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::validation("temperature", format!("{temperature} is not positive")));
    }
    let rows = shape[0];
    let n = rows / 2;
    let z = g.row_normalize(embeddings)?;
    let sim = g.matmul_t(z, z)?;
    let sim = g.scale(sim, 1.0 / temperature);
    // cosine <= 1, so this keeps every exponent <= 0
    let shifted = g.add_scalar(sim, -1.0 / temperature);
    let e = g.exp(shifted);
    let mask = ArrayD::from_shape_fn(IxDyn(&[rows, rows]), |ix| {
        let (a, b) = (ix[0], ix[1]);
        let keep = if include_positive { a != b } else { a / 2 != b / 2 };
        if keep { 1.0 } else { 0.0 }
    });
    let masked = g.mul_const(e, mask)?;
    let per_row = g.sum_rows(masked)?;
    let total = if include_positive {
        let log_den = g.log(per_row);
        let idx = (0..rows).map(|a| a * rows + (a ^ 1)).collect();
        let pos = g.gather(shifted, idx)?;
        let diff = g.sub(log_den, pos)?;
        g.sum(diff)
    } else {
        let pairs = g.reshape(per_row, &[n, 2])?;
        let den = g.sum_rows(pairs)?;
        let log_den = g.log(den);
        let idx = (0..n).map(|i| 2 * i * rows + 2 * i + 1).collect();
        let pos = g.gather(shifted, idx)?;
        let diff = g.sub(log_den, pos)?;
        let s = g.sum(diff);
        // both anchor directions share the same denominator and similarity
        g.scale(s, 2.0)
    };
    let mean = g.scale(total, 1.0 / rows as f64);
    Ok((total, mean))
}

pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<ContrastiveValue> {
    let mut g = Graph::new();
    let u = g.constant(batch.embeddings.clone().into_dyn());
    let (sum, mean) = contrastive_loss_graph(&mut g, u, batch.temperature, batch.include_positive_in_denominator)?;
    Ok(ContrastiveValue { sum: g.scalar(sum), mean: g.scalar(mean) })
}

fn check_weights(weights: ArrayView1<f64>, rows: usize) -> Result<f64> {
    if weights.len() != rows {
        return Err(Error::Shape(format!("mixup: {} weights for {rows} group members", weights.len())));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::validation("mixup weights", "negative weight"));
    }
    let total = weights.sum();
    if total < 1e-12 {
        return Err(Error::validation("mixup weights", format!("sum {total} below 1e-12")));
    }
    Ok(total)
}

/// `Σ w_i V_i / Σ w_i` over the rows of `features`.
pub fn mixup_features(features: ArrayView2<f64>, weights: ArrayView1<f64>) -> Result<Array1<f64>> {
    let total = check_weights(weights, features.nrows())?;
    let mut out = Array1::zeros(features.ncols());
    for (w, row) in weights.iter().zip(features.rows()) {
        out.scaled_add(*w, &row);
    }
    Ok(out / total)
}

/// `Σ w_i Y_i / Σ w_i`. When all label rows agree the shared row is returned as is.
pub fn mixup_label(labels: ArrayView2<f64>, weights: ArrayView1<f64>) -> Result<Array1<f64>> {
    if labels.nrows() > 0 && labels.rows().into_iter().all(|r| r == labels.row(0)) {
        check_weights(weights, labels.nrows())?;
        return Ok(labels.row(0).to_owned());
    }
    mixup_features(labels, weights)
}

/// Graph form of the group mixture: `weights [1, M]`, `rows [M, k]` to `[1, k]`.
pub fn mixup_graph(g: &mut Graph, weights: Var, rows: Var) -> Result<Var> {
    let num = g.matmul(weights, rows)?;
    let total = g.sum(weights);
    let inv = g.recip(total);
    g.mul_scalar(num, inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyWeights {
    pub sigma_mixup: f64,
    pub sigma_supervised: f64,
}

impl Default for UncertaintyWeights {
    fn default() -> Self {
        Self { sigma_mixup: 1.0, sigma_supervised: 1.0 }
    }
}

/// `L_m / σ₁ + L_s / σ₂ + log(σ₁ σ₂)`
pub fn decision_loss(l_m: f64, l_s: f64, w: UncertaintyWeights) -> Result<f64> {
    let (s1, s2) = (w.sigma_mixup, w.sigma_supervised);
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(Error::validation("sigma", format!("({s1}, {s2}) must both be positive")));
    }
    Ok(l_m / s1 + l_s / s2 + (s1 * s2).ln())
}

/// Graph form with `σ = exp(s)`: `e^{-s₁} L_m + e^{-s₂} L_s + s₁ + s₂`.
pub fn decision_loss_graph(g: &mut Graph, l_m: Var, l_s: Var, log_sigma_mixup: Var, log_sigma_supervised: Var) -> Result<Var> {
    let weighted = |g: &mut Graph, l: Var, s: Var| -> Result<Var> {
        let neg = g.scale(s, -1.0);
        let inv = g.exp(neg);
        g.mul(inv, l)
    };
    let a = weighted(g, l_m, log_sigma_mixup)?;
    let b = weighted(g, l_s, log_sigma_supervised)?;
    let ab = g.add(a, b)?;
    let logs = g.add(log_sigma_mixup, log_sigma_supervised)?;
    g.add(ab, logs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Contrastive warm-up.
    Stage1,
    /// Joint decision + contrastive optimization.
    Stage2,
}

pub fn stage_loss(stage: Stage, l_c: f64, l_d: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::validation("lambda", format!("{lambda} is negative")));
    }
    Ok(match stage {
        Stage::Stage1 => l_c,
        Stage::Stage2 => l_d + lambda * l_c,
    })
}

/// Mean cross-entropy of `softmax(logits)` against probability rows.
pub fn supervised_loss(logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.to_owned().into_dyn());
    let t = g.constant(targets.to_owned().into_dyn());
    let l = g.soft_cross_entropy(z, t)?;
    Ok(g.scalar(l))
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    smooth_labels(labels, num_classes, 0.0)
}

/// `(1 - ε)·one_hot + ε / C`
pub fn smooth_labels(labels: &[usize], num_classes: usize, epsilon: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::validation("smoothing epsilon", format!("{epsilon} not in [0, 1]")));
    }
    let mut out = Array2::from_elem((labels.len(), num_classes), epsilon / num_classes as f64);
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::validation("label", format!("{l} >= {num_classes}")));
        }
        out[[i, l]] += 1.0 - epsilon;
    }
    Ok(out)
}
