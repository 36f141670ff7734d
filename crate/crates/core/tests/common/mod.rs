//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance harness.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView1};
use noisemix::autograd::Graph;
use noisemix::data::SyntheticRecipe;
use noisemix::losses::{mixup_graph, one_hot};
use noisemix::model::{EncoderKind, ModelConfig};
use noisemix::trainer::{EpochMetrics, TrainConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for k in 0..u.len() {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// Contrastive loss summed over every sample and both anchor views, written
/// as nested loops. Rows are `(view a of 0, view b of 0, view a of 1, ...)`.
/// The denominator pairs both views of `i` with both views of every other
/// sample; `with_positive` switches to the usual all-other-views sum.
pub fn contrastive_oracle(u: &Array2<f64>, tau: f64, with_positive: bool) -> f64 {
    let n = u.nrows() / 2;
    let s = |a: usize, b: usize| cosine(u.row(a), u.row(b)) / tau;
    let mut total = 0.0;
    for i in 0..n {
        for (a, b) in [(2 * i, 2 * i + 1), (2 * i + 1, 2 * i)] {
            let mut den = 0.0;
            if with_positive {
                for k in 0..2 * n {
                    if k != a {
                        den += s(a, k).exp();
                    }
                }
            } else {
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    for p in [2 * i, 2 * i + 1] {
                        for q in [2 * j, 2 * j + 1] {
                            den += s(p, q).exp();
                        }
                    }
                }
            }
            total += -(s(a, b).exp() / den).ln();
        }
    }
    total
}

/// Mean over rows of `-Σ_j t_j log softmax(z)_j`.
pub fn cross_entropy_oracle(logits: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (z, t) in logits.rows().into_iter().zip(targets.rows()) {
        let z_sum: f64 = z.iter().map(|v| v.exp()).sum();
        for j in 0..z.len() {
            total -= t[j] * (z[j].exp() / z_sum).ln();
        }
    }
    total / logits.nrows() as f64
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `Σ w_m v_m / Σ w_m` for one group.
pub fn mix_oracle(weights: &[f64], rows: &Array2<f64>) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    (0..rows.ncols()).map(|c| (0..rows.nrows()).map(|m| weights[m] * rows[[m, c]]).sum::<f64>() / total).collect()
}

/// `L_m/σ₁ + L_s/σ₂ + ln σ₁ + ln σ₂`
pub fn decision_oracle(l_m: f64, l_s: f64, sigma_1: f64, sigma_2: f64) -> f64 {
    l_m / sigma_1 + l_s / sigma_2 + sigma_1.ln() + sigma_2.ln()
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error, with `floor` guarding near-zero
/// components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn tiny_model(num_classes: usize, group_size: usize, size: usize) -> ModelConfig {
    ModelConfig {
        encoder_kind: EncoderKind::ToyCnn,
        toy_widths: vec![8, 16, 32],
        projection_dim: 16,
        num_classes,
        group_size,
        input_channels: 3,
        input_height: size,
        input_width: size,
        ..ModelConfig::default()
    }
}

pub fn tiny_recipe(train: usize, test: usize, seed: u64) -> SyntheticRecipe {
    SyntheticRecipe { train_size: train, test_size: test, seed, ..SyntheticRecipe::default() }
}

pub fn short_train(stage1: usize, stage2: usize, seed: u64) -> TrainConfig {
    TrainConfig { stage1_epochs: stage1, stage2_epochs: stage2, seed, ..TrainConfig::default() }
}

/// Mean test accuracy of the final three epochs.
pub fn last3(history: &[EpochMetrics]) -> f64 {
    let acc: Vec<f64> = history.iter().rev().take(3).map(|m| m.test_accuracy.expect("test accuracy")).collect();
    acc.iter().sum::<f64>() / acc.len() as f64
}

pub fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

pub fn reshape(v: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v.to_vec()).unwrap()
}

pub struct MixupCase {
    pub m: usize,
    pub d: usize,
    pub c: usize,
    pub labels: Vec<usize>,
    pub intra: bool,
}

/// Attention head (one FC + sigmoid) -> group mixture -> classifier -> CE.
pub fn mixup_chain_oracle(case: &MixupCase, v: &Array2<f64>, w_att: &Array2<f64>, w_cls: &Array2<f64>) -> f64 {
    let (m, d, c) = (case.m, case.d, case.c);
    let concat: Vec<f64> = v.iter().copied().collect();
    let weights: Vec<f64> = (0..m).map(|j| sigmoid((0..m * d).map(|k| concat[k] * w_att[[k, j]]).sum())).collect();
    let mixed = mix_oracle(&weights, v);
    let logits = Array2::from_shape_fn((1, c), |(_, j)| (0..d).map(|k| mixed[k] * w_cls[[k, j]]).sum());
    let y = one_hot(&case.labels, c).unwrap();
    let target = if case.intra { y.row(0).to_vec() } else { mix_oracle(&weights, &y) };
    cross_entropy_oracle(&logits, &Array2::from_shape_vec((1, c), target).unwrap())
}

pub fn mixup_chain_graph(case: &MixupCase, v: &Array2<f64>, w_att: &Array2<f64>, w_cls: &Array2<f64>) -> (f64, [Vec<f64>; 3]) {
    let (m, d, c) = (case.m, case.d, case.c);
    let mut g = Graph::new();
    let vv = g.leaf(v.clone().into_dyn());
    let wa = g.leaf(w_att.clone().into_dyn());
    let wc = g.leaf(w_cls.clone().into_dyn());
    let concat = g.reshape(vv, &[1, m * d]).unwrap();
    let h = g.matmul(concat, wa).unwrap();
    let w = g.sigmoid(h);
    let mixed = mixup_graph(&mut g, w, vv).unwrap();
    let logits = g.matmul(mixed, wc).unwrap();
    let y = one_hot(&case.labels, c).unwrap();
    let target = if case.intra {
        g.constant(y.row(0).to_owned().into_shape_with_order((1, c)).unwrap().into_dyn())
    } else {
        let yv = g.constant(y.into_dyn());
        mixup_graph(&mut g, w, yv).unwrap()
    };
    let l = g.soft_cross_entropy(logits, target).unwrap();
    let grads = g.backward(l).unwrap();
    let get = |x| grads.get(x).unwrap().iter().copied().collect::<Vec<f64>>();
    (g.scalar(l), [get(vv), get(wa), get(wc)])
}
